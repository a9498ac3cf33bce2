"""Independent reference route: evaluate every node into its own temporary.

This is deliberately a different evaluation strategy from both the fused
per-element interpreter and the generated kernels: bottom-up, one full
materialised array per AST node, using plain numpy array operations.  Tests
compare fused execution against it; keep it free of any shared evaluation
code.
"""

from __future__ import annotations

import numpy as np

from .errors import FusematError
from .expr import (
    BinaryElem,
    BinaryKind,
    Diag,
    ExprNode,
    Leaf,
    MatMul,
    Subview,
    Transpose,
    UnaryElem,
    UnaryKind,
)


def materialize(node: ExprNode, env: dict[int, np.ndarray]) -> np.ndarray:
    """Evaluate `node` bottom-up; `env` maps matrix ids to 2-D arrays.

    Returns a fresh 2-D array of the node's shape and dtype.
    """
    with np.errstate(all="ignore"):
        return _mat(node, env)


def _mat(node: ExprNode, env: dict[int, np.ndarray]) -> np.ndarray:
    if isinstance(node, Leaf):
        arr = env[node.mat_id]
        if arr.shape != (node.shape.n_rows, node.shape.n_cols):
            raise FusematError(f"environment array for {node.mat_id} has shape {arr.shape}")
        return arr.copy()
    if isinstance(node, Subview):
        parent = env[node.mat_id]
        r0, c0 = node.row_off, node.col_off
        return parent[r0:r0 + node.shape.n_rows, c0:c0 + node.shape.n_cols].copy()
    if isinstance(node, Diag):
        parent = env[node.mat_id]
        return np.diagonal(parent, offset=node.k).reshape(-1, 1).copy()
    if isinstance(node, Transpose):
        return _mat(node.child, env).T.copy()
    if isinstance(node, MatMul):
        a, b = _mat(node.left, env), _mat(node.right, env)
        if node.etype.dtype == np.float32:
            return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)
        return a @ b
    if isinstance(node, BinaryElem):
        a, b = _mat(node.left, env), _mat(node.right, env)
        if node.kind is BinaryKind.plus:
            return a + b
        if node.kind is BinaryKind.minus:
            return a - b
        if node.kind is BinaryKind.schur:
            return a * b
        return a / b
    if isinstance(node, UnaryElem):
        x = _mat(node.child, env)
        kind = node.kind
        dtype = node.child.etype.dtype
        if kind is UnaryKind.scalar_add:
            return x + dtype.type(node.scalar)
        if kind is UnaryKind.scalar_pre_mul:
            return dtype.type(node.scalar) * x
        if kind is UnaryKind.scalar_pre_div:
            return dtype.type(node.scalar) / x
        if kind is UnaryKind.neg:
            return -x
        if kind is UnaryKind.exp:
            return np.exp(x)
        if kind is UnaryKind.log:
            return np.log(x)
        if kind is UnaryKind.sqrt:
            return np.sqrt(x)
        if kind is UnaryKind.tanh:
            return np.tanh(x)
        if kind is UnaryKind.pow_int:
            if node.exponent == 0:
                return np.ones_like(x)
            acc = x.copy()
            for _ in range(node.exponent - 1):
                acc = acc * x
            return acc
        if kind is UnaryKind.conv:
            if node.target.is_float:
                return x.astype(node.target.dtype)
            return x.astype(np.int64).astype(node.target.dtype)
        if kind is UnaryKind.gt_scalar:
            return (x > dtype.type(node.scalar)).astype(node.etype.dtype)
        raise FusematError(f"oracle: unary kind {kind}")
    raise FusematError(f"oracle: node {type(node).__name__}")


def compare(actual: np.ndarray, expected: np.ndarray, rel_tol: float) -> float:
    """Max relative error, NaN-aware; raises nothing, returns the error.

    NaN==NaN and equal-signed infinities count as exact; relative error uses
    the expected value's magnitude with a tiny floor so exact zeros compare
    exactly.
    """
    a = np.asarray(actual, dtype=np.float64)
    b = np.asarray(expected, dtype=np.float64)
    if a.shape != b.shape:
        raise FusematError(f"compare: shapes {a.shape} vs {b.shape}")
    both_nan = np.isnan(a) & np.isnan(b)
    same_inf = np.isinf(a) & np.isinf(b) & (np.sign(a) == np.sign(b))
    ok = both_nan | same_inf
    with np.errstate(all="ignore"):
        err = np.abs(a - b) / np.maximum(np.abs(b), 1e-30)
    err = np.where(ok, 0.0, err)
    mismatched_special = (np.isnan(a) != np.isnan(b)) | (np.isinf(a) != np.isinf(b))
    err = np.where(mismatched_special & ~ok, np.inf, err)
    return float(np.max(err)) if err.size else 0.0


def assert_close(actual: np.ndarray, expected: np.ndarray, rel_tol: float, what: str = "") -> None:
    err = compare(actual, expected, rel_tol)
    if not (err <= rel_tol):
        raise AssertionError(f"{what}: max relative error {err:.3e} exceeds {rel_tol:.1e}")


def allclose_mixed(actual: np.ndarray, expected: np.ndarray,
                   rtol: float = 1e-4, atol: float = 1e-4) -> bool:
    """NaN-aware |a-b| <= atol + rtol*|b| check.

    Device backends use a different libm than the oracle; ulp differences
    amplify relatively through near-zero logs and near-zero divisors, so
    cross-library comparisons need a mixed tolerance.
    """
    a = np.asarray(actual, dtype=np.float64)
    b = np.asarray(expected, dtype=np.float64)
    special_ok = (np.isnan(a) & np.isnan(b)) | (
        np.isinf(a) & np.isinf(b) & (np.sign(a) == np.sign(b)))
    with np.errstate(all="ignore"):
        close = np.abs(a - b) <= atol + rtol * np.abs(b)
    return bool(np.all(special_ok | close))
