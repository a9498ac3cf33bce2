"""User-facing lazy matrix API.

Matrices are device-buffer handles; arithmetic builds expression trees and
nothing runs until an assignment (or a reduction/element read) triggers
planning, kernel-cache lookup, and launches.  Element access synchronises and
round-trips device memory — it is the documented slow path.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

import numpy as np

from . import expr as ast
from . import rng
from .backend import Backend, BufferHandle, RefBackend
from .codegen import generate_kernel_source
from .errors import FusematError, OutOfBoundsError, ShapeError
from .expr import ElemType, ExprNode, MatShape
from .plan import ExecutionPlan, FusedKernelStep, MatMulStep, plan, reduce_plan


def make_backend(name: str) -> Backend:
    if name == "ref":
        return RefBackend()
    if name in ("device", "cjit"):
        from .cjit import CJitBackend

        return CJitBackend()
    raise FusematError(f"unknown backend {name!r} (use 'ref' or 'device')")


@dataclass
class KernelCache:
    """signature -> compiled kernel; at most one compile per signature."""

    handles: dict[str, object] = field(default_factory=dict)
    hits: int = 0
    misses: int = 0

    def lookup(self, signature: str):
        handle = self.handles.get(signature)
        if handle is not None:
            self.hits += 1
        return handle

    def store(self, signature: str, handle) -> None:
        self.handles[signature] = handle
        self.misses += 1


class Context:
    """Owns one backend queue, its kernel cache and launch/compile counters."""

    def __init__(self, backend: str | Backend = "ref"):
        self.backend = make_backend(backend) if isinstance(backend, str) else backend
        self.cache = KernelCache()
        self.launches = 0
        self._next_mat_id = 0

    def new_mat_id(self) -> int:
        mat_id = self._next_mat_id
        self._next_mat_id += 1
        return mat_id

    @property
    def compile_count(self) -> int:
        return self.cache.misses

    def reset_counters(self) -> None:
        # Counters only; compiled kernels persist for the context's lifetime.
        self.launches = 0
        self.cache.hits = 0
        self.cache.misses = 0

    def sync(self) -> None:
        self.backend.synchronize()

    # -- plan execution ----------------------------------------------------

    def execute_plan(self, pl: ExecutionPlan, env: dict[int, BufferHandle]) -> None:
        """Run all steps of a plan; `env` must hold every buffer the plan names."""
        for step in pl.steps:
            if isinstance(step, MatMulStep):
                self.backend.matmul(
                    env[step.out_id], env[step.left_id], env[step.right_id],
                    step.left_shape.n_rows, step.left_shape.n_cols,
                    step.right_shape.n_cols, step.etype,
                )
                self.launches += 1
            else:
                self._launch_fused(step, env)

    def _launch_fused(self, step: FusedKernelStep, env: dict[int, BufferHandle]) -> None:
        kernel = self.cache.lookup(step.signature)
        if kernel is None:
            source = generate_kernel_source(step.expr, step.skeleton)
            kernel = self.backend.compile(source)
            self.cache.store(step.signature, kernel)
        args: list = [env[step.out_id], step.domain_shape.n_rows, step.domain_shape.n_cols]
        for spec in step.inputs:
            args.append(env[spec.mat_id])
            args.append(spec.parent_shape.n_rows)
            args.append(spec.parent_shape.n_cols)
            for view in spec.views:
                args.append(view.row_off)
                args.append(view.col_off)
        for slot in step.scalars:
            args.append(slot.value)
        self.backend.launch(kernel, args, (step.domain_shape.n_rows, step.domain_shape.n_cols))
        self.launches += 1


_default_context: Context | None = None


def default_context() -> Context:
    global _default_context
    if _default_context is None:
        _default_context = Context()
    return _default_context


class _Ops:
    """Operator overloading shared by Mat and MatExpr; builds lazy trees."""

    def _node(self) -> ExprNode:
        raise NotImplementedError

    def _ctx(self) -> Context:
        raise NotImplementedError

    def _mats(self) -> dict[int, "Mat"]:
        raise NotImplementedError

    def _wrap(self, node: ExprNode, other: "_Ops | None" = None) -> "MatExpr":
        mats = dict(self._mats())
        if other is not None:
            if other._ctx() is not self._ctx():
                raise FusematError("cannot mix matrices from different contexts")
            mats.update(other._mats())
        return MatExpr(node, mats, self._ctx())

    def __add__(self, other):
        if isinstance(other, _Ops):
            return self._wrap(ast.plus(self._node(), other._node()), other)
        return self._wrap(ast.scalar_add(self._node(), other))

    def __radd__(self, other):
        return self._wrap(ast.scalar_add(self._node(), other))

    def __sub__(self, other):
        if isinstance(other, _Ops):
            return self._wrap(ast.minus(self._node(), other._node()), other)
        return self._wrap(ast.scalar_add(self._node(), -other))

    def __rsub__(self, other):
        return self._wrap(ast.scalar_add(ast.neg(self._node()), other))

    def __mul__(self, other):
        if isinstance(other, _Ops):
            return self._wrap(ast.schur(self._node(), other._node()), other)
        return self._wrap(ast.scalar_pre_mul(other, self._node()))

    def __rmul__(self, other):
        return self._wrap(ast.scalar_pre_mul(other, self._node()))

    def __truediv__(self, other):
        if isinstance(other, _Ops):
            return self._wrap(ast.elem_div(self._node(), other._node()), other)
        node = self._node()
        if not node.etype.is_float:
            raise ShapeError("division by scalar requires a float expression")
        return self._wrap(ast.scalar_pre_mul(1.0 / other, node))

    def __rtruediv__(self, other):
        return self._wrap(ast.scalar_pre_div(other, self._node()))

    def __matmul__(self, other):
        if not isinstance(other, _Ops):
            raise ShapeError("matmul needs a matrix operand")
        return self._wrap(ast.matmul(self._node(), other._node()), other)

    def __neg__(self):
        return self._wrap(ast.neg(self._node()))

    def __gt__(self, other):
        if isinstance(other, _Ops):
            raise ShapeError("only scalar comparison is supported")
        return self._wrap(ast.gt_scalar(self._node(), other))

    def __pow__(self, exponent):
        return self._wrap(ast.pow_int(self._node(), exponent))

    def t(self) -> "MatExpr":
        return self._wrap(ast.transpose(self._node()))


class MatExpr(_Ops):
    """A lazy expression over matrices of one context."""

    __slots__ = ("node", "mats", "ctx")

    def __init__(self, node: ExprNode, mats: dict[int, "Mat"], ctx: Context):
        self.node = node
        self.mats = mats
        self.ctx = ctx

    def _node(self) -> ExprNode:
        return self.node

    def _ctx(self) -> Context:
        return self.ctx

    def _mats(self) -> dict[int, "Mat"]:
        return self.mats

    @property
    def shape(self) -> MatShape:
        return self.node.shape

    @property
    def etype(self) -> ElemType:
        return self.node.etype

    def __repr__(self) -> str:
        return f"MatExpr({self.node.shape}, {self.node.etype.value})"


class Mat(_Ops):
    """Dense column-major matrix owning a device buffer."""

    def __init__(self, n_rows: int, n_cols: int, etype: ElemType | str = ElemType.f32,
                 ctx: Context | None = None):
        self.ctx = ctx or default_context()
        self.etype = ElemType.of(etype)
        self.shape = MatShape(n_rows, n_cols)
        self.mat_id = self.ctx.new_mat_id()
        self.handle = self.ctx.backend.alloc(self.etype, self.shape.n_elem)

    # -- expression plumbing ----------------------------------------------

    def _node(self) -> ExprNode:
        return ast.leaf(self.mat_id, self.etype, self.shape)

    def _ctx(self) -> Context:
        return self.ctx

    def _mats(self) -> dict[int, "Mat"]:
        return {self.mat_id: self}

    def diag(self, k: int = 0) -> MatExpr:
        return MatExpr(ast.diag(self.mat_id, self.etype, k, self.shape),
                       {self.mat_id: self}, self.ctx)

    def submat(self, row_off: int, col_off: int, n_rows: int, n_cols: int) -> MatExpr:
        node = ast.subview(self.mat_id, self.etype, row_off, col_off,
                           MatShape(n_rows, n_cols), self.shape)
        return MatExpr(node, {self.mat_id: self}, self.ctx)

    def center_half(self) -> MatExpr:
        """The centered view with half the rows and columns."""
        return self.submat(self.shape.n_rows // 4, self.shape.n_cols // 4,
                           self.shape.n_rows // 2, self.shape.n_cols // 2)

    @property
    def n_rows(self) -> int:
        return self.shape.n_rows

    @property
    def n_cols(self) -> int:
        return self.shape.n_cols

    # -- execution ----------------------------------------------------------

    def assign(self, value: "_Ops") -> "Mat":
        """Evaluate `value` into this matrix (resizing to its shape if needed)
        and return without waiting: launches are queued asynchronously."""
        e = as_expr(value)
        if e.ctx is not self.ctx:
            raise FusematError("expression belongs to a different context")
        if e.node.etype is not self.etype:
            raise ShapeError(
                f"cannot assign {e.node.etype.value} expression to {self.etype.value} matrix"
            )
        pl = plan(self.mat_id, e.node)
        if not pl.out_is_temp and pl.out_shape != self.shape:
            self._realloc(pl.out_shape)
        env = self._plan_env(pl, e)
        swapped = False
        try:
            self.ctx.execute_plan(pl, env)
            if pl.out_is_temp:
                self.ctx.backend.free(self.handle)
                self.handle = env[pl.out_id]
                self.shape = pl.out_shape
                swapped = True
        finally:
            for temp in pl.temps:
                if swapped and temp.temp_id == pl.out_id:
                    continue
                self.ctx.backend.free(env[temp.temp_id])
        return self

    def _plan_env(self, pl: ExecutionPlan, e: MatExpr) -> dict[int, BufferHandle]:
        env = {mat_id: mat.handle for mat_id, mat in e.mats.items()}
        env[self.mat_id] = self.handle
        for temp in pl.temps:
            env[temp.temp_id] = self.ctx.backend.alloc(temp.etype, temp.shape.n_elem)
        return env

    def _realloc(self, shape: MatShape) -> None:
        self.ctx.backend.free(self.handle)
        self.shape = shape
        self.handle = self.ctx.backend.alloc(self.etype, shape.n_elem)

    # -- synchronising element access (slow path) ----------------------------

    def _check_index(self, row: int, col: int) -> None:
        if not (0 <= row < self.shape.n_rows and 0 <= col < self.shape.n_cols):
            raise OutOfBoundsError(f"element ({row},{col}) outside {self.shape}")

    def elem_get(self, row: int, col: int):
        """Read one element; synchronises and copies device memory."""
        self._check_index(row, col)
        self.ctx.sync()
        buf = self.ctx.backend.download(self.handle)
        value = buf[row + col * self.shape.n_rows]
        return float(value) if self.etype.is_float else int(value)

    def elem_set(self, row: int, col: int, value) -> None:
        """Write one element; synchronises and round-trips device memory."""
        self._check_index(row, col)
        self.ctx.sync()
        buf = self.ctx.backend.download(self.handle)
        buf[row + col * self.shape.n_rows] = value
        self.ctx.backend.upload(buf, self.handle)

    def __getitem__(self, index: tuple[int, int]):
        return self.elem_get(*index)

    def __setitem__(self, index: tuple[int, int], value) -> None:
        self.elem_set(*index, value)

    # -- host transfer --------------------------------------------------------

    def to_numpy(self) -> np.ndarray:
        """Synchronise and download as a 2-D array."""
        self.ctx.sync()
        flat = self.ctx.backend.download(self.handle)
        return flat.reshape((self.shape.n_rows, self.shape.n_cols), order="F")

    def set_values(self, values: np.ndarray) -> "Mat":
        arr = np.asarray(values)
        if arr.shape != (self.shape.n_rows, self.shape.n_cols):
            raise ShapeError(f"values shape {arr.shape} != matrix {self.shape}")
        self.ctx.sync()
        self.ctx.backend.upload(arr.astype(self.etype.dtype), self.handle)
        return self

    # -- formatting -------------------------------------------------------------

    def to_string(self) -> str:
        arr = self.to_numpy()
        if self.etype.is_float:
            rows = (" ".join(f"{v:.4f}" for v in row) for row in arr)
        else:
            rows = (" ".join(str(int(v)) for v in row) for row in arr)
        return "\n".join(rows)

    def print(self, file=None) -> None:
        print(self.to_string(), file=file or sys.stdout)

    def __repr__(self) -> str:
        return f"Mat({self.shape}, {self.etype.value}, id={self.mat_id})"


def as_expr(value: _Ops) -> MatExpr:
    if isinstance(value, MatExpr):
        return value
    if isinstance(value, Mat):
        return MatExpr(value._node(), {value.mat_id: value}, value.ctx)
    raise FusematError(f"not a matrix expression: {value!r}")


# -- constructors ---------------------------------------------------------

def zeros(n_rows: int, n_cols: int, etype: ElemType | str = "f32",
          ctx: Context | None = None) -> Mat:
    return Mat(n_rows, n_cols, etype, ctx)  # buffers are zero-initialised


def ones(n_rows: int, n_cols: int, etype: ElemType | str = "f32",
         ctx: Context | None = None) -> Mat:
    return fill(n_rows, n_cols, 1, etype, ctx)


def fill(n_rows: int, n_cols: int, value, etype: ElemType | str = "f32",
         ctx: Context | None = None) -> Mat:
    m = Mat(n_rows, n_cols, etype, ctx)
    m.ctx.backend.upload(np.full(m.shape.n_elem, value, dtype=m.etype.dtype), m.handle)
    return m


def randu(n_rows: int, n_cols: int, seed: int, etype: ElemType | str = "f32",
          ctx: Context | None = None) -> Mat:
    """Uniform [0,1) fill from the documented counter-based stream (see rng)."""
    ety = ElemType.of(etype)
    if not ety.is_float:
        raise ShapeError("randu is defined for float element types; use randi")
    m = Mat(n_rows, n_cols, ety, ctx)
    m.ctx.backend.upload(rng.uniform_fill(seed, m.shape.n_elem, ety.dtype), m.handle)
    return m


def randi(n_rows: int, n_cols: int, high: int, seed: int, etype: ElemType | str = "u32",
          ctx: Context | None = None) -> Mat:
    """Uniform integers in [0, high) from the same counter-based stream."""
    ety = ElemType.of(etype)
    if ety.is_float:
        raise ShapeError("randi is defined for integer element types")
    m = Mat(n_rows, n_cols, ety, ctx)
    m.ctx.backend.upload(rng.uniform_int_fill(seed, m.shape.n_elem, ety.dtype, high), m.handle)
    return m


_DTYPE_TO_ETYPE = {
    np.dtype(np.float32): ElemType.f32,
    np.dtype(np.float64): ElemType.f64,
    np.dtype(np.uint32): ElemType.u32,
    np.dtype(np.int32): ElemType.i32,
}


def from_array(values: np.ndarray, etype: ElemType | str | None = None,
               ctx: Context | None = None) -> Mat:
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ShapeError("from_array needs a 2-D array")
    ety = ElemType.of(etype) if etype is not None else _DTYPE_TO_ETYPE.get(arr.dtype)
    if ety is None:
        raise ShapeError(f"no element type for dtype {arr.dtype}; pass etype explicitly")
    m = Mat(arr.shape[0], arr.shape[1], ety, ctx)
    return m.set_values(arr)


# -- expression functions ----------------------------------------------------

def _unary(value: _Ops, build) -> MatExpr:
    e = as_expr(value)
    return MatExpr(build(e.node), e.mats, e.ctx)


def exp(value: _Ops) -> MatExpr:
    return _unary(value, ast.exp)


def log(value: _Ops) -> MatExpr:
    return _unary(value, ast.log)


def sqrt(value: _Ops) -> MatExpr:
    return _unary(value, ast.sqrt)


def tanh(value: _Ops) -> MatExpr:
    return _unary(value, ast.tanh)


def pow_int(value: _Ops, exponent: int) -> MatExpr:
    return _unary(value, lambda n: ast.pow_int(n, exponent))


def conv_to(value: _Ops, etype: ElemType | str) -> MatExpr:
    """Insert an element-type conversion node; fuses, never materialises."""
    return _unary(value, lambda n: ast.conv(n, ElemType.of(etype)))


def accu(value: _Ops):
    """Sum all elements of a (MatMul-free after planning) expression."""
    e = as_expr(value)
    pl = reduce_plan(e.node)
    ctx = e.ctx
    env = {mat_id: mat.handle for mat_id, mat in e.mats.items()}
    for temp in pl.temps:
        env[temp.temp_id] = ctx.backend.alloc(temp.etype, temp.shape.n_elem)
    try:
        ctx.execute_plan(pl, env)
        ctx.sync()
        result = ctx.backend.download(env[pl.out_id])[0]
    finally:
        for temp in pl.temps:
            ctx.backend.free(env[temp.temp_id])
    return float(result) if pl.out_etype.is_float else int(result)


def sync(ctx: Context | None = None) -> None:
    """Drain the context's queue."""
    (ctx or default_context()).sync()


# -- plain-text matrix I/O -----------------------------------------------------

_FLOAT_FORMATS = {ElemType.f32: "%.9g", ElemType.f64: "%.17g"}


def save_matrix(m: Mat, path) -> None:
    """Text format: `n_rows n_cols elem_type`, then column-major values.

    Floats are written with round-trip precision; integers exactly.
    """
    m.ctx.sync()
    flat = m.ctx.backend.download(m.handle)
    with open(path, "w") as fh:
        fh.write(f"{m.shape.n_rows} {m.shape.n_cols} {m.etype.value}\n")
        if m.etype.is_float:
            fmt = _FLOAT_FORMATS[m.etype]
            values = [fmt % v for v in flat]
        else:
            values = [str(int(v)) for v in flat]
        n_rows = max(m.shape.n_rows, 1)
        for start in range(0, len(values), n_rows):
            fh.write(" ".join(values[start:start + n_rows]) + "\n")


def load_matrix(path, ctx: Context | None = None) -> Mat:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 3:
            raise FusematError(f"bad matrix header in {path}")
        n_rows, n_cols = int(header[0]), int(header[1])
        ety = ElemType.of(header[2])
        tokens = fh.read().split()
    if len(tokens) != n_rows * n_cols:
        raise FusematError(f"expected {n_rows * n_cols} values, found {len(tokens)}")
    caster = float if ety.is_float else int
    flat = np.array([caster(t) for t in tokens], dtype=ety.dtype)
    m = Mat(n_rows, n_cols, ety, ctx)
    m.ctx.backend.upload(flat, m.handle)
    return m
