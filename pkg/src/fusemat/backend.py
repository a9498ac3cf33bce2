"""Device contract and the host reference backend.

The reference backend executes fused steps with a per-element recursive
interpreter whose semantics mirror the generated access fragments exactly
(same index maps, same per-operation rounding at the node's element type).
Every leaf access is bounds-checked against its parent buffer, so the
interpreter doubles as the bounds oracle.  It runs synchronously but presents
the asynchronous contract: synchronize() is a no-op and results are as if the
queue were drained in submission order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codegen import COPY, REDUCE_ACCU, ArgSpec, KernelSource
from .errors import BackendError, OutOfBoundsError, SchemaError
from .expr import (
    BinaryElem,
    BinaryKind,
    Diag,
    ElemType,
    ExprNode,
    InputBinding,
    Leaf,
    MatShape,
    Subview,
    Transpose,
    UnaryElem,
    UnaryKind,
    rebind_tree,
)
from .plan import ExecutionPlan, MatMulStep


@dataclass(frozen=True)
class BufferHandle:
    id: int
    etype: ElemType
    n_elem: int
    backend_id: int


@dataclass
class Capabilities:
    name: str
    compiles_source: bool
    max_work_size: int = 2**62


class Backend:
    """Contract every device implementation satisfies (in-order queue)."""

    _next_backend_id = 0

    def __init__(self) -> None:
        self.backend_id = Backend._next_backend_id
        Backend._next_backend_id += 1

    @property
    def capabilities(self) -> Capabilities:
        raise NotImplementedError

    def alloc(self, etype: ElemType, n_elem: int) -> BufferHandle:
        raise NotImplementedError

    def free(self, handle: BufferHandle) -> None:
        raise NotImplementedError

    def upload(self, host: np.ndarray, handle: BufferHandle) -> None:
        raise NotImplementedError

    def download(self, handle: BufferHandle) -> np.ndarray:
        raise NotImplementedError

    def compile(self, source: KernelSource):
        raise NotImplementedError

    def launch(self, kernel, args: list, geometry: tuple[int, int]) -> None:
        raise NotImplementedError

    def matmul(self, out: BufferHandle, left: BufferHandle, right: BufferHandle,
               m: int, k: int, n: int, etype: ElemType) -> None:
        raise NotImplementedError

    def synchronize(self) -> None:
        raise NotImplementedError


# --- reference element interpreter -----------------------------------------

def _leaf_read(node: Leaf | Subview | Diag, row: int, col: int, env: dict[int, np.ndarray]):
    """Read one element through a leaf's index map, bounds-checked on the parent."""
    parent = node.parent_shape
    if isinstance(node, Leaf):
        pr, pc = row, col
    elif isinstance(node, Subview):
        pr, pc = row + node.row_off, col + node.col_off
    else:  # Diag: element i of an (len x 1) node
        if col != 0:
            raise OutOfBoundsError(f"diagonal read at column {col}")
        pr, pc = row + node.row_off, row + node.col_off
    if not (0 <= pr < parent.n_rows and 0 <= pc < parent.n_cols):
        raise OutOfBoundsError(
            f"access ({pr},{pc}) outside parent {parent} of matrix {node.mat_id}"
        )
    try:
        buf = env[node.mat_id]
    except KeyError:
        raise BackendError(f"matrix {node.mat_id} missing from environment") from None
    return buf[pr + pc * parent.n_rows]


def _eval(node: ExprNode, row: int, col: int, env: dict[int, np.ndarray]):
    if isinstance(node, (Leaf, Subview, Diag)):
        return _leaf_read(node, row, col, env)
    if isinstance(node, BinaryElem):
        left = _eval(node.left, row, col, env)
        right = _eval(node.right, row, col, env)
        kind = node.kind
        if kind is BinaryKind.plus:
            return left + right
        if kind is BinaryKind.minus:
            return left - right
        if kind is BinaryKind.schur:
            return left * right
        return left / right
    if isinstance(node, Transpose):
        return _eval(node.child, col, row, env)
    if isinstance(node, UnaryElem):
        x = _eval(node.child, row, col, env)
        kind = node.kind
        if kind is UnaryKind.scalar_add:
            return x + node.child.etype.dtype.type(node.scalar)
        if kind is UnaryKind.scalar_pre_mul:
            return node.child.etype.dtype.type(node.scalar) * x
        if kind is UnaryKind.scalar_pre_div:
            return node.child.etype.dtype.type(node.scalar) / x
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
                return node.etype.dtype.type(1)
            acc = x
            for _ in range(node.exponent - 1):
                acc = acc * x
            return acc
        if kind is UnaryKind.conv:
            target = node.target
            if target.is_float:
                return target.dtype.type(x)
            # truncate toward zero, then wrap modularly (C cast through long long)
            return np.int64(int(x)).astype(target.dtype)
        if kind is UnaryKind.gt_scalar:
            s = node.child.etype.dtype.type(node.scalar)
            return node.etype.dtype.type(1 if x > s else 0)
        raise BackendError(f"no semantics for unary kind {kind}")
    raise BackendError(f"cannot interpret {type(node).__name__} (unsplit fusion barrier)")


def ref_eval_elem(node: ExprNode, row: int, col: int, env: dict[int, np.ndarray]):
    """Evaluate one element of a MatMul-free expression.

    `env` maps matrix ids to flat column-major buffers.  Raises
    OutOfBoundsError for any access outside the node's shape or outside a
    leaf's parent buffer — this is the bounds oracle.
    """
    shape = node.shape
    if not (0 <= row < shape.n_rows and 0 <= col < shape.n_cols):
        raise OutOfBoundsError(f"element ({row},{col}) outside expression shape {shape}")
    with np.errstate(all="ignore"):
        return _eval(node, row, col, env)


@dataclass
class RefKernel:
    """Compiled form on the reference backend: the structural expression itself."""

    source: KernelSource


class HostBufferBackend(Backend):
    """Buffer bookkeeping shared by host-memory backends (numpy storage)."""

    def __init__(self) -> None:
        super().__init__()
        self._buffers: dict[int, np.ndarray] = {}
        self._freed: set[int] = set()
        self._next_id = 0

    def alloc(self, etype: ElemType, n_elem: int) -> BufferHandle:
        if n_elem < 0:
            raise BackendError("negative allocation size")
        handle = BufferHandle(self._next_id, etype, n_elem, self.backend_id)
        self._next_id += 1
        self._buffers[handle.id] = np.zeros(n_elem, dtype=etype.dtype)
        return handle

    def _array(self, handle: BufferHandle) -> np.ndarray:
        if handle.backend_id != self.backend_id:
            raise BackendError("buffer belongs to a different backend")
        if handle.id in self._freed:
            raise BackendError(f"use after free of buffer {handle.id}")
        try:
            return self._buffers[handle.id]
        except KeyError:
            raise BackendError(f"unknown buffer {handle.id}") from None

    def free(self, handle: BufferHandle) -> None:
        if handle.id in self._freed:
            raise BackendError(f"double free of buffer {handle.id}")
        if handle.id not in self._buffers:
            raise BackendError(f"unknown buffer {handle.id}")
        del self._buffers[handle.id]
        self._freed.add(handle.id)

    def upload(self, host: np.ndarray, handle: BufferHandle) -> None:
        arr = self._array(handle)
        host = np.asarray(host).ravel(order="F")
        if host.size != handle.n_elem:
            raise BackendError(f"upload size {host.size} != buffer size {handle.n_elem}")
        arr[:] = host.astype(handle.etype.dtype, copy=False)

    def download(self, handle: BufferHandle) -> np.ndarray:
        return self._array(handle).copy()

    def synchronize(self) -> None:
        # Host backends run launches synchronously; the queue is always drained.
        pass


class RefBackend(HostBufferBackend):
    """Host backend: buffers are numpy arrays, kernels are interpreted."""

    @property
    def capabilities(self) -> Capabilities:
        return Capabilities(name="ref", compiles_source=False)

    # -- kernels ---------------------------------------------------------

    def compile(self, source: KernelSource) -> RefKernel:
        return RefKernel(source)

    def launch(self, kernel: RefKernel, args: list, geometry: tuple[int, int]) -> None:
        source = kernel.source
        out_handle, domain, bindings, scalars = self._parse_args(source.schema, args)
        if tuple(geometry) != (domain.n_rows, domain.n_cols):
            raise SchemaError(f"geometry {geometry} != domain {domain}")
        tree = rebind_tree(source.expr, bindings, scalars, domain)
        env = {b.mat_id: self._array_by_id(b.mat_id) for b in bindings}
        self._run_fused(tree, source.skeleton_kind, self._array(out_handle), domain, env)

    def _array_by_id(self, buffer_id: int) -> np.ndarray:
        if buffer_id in self._freed:
            raise BackendError(f"use after free of buffer {buffer_id}")
        return self._buffers[buffer_id]

    def _parse_args(self, schema: tuple[ArgSpec, ...], args: list):
        if len(args) != len(schema):
            raise SchemaError(f"expected {len(schema)} arguments, got {len(args)}")
        pos = 0

        def take(role: str):
            nonlocal pos
            spec = schema[pos]
            if spec.role != role:
                raise SchemaError(f"argument {pos} should be {spec.role}, parser wanted {role}")
            value = args[pos]
            if role in ("out", "in"):
                if not isinstance(value, BufferHandle):
                    raise SchemaError(f"argument {pos} must be a buffer handle")
                if value.etype.value != spec.etype:
                    raise SchemaError(
                        f"argument {pos} buffer is {value.etype.value}, schema wants {spec.etype}"
                    )
            elif not isinstance(value, (int, float, np.integer, np.floating)):
                raise SchemaError(f"argument {pos} must be numeric")
            pos += 1
            return value

        out_handle = take("out")
        domain = MatShape(int(take("dim")), int(take("dim")))
        bindings: list[InputBinding] = []
        while pos < len(schema) and schema[pos].role == "in":
            handle = take("in")
            shape = MatShape(int(take("dim")), int(take("dim")))
            offsets = []
            while pos < len(schema) and schema[pos].role == "off":
                row_off = int(take("off"))
                col_off = int(take("off"))
                offsets.append((row_off, col_off))
            bindings.append(InputBinding(handle.id, shape, offsets))
        scalars = []
        while pos < len(schema):
            scalars.append(take("scalar"))
        return out_handle, domain, bindings, scalars

    def _run_fused(self, tree: ExprNode, skeleton: str, out: np.ndarray,
                   domain: MatShape, env: dict[int, np.ndarray]) -> None:
        n_rows, n_cols = domain.n_rows, domain.n_cols
        with np.errstate(all="ignore"):
            if skeleton == COPY:
                if out.size < domain.n_elem:
                    raise BackendError("output buffer smaller than domain")
                for col in range(n_cols):
                    base = col * n_rows
                    for row in range(n_rows):
                        out[base + row] = _eval(tree, row, col, env)
            elif skeleton == REDUCE_ACCU:
                if tree.etype.is_float:
                    acc = 0.0
                    for col in range(n_cols):
                        for row in range(n_rows):
                            acc += float(_eval(tree, row, col, env))
                    out[0] = acc
                else:
                    dtype = tree.etype.dtype.type
                    acc = dtype(0)
                    for col in range(n_cols):
                        for row in range(n_rows):
                            acc = dtype(acc + _eval(tree, row, col, env))
                    out[0] = acc
            else:
                raise BackendError(f"unknown skeleton {skeleton}")

    # -- linear algebra ---------------------------------------------------

    def matmul(self, out: BufferHandle, left: BufferHandle, right: BufferHandle,
               m: int, k: int, n: int, etype: ElemType) -> None:
        a = self._array(left)[: m * k].reshape((m, k), order="F")
        b = self._array(right)[: k * n].reshape((k, n), order="F")
        if etype is ElemType.f32:
            c = (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)
        else:
            c = a @ b
        self._array(out)[: m * n] = c.ravel(order="F")

    # -- direct plan execution (test/oracle entry point) ------------------

    def ref_execute(self, plan: ExecutionPlan, handles: dict[int, BufferHandle]) -> None:
        """Execute a plan against pre-allocated buffers, without kernel caching."""
        for step in plan.steps:
            if isinstance(step, MatMulStep):
                self.matmul(
                    handles[step.out_id], handles[step.left_id], handles[step.right_id],
                    step.left_shape.n_rows, step.left_shape.n_cols,
                    step.right_shape.n_cols, step.etype,
                )
            else:
                env = {spec.mat_id: self._array(handles[spec.mat_id]) for spec in step.inputs}
                self._run_fused(step.expr, step.skeleton,
                                self._array(handles[step.out_id]), step.domain_shape, env)
