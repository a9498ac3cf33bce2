"""Expression AST: node types, conformability rules, signatures, input collection.

Expressions are immutable trees built by the construction helpers below (the
matrix API layers operator overloading on top).  Nothing is computed at build
time; a tree only describes the element-wise work and the matrix-product
barriers of an expression.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import OutOfBoundsError, ShapeError


class ElemType(enum.Enum):
    """Element type of a matrix or expression node."""

    f32 = "f32"
    f64 = "f64"
    u32 = "u32"
    i32 = "i32"

    @property
    def width(self) -> int:
        return 8 if self is ElemType.f64 else 4

    @property
    def is_float(self) -> bool:
        return self in (ElemType.f32, ElemType.f64)

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(_NUMPY_DTYPES[self])

    @property
    def c_name(self) -> str:
        return _C_NAMES[self]

    @classmethod
    def of(cls, value: "ElemType | str") -> "ElemType":
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            raise ShapeError(f"unknown element type {value!r}") from None


_NUMPY_DTYPES = {
    ElemType.f32: np.float32,
    ElemType.f64: np.float64,
    ElemType.u32: np.uint32,
    ElemType.i32: np.int32,
}

_C_NAMES = {
    ElemType.f32: "float",
    ElemType.f64: "double",
    ElemType.u32: "unsigned int",
    ElemType.i32: "int",
}


@dataclass(frozen=True)
class MatShape:
    n_rows: int
    n_cols: int

    def __post_init__(self) -> None:
        if self.n_rows < 0 or self.n_cols < 0:
            raise ShapeError(f"negative dimension in shape {self.n_rows}x{self.n_cols}")

    @property
    def n_elem(self) -> int:
        return self.n_rows * self.n_cols

    def __str__(self) -> str:
        return f"{self.n_rows}x{self.n_cols}"


class UnaryKind(enum.Enum):
    scalar_add = "sadd"        # x + s
    scalar_pre_mul = "smul"    # s * x
    scalar_pre_div = "sdiv"    # s / x
    neg = "neg"
    exp = "exp"
    log = "log"
    sqrt = "sqrt"
    tanh = "tanh"
    pow_int = "powi"           # x*x*...*x, structural exponent
    conv = "conv"              # element type conversion
    gt_scalar = "gts"          # (x > s) as 0/1 in x's type


# Unary kinds that own a scalar slot.
SCALAR_KINDS = frozenset(
    {UnaryKind.scalar_add, UnaryKind.scalar_pre_mul, UnaryKind.scalar_pre_div, UnaryKind.gt_scalar}
)

FLOAT_ONLY_KINDS = frozenset(
    {UnaryKind.scalar_pre_div, UnaryKind.exp, UnaryKind.log, UnaryKind.sqrt, UnaryKind.tanh}
)

MAX_POW_EXPONENT = 16


class BinaryKind(enum.Enum):
    plus = "add"
    minus = "sub"
    schur = "mul"      # element-wise product
    elem_div = "div"   # element-wise division


@dataclass(frozen=True)
class ExprNode:
    """Base node; `shape` and `etype` are fixed at construction."""

    shape: MatShape = field(init=False)
    etype: ElemType = field(init=False)

    def _set(self, shape: MatShape, etype: ElemType) -> None:
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "etype", etype)

    def children(self) -> tuple["ExprNode", ...]:
        return ()


@dataclass(frozen=True)
class Leaf(ExprNode):
    """Dense reference to a whole matrix."""

    mat_id: int
    leaf_etype: ElemType
    leaf_shape: MatShape

    def __post_init__(self) -> None:
        self._set(self.leaf_shape, self.leaf_etype)

    @property
    def parent_shape(self) -> MatShape:
        return self.leaf_shape


@dataclass(frozen=True)
class Subview(ExprNode):
    """Rectangular view into a parent matrix."""

    mat_id: int
    leaf_etype: ElemType
    row_off: int
    col_off: int
    view_shape: MatShape
    parent_shape: MatShape

    def __post_init__(self) -> None:
        if self.row_off < 0 or self.col_off < 0:
            raise OutOfBoundsError(
                f"subview offset ({self.row_off},{self.col_off}) is negative"
            )
        if (
            self.row_off + self.view_shape.n_rows > self.parent_shape.n_rows
            or self.col_off + self.view_shape.n_cols > self.parent_shape.n_cols
        ):
            raise OutOfBoundsError(
                f"subview {self.view_shape} at ({self.row_off},{self.col_off}) "
                f"exceeds parent {self.parent_shape}"
            )
        self._set(self.view_shape, self.leaf_etype)


@dataclass(frozen=True)
class Diag(ExprNode):
    """k-th diagonal of a square parent, shaped len x 1.

    Element i maps to parent (i, i+k) for k >= 0 and (i-k, i) for k < 0.
    """

    mat_id: int
    leaf_etype: ElemType
    k: int
    parent_shape: MatShape

    def __post_init__(self) -> None:
        if self.parent_shape.n_rows != self.parent_shape.n_cols:
            raise ShapeError(f"diagonal of non-square parent {self.parent_shape}")
        length = self.parent_shape.n_rows - abs(self.k)
        if length < 0:
            raise OutOfBoundsError(
                f"diagonal offset {self.k} outside parent {self.parent_shape}"
            )
        self._set(MatShape(length, 1), self.leaf_etype)

    @property
    def row_off(self) -> int:
        return -self.k if self.k < 0 else 0

    @property
    def col_off(self) -> int:
        return self.k if self.k >= 0 else 0


LEAF_TYPES = (Leaf, Subview, Diag)


@dataclass(frozen=True)
class UnaryElem(ExprNode):
    kind: UnaryKind
    child: ExprNode
    scalar: float | int | None = None
    exponent: int | None = None
    target: ElemType | None = None

    def __post_init__(self) -> None:
        ety = self.child.etype
        if self.kind in FLOAT_ONLY_KINDS and not ety.is_float:
            raise ShapeError(f"{self.kind.name} requires a float operand, got {ety.value}")
        if self.kind in SCALAR_KINDS:
            if self.scalar is None:
                raise ShapeError(f"{self.kind.name} requires a scalar value")
            object.__setattr__(self, "scalar", _coerce_scalar(self.scalar, ety))
        elif self.scalar is not None:
            raise ShapeError(f"{self.kind.name} takes no scalar")
        if self.kind is UnaryKind.pow_int:
            if self.exponent is None or not (0 <= self.exponent <= MAX_POW_EXPONENT):
                raise ShapeError(
                    f"pow exponent must be an integer in 0..{MAX_POW_EXPONENT}, got {self.exponent}"
                )
        if self.kind is UnaryKind.conv:
            if self.target is None:
                raise ShapeError("conv requires a target element type")
            ety = self.target
        self._set(self.child.shape, ety)

    def children(self) -> tuple[ExprNode, ...]:
        return (self.child,)


@dataclass(frozen=True)
class BinaryElem(ExprNode):
    kind: BinaryKind
    left: ExprNode
    right: ExprNode

    def __post_init__(self) -> None:
        if self.left.shape != self.right.shape:
            raise ShapeError(
                f"{self.kind.name}: shapes {self.left.shape} and {self.right.shape} do not conform"
            )
        if self.left.etype is not self.right.etype:
            raise ShapeError(
                f"{self.kind.name}: element types {self.left.etype.value} and "
                f"{self.right.etype.value} differ (use conv_to for explicit conversion)"
            )
        if self.kind is BinaryKind.elem_div and not self.left.etype.is_float:
            raise ShapeError("elem_div requires float operands")
        self._set(self.left.shape, self.left.etype)

    def children(self) -> tuple[ExprNode, ...]:
        return (self.left, self.right)


@dataclass(frozen=True)
class Transpose(ExprNode):
    child: ExprNode

    def __post_init__(self) -> None:
        self._set(MatShape(self.child.shape.n_cols, self.child.shape.n_rows), self.child.etype)

    def children(self) -> tuple[ExprNode, ...]:
        return (self.child,)


@dataclass(frozen=True)
class MatMul(ExprNode):
    left: ExprNode
    right: ExprNode

    def __post_init__(self) -> None:
        if self.left.shape.n_cols != self.right.shape.n_rows:
            raise ShapeError(
                f"matmul: inner dimensions of {self.left.shape} and {self.right.shape} differ"
            )
        if self.left.etype is not self.right.etype:
            raise ShapeError("matmul: operand element types differ")
        if not self.left.etype.is_float:
            raise ShapeError("matmul supports float element types only")
        self._set(MatShape(self.left.shape.n_rows, self.right.shape.n_cols), self.left.etype)

    def children(self) -> tuple[ExprNode, ...]:
        return (self.left, self.right)


def _coerce_scalar(value: float | int, etype: ElemType) -> float | int:
    """Coerce a Python number to the node's element type, rejecting lossy int coercion."""
    if etype.is_float:
        return float(etype.dtype.type(value))
    if float(value) != int(value):
        raise ShapeError(f"scalar {value!r} is not integral for element type {etype.value}")
    return int(etype.dtype.type(int(value)))


# --- construction helpers -------------------------------------------------

def leaf(mat_id: int, etype: ElemType, shape: MatShape) -> Leaf:
    return Leaf(mat_id, etype, shape)


def subview(mat_id: int, etype: ElemType, row_off: int, col_off: int,
            view_shape: MatShape, parent_shape: MatShape) -> Subview:
    return Subview(mat_id, etype, row_off, col_off, view_shape, parent_shape)


def diag(mat_id: int, etype: ElemType, k: int, parent_shape: MatShape) -> Diag:
    return Diag(mat_id, etype, k, parent_shape)


def plus(a: ExprNode, b: ExprNode) -> BinaryElem:
    return BinaryElem(BinaryKind.plus, a, b)


def minus(a: ExprNode, b: ExprNode) -> BinaryElem:
    return BinaryElem(BinaryKind.minus, a, b)


def schur(a: ExprNode, b: ExprNode) -> BinaryElem:
    return BinaryElem(BinaryKind.schur, a, b)


def elem_div(a: ExprNode, b: ExprNode) -> BinaryElem:
    return BinaryElem(BinaryKind.elem_div, a, b)


def scalar_add(x: ExprNode, s: float | int) -> UnaryElem:
    return UnaryElem(UnaryKind.scalar_add, x, scalar=s)


def scalar_pre_mul(s: float | int, x: ExprNode) -> UnaryElem:
    return UnaryElem(UnaryKind.scalar_pre_mul, x, scalar=s)


def scalar_pre_div(s: float | int, x: ExprNode) -> UnaryElem:
    return UnaryElem(UnaryKind.scalar_pre_div, x, scalar=s)


def neg(x: ExprNode) -> UnaryElem:
    return UnaryElem(UnaryKind.neg, x)


def exp(x: ExprNode) -> UnaryElem:
    return UnaryElem(UnaryKind.exp, x)


def log(x: ExprNode) -> UnaryElem:
    return UnaryElem(UnaryKind.log, x)


def sqrt(x: ExprNode) -> UnaryElem:
    return UnaryElem(UnaryKind.sqrt, x)


def tanh(x: ExprNode) -> UnaryElem:
    return UnaryElem(UnaryKind.tanh, x)


def pow_int(x: ExprNode, exponent: int) -> UnaryElem:
    return UnaryElem(UnaryKind.pow_int, x, exponent=exponent)


def conv(x: ExprNode, target: ElemType | str) -> UnaryElem:
    return UnaryElem(UnaryKind.conv, x, target=ElemType.of(target))


def gt_scalar(x: ExprNode, s: float | int) -> UnaryElem:
    return UnaryElem(UnaryKind.gt_scalar, x, scalar=s)


def transpose(x: ExprNode) -> Transpose:
    return Transpose(x)


def matmul(a: ExprNode, b: ExprNode) -> MatMul:
    return MatMul(a, b)


# --- structural queries ---------------------------------------------------

def shape_of(node: ExprNode) -> MatShape:
    return node.shape


def contains_matmul(node: ExprNode) -> bool:
    if isinstance(node, MatMul):
        return True
    return any(contains_matmul(c) for c in node.children())


def walk(node: ExprNode):
    """Pre-order traversal, children left to right."""
    yield node
    for c in node.children():
        yield from walk(c)


ExprSignature = str


def signature_of(node: ExprNode) -> ExprSignature:
    """Canonical structural key: node kinds, element types, view kinds, leaf
    ordinals and scalar-slot positions — never scalar values, view offsets,
    concrete dimensions or matrix identities.

    Trees of identical structure over different matrices (or different scalar
    values) share a signature and hence a compiled kernel.
    """
    ordinals: dict[int, int] = {}
    slot_counter = [0]

    def render(n: ExprNode) -> str:
        ty = n.etype.value
        if isinstance(n, Leaf):
            i = ordinals.setdefault(n.mat_id, len(ordinals))
            return f"m{i}:{ty}"
        if isinstance(n, Subview):
            i = ordinals.setdefault(n.mat_id, len(ordinals))
            return f"sv(m{i}):{ty}"
        if isinstance(n, Diag):
            i = ordinals.setdefault(n.mat_id, len(ordinals))
            return f"dg(m{i}):{ty}"
        if isinstance(n, UnaryElem):
            extra = ""
            if n.kind in SCALAR_KINDS:
                extra = f"{{s{slot_counter[0]}}}"
                slot_counter[0] += 1
            elif n.kind is UnaryKind.pow_int:
                extra = f"{{{n.exponent}}}"
            elif n.kind is UnaryKind.conv:
                extra = f"{{{n.target.value}}}"
            return f"{n.kind.value}{extra}:{ty}({render(n.child)})"
        if isinstance(n, BinaryElem):
            return f"{n.kind.value}:{ty}({render(n.left)},{render(n.right)})"
        if isinstance(n, Transpose):
            return f"t:{ty}({render(n.child)})"
        if isinstance(n, MatMul):
            return f"mm:{ty}({render(n.left)},{render(n.right)})"
        raise TypeError(f"unknown node {type(n).__name__}")

    return render(node)


@dataclass(frozen=True)
class ViewOccurrence:
    """One traversal-position occurrence of a view on some input matrix."""

    kind: str            # "sv" or "dg"
    row_off: int
    col_off: int
    n_rows: int
    n_cols: int

    @property
    def n_elem(self) -> int:
        return self.n_rows * self.n_cols


@dataclass
class InputSpec:
    """Per distinct input matrix: identity, storage metadata, access occurrences."""

    mat_id: int
    etype: ElemType
    parent_shape: MatShape
    views: list[ViewOccurrence] = field(default_factory=list)
    dense_count: int = 0


@dataclass(frozen=True)
class ScalarSlot:
    index: int
    value: float | int
    etype: ElemType


def collect_inputs(node: ExprNode) -> tuple[list[InputSpec], list[ScalarSlot]]:
    """Distinct input matrices in first-visit order plus dense scalar slots.

    Each matrix appears once; every *view* occurrence of it (by traversal
    position, left to right) is recorded so the kernel argument schema can
    carry one offset pair per occurrence.
    """
    inputs: list[InputSpec] = []
    by_id: dict[int, InputSpec] = {}
    slots: list[ScalarSlot] = []

    def visit(n: ExprNode) -> None:
        if isinstance(n, LEAF_TYPES):
            spec = by_id.get(n.mat_id)
            if spec is None:
                spec = InputSpec(n.mat_id, n.leaf_etype, n.parent_shape)
                by_id[n.mat_id] = spec
                inputs.append(spec)
            if isinstance(n, Subview):
                spec.views.append(
                    ViewOccurrence("sv", n.row_off, n.col_off, n.shape.n_rows, n.shape.n_cols)
                )
            elif isinstance(n, Diag):
                spec.views.append(
                    ViewOccurrence("dg", n.row_off, n.col_off, n.shape.n_rows, n.shape.n_cols)
                )
            else:
                spec.dense_count += 1
            return
        if isinstance(n, UnaryElem) and n.kind in SCALAR_KINDS:
            slots.append(ScalarSlot(len(slots), n.scalar, n.child.etype))
        for c in n.children():
            visit(c)

    visit(node)
    return inputs, slots


class AliasKind(enum.Enum):
    NONE = "none"
    SAFE = "safe"
    UNSAFE = "unsafe"


def aliases(out_mat_id: int, node: ExprNode) -> AliasKind:
    """Does the output matrix appear in the expression, and is in-place safe?

    SAFE means every occurrence of the output is read through the identity
    index map: a dense leaf with no Transpose/Subview/Diag ancestor and no
    MatMul anywhere on its path.
    """
    found = [False]
    unsafe = [False]

    def visit(n: ExprNode, tainted: bool) -> None:
        if isinstance(n, LEAF_TYPES):
            if n.mat_id == out_mat_id:
                found[0] = True
                if tainted or not isinstance(n, Leaf):
                    unsafe[0] = True
            return
        child_taint = tainted or isinstance(n, (Transpose, MatMul))
        for c in n.children():
            visit(c, child_taint)

    visit(node, False)
    if not found[0]:
        return AliasKind.NONE
    return AliasKind.UNSAFE if unsafe[0] else AliasKind.SAFE


@dataclass
class InputBinding:
    """Dynamic launch-time binding for one input ordinal."""

    mat_id: int
    parent_shape: MatShape
    view_offsets: list[tuple[int, int]]  # (row_off, col_off) per view occurrence


def rebind_tree(node: ExprNode, bindings: list[InputBinding],
                scalars: list[float | int], out_shape: MatShape) -> ExprNode:
    """Rebuild a structural tree with the dynamics of a concrete launch.

    A cached kernel's expression fixes only structure; buffers, parent shapes,
    view offsets and scalar values arrive with each launch.  Input ordinals are
    assigned first-visit (mirroring collect_inputs) and each input's view
    occurrences are consumed left to right, so `bindings[i].view_offsets[j]`
    lands on the j-th view occurrence of input i.

    `out_shape` fixes the element-wise shape class: views take their shape from
    it rather than from the stale compile-time instance.
    """
    ordinals: dict[int, int] = {}
    view_cursor: dict[int, int] = {}
    slot_iter = iter(scalars)

    def ordinal(old_id: int) -> int:
        return ordinals.setdefault(old_id, len(ordinals))

    def rebuild(n: ExprNode, shape: MatShape) -> ExprNode:
        if isinstance(n, Leaf):
            b = bindings[ordinal(n.mat_id)]
            return Leaf(b.mat_id, n.leaf_etype, b.parent_shape)
        if isinstance(n, (Subview, Diag)):
            i = ordinal(n.mat_id)
            b = bindings[i]
            j = view_cursor.get(i, 0)
            view_cursor[i] = j + 1
            row_off, col_off = b.view_offsets[j]
            if isinstance(n, Subview):
                return Subview(b.mat_id, n.leaf_etype, row_off, col_off, shape, b.parent_shape)
            k = col_off if col_off > 0 else -row_off
            return Diag(b.mat_id, n.leaf_etype, k, b.parent_shape)
        if isinstance(n, UnaryElem):
            if n.kind in SCALAR_KINDS:
                value = next(slot_iter)  # slots are pre-order, consume before child
                return UnaryElem(n.kind, rebuild(n.child, shape), scalar=value)
            return UnaryElem(n.kind, rebuild(n.child, shape), exponent=n.exponent, target=n.target)
        if isinstance(n, BinaryElem):
            return BinaryElem(n.kind, rebuild(n.left, shape), rebuild(n.right, shape))
        if isinstance(n, Transpose):
            flipped = MatShape(shape.n_cols, shape.n_rows)
            return Transpose(rebuild(n.child, flipped))
        raise TypeError(f"cannot rebind {type(n).__name__} (fusion barrier in kernel tree)")

    return rebuild(node, out_shape)
