"""Lowering of expression trees into fused kernel source.

An expression is lowered by recursive descent into a single element-access
text fragment, wrapped into macro definitions, and spliced into a skeleton
kernel.  One kernel serves every expression of the same structural signature:
scalar values, view offsets and matrix dimensions are kernel arguments, never
literals.
"""

from __future__ import annotations

import csv
import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import GenerationError, PlanError
from .expr import (
    SCALAR_KINDS,
    BinaryElem,
    BinaryKind,
    Diag,
    ElemType,
    ExprNode,
    Leaf,
    Subview,
    Transpose,
    UnaryElem,
    UnaryKind,
    collect_inputs,
    signature_of,
)

C_DIALECT = "c"
DIALECT_EXTENSIONS = {C_DIALECT: "c"}

COPY = "copy"
REDUCE_ACCU = "reduce_accu"

# Placeholder vocabulary the macro generator can produce.
PLACEHOLDERS = frozenset(
    {"KERNEL_FUNC", "OUT_TYPE", "ACC_TYPE", "OBJ_PARAMS", "SCALAR_PARAMS", "BOUNDS_CHECK", "EXPR_AT"}
)


def accumulator_type(etype: ElemType) -> ElemType:
    """Reduction accumulator: f64 for floats, modular native type for ints."""
    return ElemType.f64 if etype.is_float else etype


_ACC_C_NAMES = {
    ElemType.f64: "double",
    ElemType.u32: "unsigned int",
    ElemType.i32: "int",
}


@dataclass(frozen=True)
class KernelSkeleton:
    kind: str
    dialect: str
    body: str

    def __post_init__(self) -> None:
        unknown = self.placeholders() - PLACEHOLDERS
        if unknown:
            raise GenerationError(f"skeleton uses unknown placeholders: {sorted(unknown)}")

    def placeholders(self) -> set[str]:
        return set(re.findall(r"\b[A-Z][A-Z0-9_]{2,}\b", self.body))


_COPY_BODY = """\
void KERNEL_FUNC(OUT_TYPE *out,
                 const long long out_n_rows,
                 const long long out_n_cols
                 OBJ_PARAMS
                 SCALAR_PARAMS)
  {
  for (long long col = 0; col < out_n_cols; ++col)
    {
    for (long long row = 0; row < out_n_rows; ++row)
      {
      if (BOUNDS_CHECK(row, col))
        {
        out[row + col * out_n_rows] = EXPR_AT(row, col);
        }
      }
    }
  }
"""

_REDUCE_BODY = """\
void KERNEL_FUNC(ACC_TYPE *out_sum,
                 const long long out_n_rows,
                 const long long out_n_cols
                 OBJ_PARAMS
                 SCALAR_PARAMS)
  {
  ACC_TYPE acc = (ACC_TYPE)0;
  for (long long col = 0; col < out_n_cols; ++col)
    {
    for (long long row = 0; row < out_n_rows; ++row)
      {
      if (BOUNDS_CHECK(row, col))
        {
        acc += (ACC_TYPE)(EXPR_AT(row, col));
        }
      }
    }
  out_sum[0] = acc;
  }
"""

SKELETONS = {
    (COPY, C_DIALECT): KernelSkeleton(COPY, C_DIALECT, _COPY_BODY),
    (REDUCE_ACCU, C_DIALECT): KernelSkeleton(REDUCE_ACCU, C_DIALECT, _REDUCE_BODY),
}


@dataclass
class NamingState:
    """Per-call naming assignment for one lowering pass.

    Input ordinals are first-visit, view occurrences and scalar slots count up
    in pre-order traversal — the same order collect_inputs uses, so generated
    names line up with the argument schema positionally.
    """

    input_ordinals: dict[int, int] = field(default_factory=dict)
    view_counts: dict[int, int] = field(default_factory=dict)
    n_scalars: int = 0

    def input_index(self, mat_id: int) -> int:
        return self.input_ordinals.setdefault(mat_id, len(self.input_ordinals))

    def next_view(self, input_index: int) -> int:
        j = self.view_counts.get(input_index, 0)
        self.view_counts[input_index] = j + 1
        return j

    def next_scalar(self) -> int:
        k = self.n_scalars
        self.n_scalars += 1
        return k


_FLOAT_FUNCS = {
    UnaryKind.exp: ("expf", "exp"),
    UnaryKind.log: ("logf", "log"),
    UnaryKind.sqrt: ("sqrtf", "sqrt"),
    UnaryKind.tanh: ("tanhf", "tanh"),
}

_BINARY_OPS = {
    BinaryKind.plus: "+",
    BinaryKind.minus: "-",
    BinaryKind.schur: "*",
    BinaryKind.elem_div: "/",
}


def _cast_text(target: ElemType, source: ElemType, inner: str) -> str:
    if target is ElemType.u32 and source.is_float:
        # C float->unsigned is undefined for negatives; truncate via long long,
        # then wrap, matching the reference semantics.
        return f"((unsigned int)(long long)({inner}))"
    return f"(({target.c_name})({inner}))"


def access_fragment(node: ExprNode, row_expr: str, col_expr: str, state: NamingState) -> str:
    """Element-access text for `node` at (row_expr, col_expr), by recursive descent."""
    if isinstance(node, Leaf):
        i = state.input_index(node.mat_id)
        return f"in{i}[({row_expr}) + ({col_expr}) * in{i}_n_rows]"
    if isinstance(node, Subview):
        i = state.input_index(node.mat_id)
        j = state.next_view(i)
        r = f"(({row_expr}) + in{i}_v{j}_row_off)"
        c = f"(({col_expr}) + in{i}_v{j}_col_off)"
        return f"in{i}[{r} + {c} * in{i}_n_rows]"
    if isinstance(node, Diag):
        i = state.input_index(node.mat_id)
        j = state.next_view(i)
        r = f"(({row_expr}) + in{i}_v{j}_row_off)"
        c = f"(({row_expr}) + in{i}_v{j}_col_off)"
        return f"in{i}[{r} + {c} * in{i}_n_rows]"
    if isinstance(node, Transpose):
        return access_fragment(node.child, col_expr, row_expr, state)
    if isinstance(node, UnaryElem):
        kind = node.kind
        if kind in SCALAR_KINDS:
            s = f"s{state.next_scalar()}"
            child = access_fragment(node.child, row_expr, col_expr, state)
            if kind is UnaryKind.scalar_add:
                return f"({child} + {s})"
            if kind is UnaryKind.scalar_pre_mul:
                return f"({s} * {child})"
            if kind is UnaryKind.scalar_pre_div:
                return f"({s} / {child})"
            # gt_scalar: 0/1 in the operand's element type
            return f"(({node.etype.c_name})(({child}) > ({s})))"
        child = access_fragment(node.child, row_expr, col_expr, state)
        if kind is UnaryKind.neg:
            return f"(-{child})"
        if kind in _FLOAT_FUNCS:
            f32_name, f64_name = _FLOAT_FUNCS[kind]
            fname = f32_name if node.etype is ElemType.f32 else f64_name
            return f"{fname}({child})"
        if kind is UnaryKind.pow_int:
            if node.exponent == 0:
                return f"(({node.etype.c_name})1)"
            if node.exponent == 1:
                return child
            return "(" + " * ".join([child] * node.exponent) + ")"
        if kind is UnaryKind.conv:
            return _cast_text(node.target, node.child.etype, child)
        raise GenerationError(f"no lowering for unary kind {kind}")
    if isinstance(node, BinaryElem):
        left = access_fragment(node.left, row_expr, col_expr, state)
        right = access_fragment(node.right, row_expr, col_expr, state)
        return f"({left} {_BINARY_OPS[node.kind]} {right})"
    raise PlanError(
        f"{type(node).__name__} reached the access generator; "
        "fusion barriers must be split during planning"
    )


@dataclass(frozen=True)
class ObjectParams:
    """Kernel parameter group for one distinct input matrix."""

    buffer: str
    n_rows: str
    n_cols: str
    offsets: tuple[str, ...]  # row/col offset names, one pair per view occurrence
    etype: ElemType


@dataclass(frozen=True)
class ScalarParam:
    name: str
    etype: ElemType


@dataclass(frozen=True)
class MacroSet:
    kernel_name: str
    out_ctype: str
    object_params: tuple[ObjectParams, ...]
    scalar_params: tuple[ScalarParam, ...]
    bounds_check_text: str
    access_text: str


@dataclass(frozen=True)
class ArgSpec:
    """One entry of a kernel's argument schema."""

    role: str    # out | dim | in | off | scalar
    etype: str   # f32 | f64 | u32 | i32 | i64

    def __str__(self) -> str:
        return f"{self.role}:{self.etype}"


def qualified_signature(node: ExprNode, skeleton_kind: str) -> str:
    """Cache/naming key: the structural signature qualified by skeleton kind."""
    return f"{skeleton_kind}|{signature_of(node)}"


def kernel_name_of(signature: str) -> str:
    """Deterministic dialect-valid identifier for a signature string."""
    digest = hashlib.blake2b(signature.encode("utf-8"), digest_size=8).hexdigest()
    hint = re.sub(r"[^0-9A-Za-z]+", "_", signature.split("(", 1)[0]).strip("_")[:24]
    name = f"k_{hint}_{digest}" if hint else f"k_{digest}"
    return name


def macros_for(node: ExprNode, signature: str) -> MacroSet:
    inputs, slots = collect_inputs(node)
    state = NamingState()
    access = access_fragment(node, "row", "col", state)
    objects = []
    for i, spec in enumerate(inputs):
        offsets = []
        for j in range(len(spec.views)):
            offsets.extend([f"in{i}_v{j}_row_off", f"in{i}_v{j}_col_off"])
        objects.append(
            ObjectParams(f"in{i}", f"in{i}_n_rows", f"in{i}_n_cols", tuple(offsets), spec.etype)
        )
    scalars = tuple(ScalarParam(f"s{k.index}", k.etype) for k in slots)
    return MacroSet(
        kernel_name=kernel_name_of(signature),
        out_ctype=node.etype.c_name,
        object_params=tuple(objects),
        scalar_params=scalars,
        bounds_check_text="((row) < out_n_rows && (col) < out_n_cols)",
        access_text=access,
    )


def arg_schema(node: ExprNode, skeleton_kind: str) -> tuple[ArgSpec, ...]:
    """Ordered schema: output buffer, output dims, object groups, scalar slots."""
    inputs, slots = collect_inputs(node)
    out_ety = accumulator_type(node.etype) if skeleton_kind == REDUCE_ACCU else node.etype
    schema: list[ArgSpec] = [ArgSpec("out", out_ety.value), ArgSpec("dim", "i64"), ArgSpec("dim", "i64")]
    for spec in inputs:
        schema.append(ArgSpec("in", spec.etype.value))
        schema.append(ArgSpec("dim", "i64"))
        schema.append(ArgSpec("dim", "i64"))
        for _ in spec.views:
            schema.append(ArgSpec("off", "i64"))
            schema.append(ArgSpec("off", "i64"))
    for slot in slots:
        schema.append(ArgSpec("scalar", slot.etype.value))
    return tuple(schema)


@dataclass(frozen=True)
class KernelSource:
    """Compilable kernel source plus the metadata a backend needs to run it."""

    dialect: str
    text: str
    entry_point: str
    schema: tuple[ArgSpec, ...]
    signature: str
    skeleton_kind: str
    expr: ExprNode = field(compare=False)  # structural form, for interpreting backends

    @property
    def extension(self) -> str:
        return DIALECT_EXTENSIONS[self.dialect]


def instantiate(skeleton: KernelSkeleton, macros: MacroSet,
                acc_ctype: str | None = None) -> str:
    """Substitute a macro set into a skeleton; deterministic byte-for-byte."""
    defines: dict[str, str] = {"KERNEL_FUNC": macros.kernel_name}
    if skeleton.kind == REDUCE_ACCU:
        if acc_ctype is None:
            raise GenerationError("reduce skeleton needs an accumulator type")
        defines["ACC_TYPE"] = acc_ctype
    else:
        defines["OUT_TYPE"] = macros.out_ctype

    obj_parts = []
    for obj in macros.object_params:
        obj_parts.append(f"const {obj.etype.c_name} *{obj.buffer}")
        obj_parts.append(f"const long long {obj.n_rows}")
        obj_parts.append(f"const long long {obj.n_cols}")
        obj_parts.extend(f"const long long {name}" for name in obj.offsets)
    defines["OBJ_PARAMS"] = (", " + ", ".join(obj_parts)) if obj_parts else ""
    scalar_parts = [f"const {s.etype.c_name} {s.name}" for s in macros.scalar_params]
    defines["SCALAR_PARAMS"] = (", " + ", ".join(scalar_parts)) if scalar_parts else ""
    defines["BOUNDS_CHECK(row, col)"] = macros.bounds_check_text
    defines["EXPR_AT(row, col)"] = macros.access_text

    provided = {name.split("(")[0] for name in defines}
    missing = skeleton.placeholders() - provided
    if missing:
        raise GenerationError(f"skeleton placeholders without definitions: {sorted(missing)}")

    lines = [f"/* generated {skeleton.kind} kernel: {macros.kernel_name} */", "#include <math.h>", ""]
    lines.extend(f"#define {name} {value}" for name, value in defines.items())
    lines.append("")
    lines.append(skeleton.body)
    return "\n".join(lines)


def generate_kernel_source(node: ExprNode, skeleton_kind: str = COPY,
                           dialect: str = C_DIALECT) -> KernelSource:
    """Lower a MatMul-free expression into a complete kernel source."""
    signature = qualified_signature(node, skeleton_kind)
    macros = macros_for(node, signature)
    skeleton = SKELETONS[(skeleton_kind, dialect)]
    acc_ctype = None
    if skeleton_kind == REDUCE_ACCU:
        acc_ctype = _ACC_C_NAMES[accumulator_type(node.etype)]
    text = instantiate(skeleton, macros, acc_ctype=acc_ctype)
    return KernelSource(
        dialect=dialect,
        text=text,
        entry_point=macros.kernel_name,
        schema=arg_schema(node, skeleton_kind),
        signature=signature,
        skeleton_kind=skeleton_kind,
        expr=node,
    )


def dump_kernels(sources: list[KernelSource], directory: str | Path) -> list[Path]:
    """Write each kernel as <name>.<ext> plus a manifest of name,signature,arg_schema."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    with open(directory / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        for src in sources:
            path = directory / f"{src.entry_point}.{src.extension}"
            path.write_text(src.text)
            writer.writerow([src.entry_point, src.signature, " ".join(map(str, src.schema))])
            written.append(path)
    return written
