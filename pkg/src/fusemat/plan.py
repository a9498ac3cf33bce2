"""Execution planning: split expressions at matrix-product barriers.

Matrix multiplication forces its operands to be materialised; everything else
fuses.  A plan is a topologically ordered list of MatMul steps and fused
kernel steps over a small namespace of buffer ids: real matrices keep their
(non-negative) ids, temporaries get fresh negative ids.
"""

from __future__ import annotations

from dataclasses import dataclass

from .codegen import COPY, REDUCE_ACCU, accumulator_type, arg_schema, qualified_signature
from .expr import (
    AliasKind,
    BinaryElem,
    Diag,
    ElemType,
    ExprNode,
    InputSpec,
    Leaf,
    MatMul,
    MatShape,
    ScalarSlot,
    Subview,
    Transpose,
    UnaryElem,
    aliases,
    collect_inputs,
)


@dataclass
class FusedKernelStep:
    """One generated-kernel launch computing a MatMul-free subtree."""

    expr: ExprNode
    skeleton: str                  # codegen.COPY or codegen.REDUCE_ACCU
    out_id: int
    out_shape: MatShape            # shape of the output buffer
    out_etype: ElemType
    domain_shape: MatShape         # iteration domain (== out_shape for copy)
    signature: str
    inputs: list[InputSpec]
    scalars: list[ScalarSlot]

    @classmethod
    def create(cls, expr: ExprNode, skeleton: str, out_id: int) -> "FusedKernelStep":
        inputs, scalars = collect_inputs(expr)
        if skeleton == REDUCE_ACCU:
            out_shape = MatShape(1, 1)
            out_etype = accumulator_type(expr.etype)
        else:
            out_shape = expr.shape
            out_etype = expr.etype
        return cls(
            expr=expr,
            skeleton=skeleton,
            out_id=out_id,
            out_shape=out_shape,
            out_etype=out_etype,
            domain_shape=expr.shape,
            signature=qualified_signature(expr, skeleton),
            inputs=inputs,
            scalars=scalars,
        )

    def schema(self):
        return arg_schema(self.expr, self.skeleton)


@dataclass
class MatMulStep:
    """dest = left @ right over dense column-major buffers."""

    left_id: int
    right_id: int
    out_id: int
    left_shape: MatShape
    right_shape: MatShape
    out_shape: MatShape
    etype: ElemType


@dataclass
class TempSpec:
    temp_id: int
    shape: MatShape
    etype: ElemType


@dataclass
class ExecutionPlan:
    steps: list[FusedKernelStep | MatMulStep]
    temps: list[TempSpec]
    out_id: int
    out_shape: MatShape
    out_etype: ElemType
    out_is_temp: bool = False      # result lands in a temp; caller swaps/copies it in

    @property
    def fused_steps(self) -> list[FusedKernelStep]:
        return [s for s in self.steps if isinstance(s, FusedKernelStep)]

    @property
    def matmul_steps(self) -> list[MatMulStep]:
        return [s for s in self.steps if isinstance(s, MatMulStep)]

    def n_launches(self) -> int:
        return len(self.steps)


class _Planner:
    def __init__(self) -> None:
        self.steps: list[FusedKernelStep | MatMulStep] = []
        self.temps: list[TempSpec] = []
        self._next_temp = -1

    def new_temp(self, shape: MatShape, etype: ElemType) -> TempSpec:
        spec = TempSpec(self._next_temp, shape, etype)
        self._next_temp -= 1
        self.temps.append(spec)
        return spec

    def materialize(self, node: ExprNode) -> Leaf:
        """Return a dense leaf holding `node`'s value, emitting steps as needed."""
        split = self.split(node)
        if isinstance(split, Leaf):
            return split
        temp = self.new_temp(split.shape, split.etype)
        self.steps.append(FusedKernelStep.create(split, COPY, temp.temp_id))
        return Leaf(temp.temp_id, split.etype, split.shape)

    def split(self, node: ExprNode) -> ExprNode:
        """Replace every MatMul subtree with a dense temp leaf, bottom-up."""
        if isinstance(node, MatMul):
            left = self.materialize(node.left)
            right = self.materialize(node.right)
            temp = self.new_temp(node.shape, node.etype)
            self.steps.append(
                MatMulStep(
                    left_id=left.mat_id,
                    right_id=right.mat_id,
                    out_id=temp.temp_id,
                    left_shape=left.shape,
                    right_shape=right.shape,
                    out_shape=node.shape,
                    etype=node.etype,
                )
            )
            return Leaf(temp.temp_id, node.etype, node.shape)
        if isinstance(node, (Leaf, Subview, Diag)):
            return node
        if isinstance(node, UnaryElem):
            child = self.split(node.child)
            if child is node.child:
                return node
            return UnaryElem(node.kind, child, scalar=node.scalar,
                             exponent=node.exponent, target=node.target)
        if isinstance(node, BinaryElem):
            left, right = self.split(node.left), self.split(node.right)
            if left is node.left and right is node.right:
                return node
            return BinaryElem(node.kind, left, right)
        if isinstance(node, Transpose):
            child = self.split(node.child)
            return node if child is node.child else Transpose(child)
        raise TypeError(type(node).__name__)


def plan(out_mat_id: int, node: ExprNode) -> ExecutionPlan:
    """Plan the assignment of `node` into the matrix `out_mat_id`.

    Every maximal MatMul-free subtree becomes exactly one fused kernel step.
    If the output aliases the expression unsafely (any non-identity read of
    it), the final step targets a fresh temporary which the caller installs.
    """
    planner = _Planner()
    alias = aliases(out_mat_id, node)
    root = planner.split(node)

    unsafe = alias is AliasKind.UNSAFE
    if (
        isinstance(root, Leaf)
        and planner.steps
        and isinstance(planner.steps[-1], MatMulStep)
        and planner.steps[-1].out_id == root.mat_id
    ):
        # Root was a MatMul; its final product step can write the destination.
        last = planner.steps[-1]
        if unsafe:
            return ExecutionPlan(planner.steps, planner.temps, last.out_id,
                                 root.shape, root.etype, out_is_temp=True)
        planner.temps = [t for t in planner.temps if t.temp_id != last.out_id]
        last.out_id = out_mat_id
        return ExecutionPlan(planner.steps, planner.temps, out_mat_id, root.shape, root.etype)

    if unsafe:
        temp = planner.new_temp(root.shape, root.etype)
        planner.steps.append(FusedKernelStep.create(root, COPY, temp.temp_id))
        return ExecutionPlan(planner.steps, planner.temps, temp.temp_id,
                             root.shape, root.etype, out_is_temp=True)

    planner.steps.append(FusedKernelStep.create(root, COPY, out_mat_id))
    return ExecutionPlan(planner.steps, planner.temps, out_mat_id, root.shape, root.etype)


def reduce_plan(node: ExprNode) -> ExecutionPlan:
    """Plan a full sum-reduction of `node`; the result is a 1x1 accumulator temp."""
    planner = _Planner()
    root = planner.split(node)
    acc = planner.new_temp(MatShape(1, 1), accumulator_type(root.etype))
    planner.steps.append(FusedKernelStep.create(root, REDUCE_ACCU, acc.temp_id))
    return ExecutionPlan(planner.steps, planner.temps, acc.temp_id,
                         acc.shape, acc.etype, out_is_temp=True)
