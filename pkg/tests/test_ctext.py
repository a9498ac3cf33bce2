"""The generated access text, interpreted, matches the reference interpreter."""

import numpy as np
import pytest

from fusemat import expr as ast
from fusemat.backend import ref_eval_elem
from fusemat.codegen import COPY, macros_for, qualified_signature
from fusemat.ctext import CompiledText, evaluate_text
from fusemat.errors import FusematError
from fusemat.expr import ElemType, MatShape, collect_inputs
from treegen import TreeGen, flat_env

F32 = ElemType.f32


def text_env(node, env2d):
    """Name->value environment for evaluating a node's access text."""
    inputs, slots = collect_inputs(node)
    env = {}
    for i, spec in enumerate(inputs):
        env[f"in{i}"] = np.asarray(env2d[spec.mat_id]).ravel(order="F")
        env[f"in{i}_n_rows"] = spec.parent_shape.n_rows
        env[f"in{i}_n_cols"] = spec.parent_shape.n_cols
        for j, view in enumerate(spec.views):
            env[f"in{i}_v{j}_row_off"] = view.row_off
            env[f"in{i}_v{j}_col_off"] = view.col_off
    for slot in slots:
        env[f"s{slot.index}"] = slot.etype.dtype.type(slot.value)
    return env


# --- evaluator basics ---------------------------------------------------------

def test_literals_and_arithmetic():
    assert evaluate_text("1 + 2 * 3", {}) == 7
    assert evaluate_text("(1 + 2) * 3", {}) == 9
    assert evaluate_text("-(2) + 5", {}) == 3


def test_indexing_and_names():
    env = {"buf": np.array([10, 20, 30], np.float32), "i": 2}
    assert evaluate_text("buf[i]", env) == np.float32(30)
    assert evaluate_text("buf[(0) + (1) * 2]", env) == np.float32(30)


def test_casts():
    assert evaluate_text("((float)(3))", {}) == np.float32(3)
    assert evaluate_text("((int)(7.9))", {}) == 7
    assert evaluate_text("((unsigned int)(long long)(x))", {"x": np.float32(-2.9)}) == np.uint32(2**32 - 2)
    assert evaluate_text("((int)(x))", {"x": 2**31 + 5}) == np.int32(-(2**31) + 5)


def test_functions_f32_rounding():
    value = evaluate_text("expf(x)", {"x": np.float32(1.0)})
    assert isinstance(value, np.float32)
    assert value == np.exp(np.float32(1.0))


def test_comparison_yields_01():
    assert evaluate_text("((float)((x) > (s)))", {"x": np.float32(2), "s": np.float32(1)}) == 1.0
    assert evaluate_text("((float)((x) > (s)))", {"x": np.float32(0), "s": np.float32(1)}) == 0.0


def test_unbound_name_errors():
    with pytest.raises(FusematError):
        evaluate_text("mystery + 1", {})


def test_trailing_garbage_errors():
    with pytest.raises(FusematError):
        evaluate_text("1 + 2 )", {})


# --- generator cross-check ---------------------------------------------------------

def _assert_text_matches_interpreter(node, env2d, n_samples=None):
    macros = macros_for(node, qualified_signature(node, COPY))
    compiled = CompiledText(macros.access_text)
    env_text = text_env(node, env2d)
    env_interp = flat_env(env2d)
    shape = node.shape
    coords = [(r, c) for c in range(shape.n_cols) for r in range(shape.n_rows)]
    for r, c in coords:
        env_text["row"], env_text["col"] = r, c
        text_value = compiled.evaluate(env_text)
        interp_value = ref_eval_elem(node, r, c, env_interp)
        if isinstance(interp_value, (np.floating, float)):
            both_nan = np.isnan(float(text_value)) and np.isnan(float(interp_value))
            assert both_nan or text_value == interp_value, (r, c, text_value, interp_value)
        else:
            assert text_value == interp_value, (r, c)


def test_text_matches_interpreter_basic_forms():
    x = ast.leaf(0, F32, MatShape(3, 2))
    data = {0: np.arange(6, dtype=np.float32).reshape(3, 2, order="F") - 2.5}
    _assert_text_matches_interpreter(ast.scalar_add(x, 3), data)
    _assert_text_matches_interpreter(ast.transpose(ast.scalar_pre_mul(2, x)).child, data)
    _assert_text_matches_interpreter(ast.schur(x, ast.gt_scalar(x, 0)), data)
    _assert_text_matches_interpreter(ast.pow_int(x, 3), data)


def test_text_matches_interpreter_conversions():
    y = ast.leaf(0, ElemType.u32, MatShape(2, 2))
    ydata = {0: np.array([[1, 7], [3, 9]], np.uint32)}
    _assert_text_matches_interpreter(ast.scalar_add(ast.conv(y, "f32"), 0.5), ydata)
    x = ast.leaf(0, F32, MatShape(2, 2))
    xdata = {0: np.array([[1.9, -2.9], [0.4, 3.0]], np.float32)}
    _assert_text_matches_interpreter(ast.conv(x, "i32"), xdata)
    _assert_text_matches_interpreter(ast.conv(x, "u32"), xdata)


def test_text_matches_interpreter_100_random_trees():
    gen = TreeGen(seed=777, max_dim=6)
    checked = 0
    while checked < 100:
        node = gen.tree(depth=5)
        env = {n.mat_id: gen.env[n.mat_id] for n in ast.walk(node)
               if isinstance(n, ast.LEAF_TYPES)}
        _assert_text_matches_interpreter(node, env)
        checked += 1


def test_text_matches_interpreter_integer_trees():
    gen = TreeGen(seed=778, max_dim=5, etype=ElemType.u32)
    for _ in range(20):
        node = gen.tree(depth=4)
        env = {n.mat_id: gen.env[n.mat_id] for n in ast.walk(node)
               if isinstance(n, ast.LEAF_TYPES)}
        _assert_text_matches_interpreter(node, env)
