"""User-facing API: constructors, assignment, caching, access, reductions, I/O."""

import numpy as np
import pytest

import fusemat as fm
from fusemat import oracle
from fusemat.errors import FusematError, OutOfBoundsError, ShapeError
from fusemat.rng import mix64


@pytest.fixture
def ctx():
    return fm.Context("ref")


# --- constructors -----------------------------------------------------------

def test_zeros(ctx):
    assert fm.zeros(2, 2, ctx=ctx).to_numpy().tolist() == [[0, 0], [0, 0]]


def test_fill(ctx):
    assert fm.fill(1, 3, 7, ctx=ctx).to_numpy().tolist() == [[7, 7, 7]]


def test_ones(ctx):
    assert fm.ones(2, 3, ctx=ctx).to_numpy().sum() == 6


def test_randu_deterministic(ctx):
    a = fm.randu(4, 4, seed=42, ctx=ctx).to_numpy()
    b = fm.randu(4, 4, seed=42, ctx=ctx).to_numpy()
    assert np.array_equal(a, b)
    c = fm.randu(4, 4, seed=43, ctx=ctx).to_numpy()
    assert not np.array_equal(a, c)
    assert (a >= 0).all() and (a < 1).all()


def test_randu_stream_matches_documented_algorithm(ctx):
    # Recompute element k = r + c*n_rows from the published formula.
    seed, n = 42, 4
    a = fm.randu(n, n, seed=seed, ctx=ctx).to_numpy()
    golden = np.uint64(0x9E3779B97F4A7C15)
    for (r, c) in [(0, 0), (3, 2), (1, 3)]:
        k = r + c * n
        with np.errstate(over="ignore"):
            word = mix64(np.array([np.uint64(seed) + np.uint64(k + 1) * golden]))[0]
        expected = np.float32((int(word) >> 40) * 2.0 ** -24)
        assert a[r, c] == expected


def test_randi_range(ctx):
    y = fm.randi(8, 8, 10, seed=1, ctx=ctx).to_numpy()
    assert y.dtype == np.uint32
    assert (y < 10).all()


def test_from_array_infers_etype(ctx):
    m = fm.from_array(np.array([[1, 2]], dtype=np.int32), ctx=ctx)
    assert m.etype is fm.ElemType.i32


# --- assignment and caching -----------------------------------------------------

def test_assign_then_read(ctx):
    x = fm.from_array(np.array([[1, 2], [3, 4]], np.float32), ctx=ctx)
    y = fm.from_array(np.array([[5, 6], [7, 8]], np.float32), ctx=ctx)
    z = fm.zeros(2, 2, ctx=ctx)
    z.assign(x + y)
    assert z[0, 0] == x[0, 0] + y[0, 0]
    assert z.to_numpy().tolist() == [[6, 8], [10, 12]]


def test_scalar_variants_share_kernel(ctx):
    x = fm.randu(4, 4, seed=1, ctx=ctx)
    z = fm.zeros(4, 4, ctx=ctx)
    ctx.reset_counters()
    z.assign(x + 3.0)
    z.assign(x + 5.0)
    assert ctx.compile_count == 1
    assert ctx.launches == 2
    assert np.allclose(z.to_numpy(), x.to_numpy() + 5)


def test_add4_single_launch(ctx):
    mats = [fm.randu(8, 8, seed=i, ctx=ctx) for i in range(4)]
    z = fm.zeros(8, 8, ctx=ctx)
    ctx.reset_counters()
    z.assign(mats[0] + mats[1] + mats[2] + mats[3])
    assert ctx.launches == 1
    expected = sum(m.to_numpy().astype(np.float64) for m in mats)
    assert np.allclose(z.to_numpy(), expected, atol=1e-5)


def test_cache_survives_counter_reset(ctx):
    # At most one compile per signature per context lifetime.
    x = fm.randu(4, 4, seed=1, ctx=ctx)
    z = fm.zeros(4, 4, ctx=ctx)
    z.assign(x + 1.0)
    assert ctx.compile_count == 1
    ctx.reset_counters()
    z.assign(x + 2.0)
    assert ctx.compile_count == 0  # cache hit; no recompile after reset
    assert ctx.cache.hits == 1


def test_fifty_trials_after_two_warmups(ctx):
    x = fm.randu(8, 8, seed=1, ctx=ctx)
    y = fm.randu(8, 8, seed=2, ctx=ctx)
    z = fm.zeros(8, 8, ctx=ctx)
    e = x + y
    ctx.reset_counters()
    for _ in range(2 + 50):
        z.assign(e)
    assert ctx.compile_count == 1
    assert ctx.launches == 52


# --- element access ----------------------------------------------------------------

def test_elem_get_bounds(ctx):
    m = fm.zeros(3, 2, ctx=ctx)
    with pytest.raises(OutOfBoundsError):
        m.elem_get(3, 0)
    with pytest.raises(OutOfBoundsError):
        m[0, 2]


def test_elem_set_roundtrip(ctx):
    m = fm.zeros(3, 3, ctx=ctx)
    m[1, 2] = 42.0
    assert m[1, 2] == 42.0
    assert m.to_numpy()[1, 2] == 42.0


# --- reductions -----------------------------------------------------------------------

def test_accu_ones(ctx):
    assert fm.accu(fm.ones(3, 3, ctx=ctx)) == 9.0


def test_accu_small_matrix(ctx):
    x = fm.from_array(np.array([[1, 2], [3, 4]], np.float32), ctx=ctx)
    assert fm.accu(x) == 10.0


def test_accu_self_difference_is_exact_zero(ctx):
    x = fm.randu(5, 5, seed=9, ctx=ctx)
    assert fm.accu(x - x) == 0.0


def test_accu_relu_nonnegative(ctx):
    x = fm.from_array(np.array([[-3, 1], [2, -5]], np.float32), ctx=ctx)
    assert fm.accu(x * (x > 0)) >= 0
    assert fm.accu(x * (x > 0)) == 3.0


def test_accu_empty(ctx):
    assert fm.accu(fm.zeros(7, 3, ctx=ctx)) == 0.0


def test_accu_fuses_elementwise(ctx):
    x = fm.randu(4, 4, seed=1, ctx=ctx)
    y = fm.randu(4, 4, seed=2, ctx=ctx)
    ctx.reset_counters()
    total = fm.accu(x + y)
    assert ctx.launches == 1
    # elementwise add rounds in f32, accumulation then runs in f64
    expected = float((x.to_numpy() + y.to_numpy()).astype(np.float64).sum())
    assert total == pytest.approx(expected, rel=1e-12)


def test_accu_int_wraps_in_elem_type(ctx):
    big = fm.fill(2, 1, 2**31, "u32", ctx=ctx)
    assert fm.accu(big) == (2**31 + 2**31) % 2**32


def test_accu_of_matmul_splits(ctx):
    a = fm.randu(3, 4, seed=1, ctx=ctx)
    b = fm.randu(4, 2, seed=2, ctx=ctx)
    total = fm.accu(a @ b)
    expected = float((a.to_numpy().astype(np.float64) @ b.to_numpy()).sum())
    assert total == pytest.approx(expected, rel=1e-5)


# --- conversions ---------------------------------------------------------------------

def test_conv_u32_to_f32(ctx):
    y = fm.from_array(np.array([[1, 2, 3]], np.uint32), ctx=ctx)
    z = fm.zeros(1, 3, ctx=ctx)
    z.assign(fm.conv_to(y, "f32"))
    assert z.to_numpy().tolist() == [[1.0, 2.0, 3.0]]


def test_conv_f32_truncates_to_i32(ctx):
    x = fm.from_array(np.array([[2.9, -2.9]], np.float32), ctx=ctx)
    z = fm.zeros(1, 2, "i32", ctx=ctx)
    z.assign(fm.conv_to(x, "i32"))
    assert z.to_numpy().tolist() == [[2, -2]]


def test_conv_fuses(ctx):
    x = fm.randu(4, 4, seed=1, ctx=ctx)
    y = fm.randi(4, 4, 10, seed=2, ctx=ctx)
    z = fm.zeros(4, 4, ctx=ctx)
    ctx.reset_counters()
    z.assign(x * fm.conv_to(y, "f32"))
    assert ctx.launches == 1
    assert np.allclose(z.to_numpy(), x.to_numpy() * y.to_numpy())


def test_mixed_types_without_conv_rejected(ctx):
    x = fm.randu(2, 2, seed=1, ctx=ctx)
    y = fm.randi(2, 2, 10, seed=2, ctx=ctx)
    with pytest.raises(ShapeError):
        x + y


# --- printing and sync ------------------------------------------------------------------

def test_print_zeros(ctx, capsys):
    fm.zeros(1, 2, ctx=ctx).print()
    assert capsys.readouterr().out == "0.0000 0.0000\n"


def test_print_reflects_assignment(ctx):
    x = fm.fill(1, 2, 1.25, ctx=ctx)
    z = fm.zeros(1, 2, ctx=ctx)
    z.assign(x + 1.0)
    assert z.to_string() == "2.2500 2.2500"


def test_print_integers_plain(ctx):
    m = fm.fill(1, 2, 7, "i32", ctx=ctx)
    assert m.to_string() == "7 7"


def test_sync_idempotent(ctx):
    fm.sync(ctx)
    fm.sync(ctx)


def test_async_unobservable(ctx):
    # Same downloadable results whether we sync after every assign or never.
    def run(sync_every):
        c = fm.Context("ref")
        x = fm.randu(6, 6, seed=3, ctx=c)
        z = fm.zeros(6, 6, ctx=c)
        z.assign(x + 1.0)
        if sync_every:
            fm.sync(c)
        z.assign(z * 2.0)
        if sync_every:
            fm.sync(c)
        return z.to_numpy()

    assert np.array_equal(run(True), run(False))


# --- aliasing and resizing -----------------------------------------------------------------

def test_safe_alias_in_place(ctx):
    z = fm.randu(4, 4, seed=5, ctx=ctx)
    y = fm.randu(4, 4, seed=6, ctx=ctx)
    before = z.to_numpy()
    z.assign(z + y)
    assert np.allclose(z.to_numpy(), before + y.to_numpy())


def test_unsafe_alias_transposed_self(ctx):
    z = fm.randu(4, 4, seed=7, ctx=ctx)
    y = fm.randu(4, 4, seed=8, ctx=ctx)
    snapshot = z.to_numpy()
    z.assign(z.t() + y)
    assert np.allclose(z.to_numpy(), snapshot.T + y.to_numpy())


def test_unsafe_alias_matmul_self(ctx):
    z = fm.randu(3, 3, seed=9, ctx=ctx)
    snapshot = z.to_numpy().astype(np.float64)
    z.assign(z @ z)
    assert np.allclose(z.to_numpy(), (snapshot @ snapshot).astype(np.float32), atol=1e-6)


def test_assign_resizes_output(ctx):
    x = fm.randu(5, 3, seed=1, ctx=ctx)
    z = fm.zeros(2, 2, ctx=ctx)
    z.assign(x + 0.5)
    assert z.shape == fm.MatShape(5, 3)
    assert np.allclose(z.to_numpy(), x.to_numpy() + 0.5)


def test_assign_etype_mismatch_rejected(ctx):
    x = fm.randu(2, 2, seed=1, ctx=ctx)
    z = fm.zeros(2, 2, "f64", ctx=ctx)
    with pytest.raises(ShapeError):
        z.assign(x + 1.0)


def test_context_mixing_rejected(ctx):
    other = fm.Context("ref")
    x = fm.randu(2, 2, seed=1, ctx=ctx)
    y = fm.randu(2, 2, seed=1, ctx=other)
    with pytest.raises(FusematError):
        x + y


# --- matrix I/O ---------------------------------------------------------------------------

def test_save_load_roundtrip_f32(ctx, tmp_path):
    m = fm.randu(5, 4, seed=11, ctx=ctx)
    path = tmp_path / "m.txt"
    fm.save_matrix(m, path)
    header = path.read_text().splitlines()[0]
    assert header == "5 4 f32"
    loaded = fm.load_matrix(path, ctx=ctx)
    assert np.array_equal(loaded.to_numpy(), m.to_numpy())  # %.9g is exact for f32


def test_save_load_roundtrip_f64(ctx, tmp_path):
    m = fm.Mat(3, 3, "f64", ctx=ctx)
    m.set_values(np.random.default_rng(0).uniform(-1, 1, (3, 3)))
    path = tmp_path / "m64.txt"
    fm.save_matrix(m, path)
    loaded = fm.load_matrix(path, ctx=ctx)
    assert np.array_equal(loaded.to_numpy(), m.to_numpy())


def test_save_load_bit_exact_ints(ctx, tmp_path):
    m = fm.randi(4, 4, 1000, seed=3, etype="u32", ctx=ctx)
    path = tmp_path / "ints.txt"
    fm.save_matrix(m, path)
    loaded = fm.load_matrix(path, ctx=ctx)
    assert np.array_equal(loaded.to_numpy(), m.to_numpy())


# --- end-to-end expression sanity ---------------------------------------------------------

def test_expression_matches_oracle_end_to_end(ctx):
    x = fm.randu(8, 8, seed=20, ctx=ctx)
    y = fm.randu(8, 8, seed=21, ctx=ctx)
    e = 2 * (x.t() + y) + 2 * (x + y.t())
    z = fm.zeros(8, 8, ctx=ctx)
    z.assign(e)
    env = {x.mat_id: x.to_numpy(), y.mat_id: y.to_numpy()}
    expected = oracle.materialize(e.node, env)
    assert oracle.compare(z.to_numpy(), expected, 1e-6) <= 1e-6
