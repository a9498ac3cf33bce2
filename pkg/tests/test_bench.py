"""Bench harness: suite registry, throughput accounting, protocol, CLI."""

import pytest

import fusemat.bench as bench
from fusemat.bench import (
    SUITE,
    BenchSpec,
    addn_sweep,
    build_expression,
    chain_dims,
    correctness_gate,
    emit_csv,
    emit_kernels,
    plan_bytes,
    registry,
    run_bench,
)
from fusemat.errors import FusematError
from fusemat.matrix import Context
from fusemat.plan import plan


def spec_for(name, n=16, **kw):
    defaults = dict(trials=3, warmups=1, seed=42)
    defaults.update(kw)
    return BenchSpec(expr_name=name, n=n, **defaults)


def plan_for(spec):
    ctx = Context("ref")
    out, e = build_expression(spec, ctx)
    return plan(out.mat_id, e.node)


# --- registry -----------------------------------------------------------------

def test_suite_has_thirteen_expressions():
    assert len(SUITE) == 13


def test_unknown_name_rejected():
    with pytest.raises(FusematError):
        registry("nope")


@pytest.mark.parametrize("name", SUITE)
def test_builders_produce_conforming_expressions(name):
    ctx = Context("ref")
    spec = spec_for(name, n=16)
    out, e = build_expression(spec, ctx)
    assert e.node.shape == out.shape
    if name == "diagsum":
        assert out.shape.n_rows == 15 and out.shape.n_cols == 1
    elif name in ("addsub2", "addsub4"):
        assert out.shape.n_rows == 8
    elif name == "chain":
        assert (out.shape.n_rows, out.shape.n_cols) == (16, 1)


def test_swish_structure():
    # X / (1 + exp(-beta*X)): one input, two scalar slots in pre-order
    # (the 1 of the shallow add comes before the nested -beta).
    ctx = Context("ref")
    out, e = build_expression(spec_for("swish", beta=1.5), ctx)
    from fusemat.expr import collect_inputs

    inputs, slots = collect_inputs(e.node)
    assert len(inputs) == 1
    assert [pytest.approx(s.value) for s in slots] == [1.0, -1.5]


def test_addsub2_uses_centered_half_views():
    ctx = Context("ref")
    out, e = build_expression(spec_for("addsub2", n=16), ctx)
    from fusemat.expr import collect_inputs

    inputs, _ = collect_inputs(e.node)
    assert all(spec.views and spec.views[0].kind == "sv" for spec in inputs)
    assert all((v.row_off, v.col_off) == (4, 4) for spec in inputs for v in spec.views)


def test_diagsum_structure():
    ctx = Context("ref")
    out, e = build_expression(spec_for("diagsum", n=16), ctx)
    from fusemat.expr import collect_inputs

    inputs, _ = collect_inputs(e.node)
    assert len(inputs) == 2
    assert [v.kind for spec in inputs for v in spec.views] == ["dg"] * 4


def test_chain_dims_decreasing():
    assert chain_dims(64) == [64, 32, 16, 8, 4]
    assert chain_dims(16) == [16, 8, 4, 2, 1]


def test_chain_plans_three_matmuls_no_elementwise():
    pl = plan_for(spec_for("chain", n=16))
    assert len(pl.matmul_steps) == 3
    assert len(pl.fused_steps) == 0


def test_chain_launch_count_per_trial():
    ctx = Context("ref")
    out, e = build_expression(spec_for("chain", n=16), ctx)
    ctx.reset_counters()
    out.assign(e)
    assert ctx.launches == 3  # the three product steps; no element-wise kernel


# --- plan-derived bytes ------------------------------------------------------------

def test_add2_bytes():
    pl = plan_for(spec_for("add2", n=16))
    assert plan_bytes(pl) == 3 * 16 * 16 * 4


def test_addn_bytes():
    for k in (2, 5, 9):
        pl = plan_for(spec_for("addN", n=16, addn_k=k))
        assert plan_bytes(pl) == (k + 1) * 16 * 16 * 4


def test_addsub2_bytes_count_views_only():
    pl = plan_for(spec_for("addsub2", n=16))
    assert plan_bytes(pl) == 3 * 8 * 8 * 4


def test_diagsum_bytes():
    pl = plan_for(spec_for("diagsum", n=16))
    assert plan_bytes(pl) == 5 * 15 * 4


def test_expr1_bytes_distinct_inputs_once():
    pl = plan_for(spec_for("expr1", n=16))
    assert plan_bytes(pl) == 3 * 16 * 16 * 4


def test_chain_bytes_sum_over_steps():
    pl = plan_for(spec_for("chain", n=16))
    d = chain_dims(16)
    expected = (
        (d[0] * d[1] + d[1] * d[2] + d[0] * d[2])
        + (d[0] * d[2] + d[2] * d[3] + d[0] * d[3])
        + (d[0] * d[3] + d[3] * d[4] + d[0] * d[4])
    ) * 4
    assert plan_bytes(pl) == expected


@pytest.mark.parametrize("name", [n for n in SUITE if n != "diagsum"])
def test_bytes_quadruple_when_n_doubles(name):
    small = plan_bytes(plan_for(spec_for(name, n=16)))
    large = plan_bytes(plan_for(spec_for(name, n=32)))
    assert large == 4 * small


def test_f64_doubles_bytes():
    small = plan_bytes(plan_for(spec_for("add2", n=16)))
    wide = plan_bytes(plan_for(spec_for("add2", n=16, etype="f64")))
    assert wide == 2 * small


# --- protocol ---------------------------------------------------------------------

def test_run_bench_counts_and_throughput():
    result = run_bench(spec_for("add2", n=16, trials=5, warmups=2))
    assert result.launches == 7
    assert result.compiles == 1
    assert result.gbps == pytest.approx(result.bytes_moved / result.mean_s / 1e9)
    assert result.stddev_s >= 0


def test_no_compiles_during_trials():
    spec = spec_for("sigmoid", n=16, trials=4, warmups=2)
    correctness_gate(spec)
    ctx = Context(spec.backend)
    out, e = build_expression(spec, ctx)
    for _ in range(spec.warmups):
        out.assign(e)
    compiles_after_warmup = ctx.compile_count
    for _ in range(spec.trials):
        out.assign(e)
    assert ctx.compile_count == compiles_after_warmup


def test_gate_passes_suite_quickly():
    correctness_gate(spec_for("relu"))


def test_gate_would_fail_on_unknown():
    with pytest.raises(FusematError):
        correctness_gate(spec_for("zzz"))


def test_addn_sweep_single_launch_per_trial():
    results = addn_sweep(spec_for("addN", n=16, trials=2, warmups=1), 2, 6)
    assert len(results) == 5
    for k, result in zip(range(2, 7), results):
        assert result.expr_name == f"addN({k})"
        assert result.launches == 3  # 1 warmup + 2 trials, one launch each
        assert result.bytes_moved == (k + 1) * 16 * 16 * 4


# --- output -----------------------------------------------------------------------

def test_emit_csv_layout(tmp_path):
    result = run_bench(spec_for("add2", n=16, trials=2, warmups=1))
    path = tmp_path / "out.csv"
    emit_csv([result], path)
    lines = path.read_text().splitlines()
    assert lines[0] == "# reference_peak_gbps=1008"
    assert lines[1] == "# reference_measured_gbps=868"
    assert lines[2] == ",".join(bench.CSV_HEADER)
    assert len(lines) == 4
    assert lines[3].startswith("add2,16,f32,2,1,")


def test_emit_csv_row_order(tmp_path):
    specs = [spec_for("relu", n=16, trials=1, warmups=0),
             spec_for("add2", n=16, trials=1, warmups=0)]
    results = [run_bench(s, gate=False) for s in specs]
    path = tmp_path / "two.csv"
    emit_csv(results, path)
    rows = path.read_text().splitlines()[3:]
    assert rows[0].startswith("relu,") and rows[1].startswith("add2,")


def test_emit_kernels_add2_single_file(tmp_path):
    paths = emit_kernels([spec_for("add2", n=16)], tmp_path)
    assert len(paths) == 1
    assert (tmp_path / "manifest.csv").exists()


def test_emit_kernels_dedupes_signatures(tmp_path):
    paths = emit_kernels([spec_for("add2", n=16), spec_for("add2", n=32)], tmp_path)
    assert len(paths) == 1  # same structural kernel at both sizes


# --- CLI ---------------------------------------------------------------------------

def test_cli_runs_and_writes_csv(tmp_path, capsys):
    csv_path = tmp_path / "cli.csv"
    kernels_dir = tmp_path / "kernels"
    code = bench.main([
        "--expr", "add2,relu", "--n", "16", "--trials", "2", "--warmups", "1",
        "--csv", str(csv_path), "--emit-kernels", str(kernels_dir),
    ])
    assert code == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == ",".join(bench.CSV_HEADER)
    assert csv_path.exists() and kernels_dir.is_dir()


def test_cli_addn_sweep(capsys):
    code = bench.main(["--addn-sweep", "2:4", "--n", "16", "--trials", "1", "--warmups", "1"])
    assert code == 0
    lines = capsys.readouterr().out.splitlines()
    assert [ln.split(",")[0] for ln in lines[1:]] == ["addN(2)", "addN(3)", "addN(4)"]


def test_cli_addn_expr_form(capsys):
    code = bench.main(["--expr", "addN:5", "--n", "16", "--trials", "1", "--warmups", "0"])
    assert code == 0
    assert capsys.readouterr().out.splitlines()[1].startswith("addN(5),")


def test_cli_rejects_unknown_expr(capsys):
    code = bench.main(["--expr", "bogus", "--n", "16"])
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_cli_nonzero_on_gate_failure(monkeypatch, capsys):
    def broken_gate(spec):
        raise FusematError(f"correctness gate failed for {spec.expr_name}")

    monkeypatch.setattr(bench, "correctness_gate", broken_gate)
    code = bench.main(["--expr", "add2", "--n", "16", "--trials", "1"])
    assert code == 1
    assert "correctness gate failed" in capsys.readouterr().err


def test_cli_requires_work():
    with pytest.raises(SystemExit):
        bench.main([])
