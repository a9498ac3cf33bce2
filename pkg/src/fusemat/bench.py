"""Benchmark harness: expression suite, timing protocol, throughput accounting.

Timing brackets each assignment with queue synchronisation on a monotonic
clock.  Throughput is plan-derived: bytes moved are computed from the plan's
distinct input reads and output writes, never measured.  Before any timing,
every expression must pass an oracle-equivalence gate at n=64 or the run
aborts.
"""

from __future__ import annotations

import argparse
import csv
import math
import statistics
import sys
import time
from dataclasses import dataclass, replace

from . import matrix as fm
from . import oracle
from .codegen import REDUCE_ACCU, generate_kernel_source
from .errors import FusematError
from .matrix import Context, Mat, MatExpr
from .plan import ExecutionPlan, MatMulStep, plan

# Reference GPU memory bandwidths (theoretical peak and tool-measured max),
# carried as CSV annotations for context only; nothing here depends on them.
REFERENCE_PEAK_GBPS = 1008.0
REFERENCE_MEASURED_GBPS = 868.0

GATE_N = 64
GATE_TOLERANCE = 1e-5
GATE_TOLERANCE_MATMUL = 1e-4


@dataclass
class BenchSpec:
    expr_name: str
    n: int = 2048
    trials: int = 50
    warmups: int = 2
    etype: str = "f32"
    seed: int = 42
    backend: str = "ref"
    a: float = 2.0
    beta: float = 1.0
    alpha: float = 0.044715
    pi: float = 3.14159265358979
    addn_k: int = 2

    def __post_init__(self) -> None:
        if self.trials < 1 or self.warmups < 0:
            raise FusematError("need trials >= 1 and warmups >= 0")


@dataclass
class BenchResult:
    expr_name: str
    n: int
    etype: str
    trials: int
    warmups: int
    mean_s: float
    stddev_s: float
    bytes_moved: int
    gbps: float
    launches: int
    compiles: int

    def csv_row(self) -> list:
        # %.17g keeps the gbps = bytes/mean_s/1e9 identity exact after parsing
        return [self.expr_name, self.n, self.etype, self.trials, self.warmups,
                f"{self.mean_s:.17g}", f"{self.stddev_s:.17g}", self.bytes_moved,
                f"{self.gbps:.17g}", self.launches, self.compiles]


CSV_HEADER = ["expr", "n", "elem_type", "trials", "warmups", "mean_s", "stddev_s",
              "bytes", "gbps", "launches", "compiles"]


# --- expression registry ----------------------------------------------------

def _inputs(spec: BenchSpec, ctx: Context, count: int, n_rows=None, n_cols=None) -> list[Mat]:
    n_rows = n_rows or [spec.n] * count
    n_cols = n_cols or [spec.n] * count
    return [fm.randu(n_rows[i], n_cols[i], spec.seed + i, spec.etype, ctx)
            for i in range(count)]


def _build_add2(spec, ctx):
    x, y = _inputs(spec, ctx, 2)
    return fm.zeros(spec.n, spec.n, spec.etype, ctx), x + y


def _build_add4(spec, ctx):
    a, b, c, d = _inputs(spec, ctx, 4)
    return fm.zeros(spec.n, spec.n, spec.etype, ctx), a + b + c + d


def _build_addn(spec, ctx):
    mats = _inputs(spec, ctx, spec.addn_k)
    e = mats[0] + mats[1]
    for m in mats[2:]:
        e = e + m
    return fm.zeros(spec.n, spec.n, spec.etype, ctx), e


def chain_dims(n: int) -> list[int]:
    """Operand dimensions for the 4-matrix product with decreasing sizes."""
    return [max(n // (2 ** i), 1) for i in range(5)]


def _build_chain(spec, ctx):
    d = chain_dims(spec.n)
    a, b, c, dd = _inputs(spec, ctx, 4, n_rows=d[:4], n_cols=d[1:])
    return fm.zeros(d[0], d[4], spec.etype, ctx), a @ b @ c @ dd


def _build_addsub2(spec, ctx):
    a, b = _inputs(spec, ctx, 2)
    half = spec.n // 2
    return fm.zeros(half, half, spec.etype, ctx), a.center_half() + b.center_half()


def _build_addsub4(spec, ctx):
    mats = _inputs(spec, ctx, 4)
    half = spec.n // 2
    e = mats[0].center_half() + mats[1].center_half()
    e = e + mats[2].center_half()
    e = e + mats[3].center_half()
    return fm.zeros(half, half, spec.etype, ctx), e


def _build_expr1(spec, ctx):
    x, y = _inputs(spec, ctx, 2)
    e = 2 * (x.t() + y) + 2 * (x + y.t())
    return fm.zeros(spec.n, spec.n, spec.etype, ctx), e


def _build_expr2(spec, ctx):
    a, b, c, d = _inputs(spec, ctx, 4)
    e = spec.a * a + (b + c).t() + fm.log(d ** 2)
    return fm.zeros(spec.n, spec.n, spec.etype, ctx), e


def _build_expr3(spec, ctx):
    x = fm.randu(spec.n, spec.n, spec.seed, spec.etype, ctx)
    y = fm.randi(spec.n, spec.n, 10, spec.seed + 1, "u32", ctx)
    w = fm.randu(spec.n, spec.n, spec.seed + 2, spec.etype, ctx)
    e = 1 / (x * fm.conv_to(y, spec.etype) + fm.log(fm.log(x + 2) * w))
    return fm.zeros(spec.n, spec.n, spec.etype, ctx), e


def _build_diagsum(spec, ctx):
    x, y = _inputs(spec, ctx, 2)
    e = (x.diag(-1) + x.diag(1)) * (y.diag(-1) + y.diag(1))
    return fm.zeros(spec.n - 1, 1, spec.etype, ctx), e


def _build_relu(spec, ctx):
    (x,) = _inputs(spec, ctx, 1)
    return fm.zeros(spec.n, spec.n, spec.etype, ctx), x * (x > 0)


def _build_sigmoid(spec, ctx):
    (x,) = _inputs(spec, ctx, 1)
    return fm.zeros(spec.n, spec.n, spec.etype, ctx), 1 / (1 + fm.exp(-x))


def _build_swish(spec, ctx):
    (x,) = _inputs(spec, ctx, 1)
    return fm.zeros(spec.n, spec.n, spec.etype, ctx), x / (1 + fm.exp((-spec.beta) * x))


def _build_gelu(spec, ctx):
    (x,) = _inputs(spec, ctx, 1)
    coeff = math.sqrt(2.0 / spec.pi)
    e = (x / 2) * (1 + fm.tanh(coeff * (x + spec.alpha * (x ** 3))))
    return fm.zeros(spec.n, spec.n, spec.etype, ctx), e


_REGISTRY = {
    "add2": _build_add2,
    "add4": _build_add4,
    "chain": _build_chain,
    "addsub2": _build_addsub2,
    "addsub4": _build_addsub4,
    "expr1": _build_expr1,
    "expr2": _build_expr2,
    "expr3": _build_expr3,
    "diagsum": _build_diagsum,
    "relu": _build_relu,
    "sigmoid": _build_sigmoid,
    "swish": _build_swish,
    "gelu": _build_gelu,
    "addN": _build_addn,
}

SUITE = ["add2", "add4", "chain", "addsub2", "addsub4", "expr1", "expr2", "expr3",
         "diagsum", "relu", "sigmoid", "swish", "gelu"]


def registry(name: str):
    """Expression builder for `name`; builders map (spec, ctx) -> (out, expr)."""
    try:
        return _REGISTRY[name]
    except KeyError:
        raise FusematError(f"unknown expression {name!r}; known: {sorted(_REGISTRY)}") from None


def build_expression(spec: BenchSpec, ctx: Context) -> tuple[Mat, MatExpr]:
    return registry(spec.expr_name)(spec, ctx)


# --- accounting ---------------------------------------------------------------

def plan_bytes(pl: ExecutionPlan) -> int:
    """Bytes moved per execution: distinct input elements read plus output
    elements written, per step, computed from the plan (never measured)."""
    total = 0
    for step in pl.steps:
        if isinstance(step, MatMulStep):
            width = step.etype.width
            total += (step.left_shape.n_elem + step.right_shape.n_elem
                      + step.out_shape.n_elem) * width
            continue
        for spec in step.inputs:
            if spec.dense_count > 0:
                # Any dense read covers the whole parent; views are subsets.
                total += spec.parent_shape.n_elem * spec.etype.width
            else:
                distinct = {(v.kind, v.row_off, v.col_off, v.n_rows, v.n_cols)
                            for v in spec.views}
                total += sum(r * c for (_, _, _, r, c) in distinct) * spec.etype.width
        if step.skeleton == REDUCE_ACCU:
            total += step.out_etype.width
        else:
            total += step.out_shape.n_elem * step.out_etype.width
    return total


# --- correctness gate ----------------------------------------------------------

def correctness_gate(spec: BenchSpec) -> None:
    """Run the expression at n=64 and compare against the per-node oracle.

    The reference backend shares the oracle's libm, so it is held to the
    strict relative tolerance; device backends get the mixed tolerance that
    absorbs cross-library ulp differences.
    """
    gate_spec = replace(spec, n=GATE_N)
    ctx = Context(spec.backend)
    out, e = build_expression(gate_spec, ctx)
    env = {mat_id: mat.to_numpy() for mat_id, mat in e.mats.items()}
    out.assign(e)
    expected = oracle.materialize(e.node, env)
    if spec.backend == "ref":
        tol = GATE_TOLERANCE_MATMUL if spec.expr_name == "chain" else GATE_TOLERANCE
        err = oracle.compare(out.to_numpy(), expected, tol)
        if not (err <= tol):
            raise FusematError(
                f"correctness gate failed for {spec.expr_name}: "
                f"max relative error {err:.3e} > {tol:.1e}"
            )
    elif not oracle.allclose_mixed(out.to_numpy(), expected):
        raise FusematError(f"correctness gate failed for {spec.expr_name} on device backend")


# --- running ---------------------------------------------------------------------

def run_bench(spec: BenchSpec, gate: bool = True) -> BenchResult:
    """Seed inputs once, warm up, then time sync-bracketed assignments."""
    if gate:
        correctness_gate(spec)
    ctx = Context(spec.backend)
    out, e = build_expression(spec, ctx)
    pl = plan(out.mat_id, e.node)
    bytes_moved = plan_bytes(pl)
    ctx.reset_counters()
    for _ in range(spec.warmups):
        out.assign(e)
    times = []
    for _ in range(spec.trials):
        ctx.sync()
        start = time.perf_counter()
        out.assign(e)
        ctx.sync()
        times.append(time.perf_counter() - start)
    mean_s = statistics.fmean(times)
    stddev_s = statistics.stdev(times) if len(times) > 1 else 0.0
    return BenchResult(
        expr_name=spec.expr_name if spec.expr_name != "addN" else f"addN({spec.addn_k})",
        n=spec.n,
        etype=spec.etype,
        trials=spec.trials,
        warmups=spec.warmups,
        mean_s=mean_s,
        stddev_s=stddev_s,
        bytes_moved=bytes_moved,
        gbps=bytes_moved / mean_s / 1e9,
        launches=ctx.launches,
        compiles=ctx.compile_count,
    )


def addn_sweep(spec: BenchSpec, k_min: int, k_max: int, gate: bool = True) -> list[BenchResult]:
    """One result per operand count; every plan must be a single fused launch."""
    if k_min < 2:
        raise FusematError("addN needs at least 2 matrices")
    results = []
    for k in range(k_min, k_max + 1):
        k_spec = replace(spec, expr_name="addN", addn_k=k)
        if gate and k == k_min:
            correctness_gate(replace(k_spec, addn_k=max(k_min, 2)))
        ctx = Context(spec.backend)
        out, e = build_expression(k_spec, ctx)
        pl = plan(out.mat_id, e.node)
        if len(pl.fused_steps) != 1 or pl.matmul_steps:
            raise FusematError(f"addN({k}) did not plan to a single fused kernel")
        result = run_bench(k_spec, gate=False)
        per_trial = result.launches / (k_spec.trials + k_spec.warmups)
        if per_trial != 1:
            raise FusematError(f"addN({k}) launched {per_trial} kernels per trial")
        results.append(result)
    return results


# --- output -------------------------------------------------------------------

def emit_csv(results: list[BenchResult], path) -> None:
    """Rows in input order, preceded by reference-bandwidth annotations."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# reference_peak_gbps={REFERENCE_PEAK_GBPS:g}\n")
        fh.write(f"# reference_measured_gbps={REFERENCE_MEASURED_GBPS:g}\n")
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for result in results:
            writer.writerow(result.csv_row())


def emit_kernels(specs: list[BenchSpec], directory) -> list:
    """Dump the distinct generated kernels of the given expressions."""
    from .codegen import dump_kernels

    sources = {}
    for spec in specs:
        ctx = Context("ref")
        out, e = build_expression(spec, ctx)
        for step in plan(out.mat_id, e.node).fused_steps:
            if step.signature not in sources:
                sources[step.signature] = generate_kernel_source(step.expr, step.skeleton)
    return dump_kernels(list(sources.values()), directory)


# --- CLI ---------------------------------------------------------------------

def _parse_expr_arg(value: str) -> list[tuple[str, int | None]]:
    names = []
    for part in value.split(","):
        part = part.strip()
        if part == "all":
            names.extend((name, None) for name in SUITE)
        elif part.startswith("addN"):
            tail = part[4:].strip("():")
            names.append(("addN", int(tail) if tail else 2))
        else:
            names.append((part, None))
    return names


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="fusemat-bench",
        description="Time the fused-expression suite and report plan-derived throughput. "
                    "The 'ref' backend is an interpreted correctness oracle (slow at "
                    "large n); use --backend device for compiled-kernel timing.",
    )
    parser.add_argument("--expr", default=None,
                        help="expression name, comma list, 'all', or addN:<k>")
    parser.add_argument("--n", type=int, default=2048, help="square size (default 2048)")
    parser.add_argument("--trials", type=int, default=50)
    parser.add_argument("--warmups", type=int, default=2)
    parser.add_argument("--type", dest="etype", choices=["f32", "f64"], default="f32")
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--backend", choices=["ref", "device"], default="ref")
    parser.add_argument("--csv", default=None, help="write results CSV here")
    parser.add_argument("--emit-kernels", default=None, metavar="DIR",
                        help="dump generated kernel sources and a manifest")
    parser.add_argument("--addn-sweep", default=None, metavar="MIN:MAX",
                        help="sweep matrix addition over operand counts")
    parser.add_argument("--beta", type=float, default=1.0, help="swish steepness")
    parser.add_argument("--alpha", type=float, default=0.044715, help="gelu cubic coefficient")
    parser.add_argument("--a", type=float, default=2.0, help="expr2 scale factor")
    args = parser.parse_args(argv)

    base = BenchSpec(
        expr_name="add2", n=args.n, trials=args.trials, warmups=args.warmups,
        etype=args.etype, seed=args.seed, backend=args.backend,
        a=args.a, beta=args.beta, alpha=args.alpha,
    )

    results: list[BenchResult] = []
    specs: list[BenchSpec] = []
    try:
        if args.addn_sweep:
            lo, _, hi = args.addn_sweep.partition(":")
            sweep_results = addn_sweep(base, int(lo), int(hi))
            results.extend(sweep_results)
            specs.extend(replace(base, expr_name="addN", addn_k=k)
                         for k in range(int(lo), int(hi) + 1))
        if args.expr:
            for name, k in _parse_expr_arg(args.expr):
                spec = replace(base, expr_name=name, addn_k=k or 2)
                specs.append(spec)
                results.append(run_bench(spec))
        if not args.addn_sweep and not args.expr:
            parser.error("nothing to run: pass --expr and/or --addn-sweep")
    except FusematError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1

    print(",".join(CSV_HEADER))
    for result in results:
        print(",".join(str(v) for v in result.csv_row()))
    if args.csv:
        emit_csv(results, args.csv)
    if args.emit_kernels:
        emit_kernels(specs, args.emit_kernels)
    return 0


if __name__ == "__main__":
    sys.exit(main())
