"""Benchmark harness and seeded dataset generators.

Measurement protocol: every cell runs ``warmup + runs`` times, warmup
executions are discarded, the median of the remaining wall times is
reported in milliseconds, and the allocation ledger is reset before each
run so the row also carries peak tracked bytes. Cell failures land in the
row's status column; the suite keeps going.

Datasets are seeded synthetic stand-ins: ``uniform-synthetic`` draws
targets from a known GP prior by dense Cholesky sampling (so it is capped
at moderate N), ``trend-seasonal`` is a linear trend plus sinusoids,
``bump-noise`` is a smooth bump with a noise level that grows along x,
and ``csv-file`` ingests a file with D feature columns then one target
column (optional header row). Splits are 80/20 by strided interleave:
every fifth point, starting at index 4, is held out.

Exposed as the ``bench`` command line tool; see ``bench --help``. The
BENCH_THREADS environment variable caps internal BLAS parallelism.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import os
import statistics
import sys
import time
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np
import threadpoolctl

from .errors import KernelParseError
from .kernels import RBF, Scale, format_kernel, kernel_eval, parse_kernel
from .linalg import LEDGER, cholesky, tracked
from .models import (
    OptimizerConfig,
    gp_fit,
    gp_predict,
    metrics,
    sparse_fit,
    sparse_predict,
)
from .solvers import CgConfig, build_ski, matrix_free_matvec, ski_matvec
from .models import default_ski_grid

DATASET_KINDS = ("uniform-synthetic", "trend-seasonal", "bump-noise", "csv-file")
SUITES = ("gram", "cholesky", "matvec", "exact", "sparse", "ski", "memory", "accuracy")

#: Generating kernel for uniform-synthetic targets (documented constant).
SYNTH_KERNEL = Scale(1.0, RBF(0.5))
#: Dense sampling bound for uniform-synthetic.
SYNTH_MAX_N = 8192

# Fixed accuracy-suite model: long lengthscale tracks the trend, short one
# the seasonal component. Fitted noise sits slightly above the generator's
# so the intervals stay calibrated under the sparse approximation too.
ACCURACY_KERNEL = "(+ (scale 3000.0 (rbf 30.0)) (scale 6.0 (rbf 0.2)))"
ACCURACY_DATA_NOISE = 0.1
ACCURACY_FIT_NOISE = 0.12

# The memory suite caps CG iterations: peak bytes are reached in the first
# iteration, so longer solves only add runtime, not information.
MEMORY_CG_ITERATIONS = 5
MEMORY_CHOLESKY_BYTES_LIMIT = 1_500_000_000


@dataclass
class DatasetSpec:
    """Recipe for one seeded dataset. ``noise`` is a variance."""

    kind: str
    n: int = 500
    d: int = 1
    noise: float = 0.1
    seed: int = 0
    path: str | None = None

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind != "csv-file" and self.n < 2:
            raise ValueError("need n >= 2")


def sample_gp_targets(x, kernel, noise, rng, draws=1):
    """Draw ``draws`` target vectors from N(0, K + noise*I) at fixed inputs."""
    n = x.shape[0]
    gram = kernel_eval(kernel, x)
    gram.flat[:: n + 1] += float(noise)
    factor = cholesky(gram)
    del gram
    return tracked(factor.L @ rng.standard_normal((n, draws)))


def _raw_dataset(spec):
    """Full (X, y) before the train/test split."""
    if spec.kind == "csv-file":
        if spec.path is None:
            raise ValueError("csv-file dataset needs a path")
        return read_csv_dataset(spec.path)
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "uniform-synthetic":
        if spec.n > SYNTH_MAX_N:
            raise ValueError(
                f"uniform-synthetic is dense-sampled and capped at n={SYNTH_MAX_N};"
                " use trend-seasonal for larger sets"
            )
        x = tracked(rng.random((spec.n, spec.d)))
        y = sample_gp_targets(x, SYNTH_KERNEL, spec.noise, rng)[:, 0]
        return x, tracked(np.ascontiguousarray(y))
    if spec.kind == "trend-seasonal":
        t = np.arange(spec.n, dtype=np.float64) / 12.0
        y = 1.5 * t + 2.5 * np.sin(2.0 * math.pi * t) + 0.5 * np.sin(4.0 * math.pi * t)
        y += math.sqrt(spec.noise) * rng.standard_normal(spec.n)
        return tracked(t[:, None].copy()), tracked(y)
    # bump-noise: smooth bump, noise standard deviation ramping up along x
    x = np.linspace(0.0, 60.0, spec.n)
    bump = 60.0 * np.exp(-(((x - 25.0) / 8.0) ** 2)) * np.sin((x - 25.0) / 5.0)
    sd = 0.5 + 3.0 / (1.0 + np.exp(-(x - 12.0) / 3.0))
    y = bump + math.sqrt(spec.noise) * sd * rng.standard_normal(spec.n)
    return tracked(x[:, None].copy()), tracked(y)


def split_train_test(x, y):
    """80/20 strided interleave: indices 4, 9, 14, ... are the test set."""
    test = (np.arange(x.shape[0]) % 5) == 4
    train = ~test
    return (
        tracked(x[train]), tracked(np.ascontiguousarray(y[train])),
        tracked(x[test]), tracked(np.ascontiguousarray(y[test])),
    )


def generate_dataset(spec):
    """(X_train, y_train, X_test, y_test), fully determined by the spec."""
    x, y = _raw_dataset(spec)
    return split_train_test(x, y)


def read_csv_dataset(path):
    """Read a dataset file: D feature columns then the target column.

    A non-numeric first row is treated as a header. Raises ValueError on
    malformed numeric rows.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None:
            raise ValueError(f"{path}: empty dataset file")
        try:
            rows.append([float(v) for v in first])
        except ValueError:
            pass  # header row
        for lineno, line in enumerate(reader, start=2):
            if not line:
                continue
            try:
                rows.append([float(v) for v in line])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    arr = np.array(rows, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] < 2:
        raise ValueError(f"{path}: need at least one feature column and a target")
    return tracked(np.ascontiguousarray(arr[:, :-1])), tracked(
        np.ascontiguousarray(arr[:, -1])
    )


def write_csv_dataset(path, x, y, header=True):
    """Write the read_csv_dataset format; floats round-trip exactly."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if header:
            writer.writerow([f"x{i}" for i in range(x.shape[1])] + ["y"])
        for row, target in zip(np.asarray(x), np.asarray(y)):
            writer.writerow([repr(float(v)) for v in row] + [repr(float(target))])


@dataclass
class BenchRecord:
    """One benchmark cell: configuration, retained run times, summary."""

    suite: str
    params: dict
    times_ms: list = field(default_factory=list)
    median_ms: float = float("nan")
    peak_tracked_bytes: int = 0
    seed: int = 0
    status: str = "ok"


def _run_cell(suite, params, make_fn, runs, warmup, seed):
    record = BenchRecord(suite=suite, params=dict(params), seed=seed)
    try:
        fn = make_fn()
        peak = 0
        extras = None
        for i in range(runs + warmup):
            LEDGER.reset_peak()
            t0 = time.perf_counter()
            out = fn()
            elapsed_ms = (time.perf_counter() - t0) * 1000.0
            if out is not None:
                extras = out
            if i >= warmup:
                record.times_ms.append(elapsed_ms)
                peak = max(peak, LEDGER.peak_bytes)
        record.median_ms = statistics.median(record.times_ms)
        record.peak_tracked_bytes = peak
        if extras:
            record.params.update(extras)
    except Exception as exc:  # cell failure is a row, not a crash
        record.status = f"failed: {type(exc).__name__}"
    return record


_DEFAULT_N = {
    "gram": [256, 512],
    "cholesky": [256, 512],
    "matvec": [512, 1024],
    "exact": [256, 512],
    "sparse": [512],
    "ski": [2048],
    "memory": [1000, 2000, 10000, 20000],
    "accuracy": [624],
}


def run_suite(
    suite,
    *,
    n_list=None,
    d_list=None,
    m=200,
    grid=None,
    kernel=None,
    runs=5,
    warmup=1,
    seed=0,
    noise=0.1,
):
    """Run one suite over the parameter grid; returns a list of BenchRecord.

    ``kernel`` may be a kernel object or an s-expression string; the
    default is ``(scale 1.0 (rbf 0.5))``. Suites: gram and cholesky time
    dense kernel algebra, matvec the slab-streamed operator, exact and
    sparse end-to-end fit+predict, ski the FFT grid matvec, memory records
    peak tracked bytes of fits, accuracy reports held-out metrics.
    """
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}")
    if runs < 1 or warmup < 0:
        raise ValueError("need runs >= 1 and warmup >= 0")
    if kernel is None:
        kernel = Scale(1.0, RBF(0.5))
    elif isinstance(kernel, str):
        kernel = parse_kernel(kernel)
    kernel_text = format_kernel(kernel)
    ns = list(n_list) if n_list else list(_DEFAULT_N[suite])
    ds = list(d_list) if d_list else [1]

    records = []

    def add(params, make_fn):
        records.append(_run_cell(suite, params, make_fn, runs, warmup, seed))

    if suite == "gram":
        for n in ns:
            for d in ds:
                def make_fn(n=n, d=d):
                    x = tracked(np.random.default_rng(seed).random((n, d)))
                    def fn():
                        g = kernel_eval(kernel, x)
                        del g
                    return fn
                add({"n": n, "d": d, "kernel": kernel_text}, make_fn)

    elif suite == "cholesky":
        for n in ns:
            for d in ds:
                def make_fn(n=n, d=d):
                    rng = np.random.default_rng(seed)
                    x = tracked(rng.random((n, d)))
                    gram = kernel_eval(kernel, x)
                    gram.flat[:: n + 1] += noise
                    def fn():
                        f = cholesky(gram)
                        del f
                    return fn
                add({"n": n, "d": d, "kernel": kernel_text}, make_fn)

    elif suite == "matvec":
        for n in ns:
            for d in ds:
                def make_fn(n=n, d=d):
                    rng = np.random.default_rng(seed)
                    x = tracked(rng.random((n, d)))
                    v = tracked(rng.standard_normal(n))
                    def fn():
                        out = matrix_free_matvec(kernel, x, noise, v, block=256)
                        del out
                    return fn
                add({"n": n, "d": d, "kernel": kernel_text}, make_fn)

    elif suite == "exact":
        for n in ns:
            for d in ds:
                def make_fn(n=n, d=d):
                    spec = DatasetSpec("uniform-synthetic", n=n, d=d, noise=noise, seed=seed)
                    xtr, ytr, xte, yte = generate_dataset(spec)
                    def fn():
                        state = gp_fit(xtr, ytr, kernel, noise, "auto")
                        mean, var = gp_predict(state, xte)
                        del state, mean, var
                    return fn
                add({"n": n, "d": d, "strategy": "auto", "kernel": kernel_text}, make_fn)

    elif suite == "sparse":
        for n in ns:
            for d in ds:
                def make_fn(n=n, d=d):
                    spec = DatasetSpec("uniform-synthetic", n=n, d=d, noise=noise, seed=seed)
                    xtr, ytr, xte, yte = generate_dataset(spec)
                    m_eff = min(m, xtr.shape[0])
                    def fn():
                        state = sparse_fit(
                            xtr, ytr, kernel, noise, m_eff, OptimizerConfig(steps=0)
                        )
                        mean, var = sparse_predict(state, xte)
                        del state, mean, var
                    return fn
                add({"n": n, "d": d, "m": min(m, n - n // 5), "kernel": kernel_text}, make_fn)

    elif suite == "ski":
        for n in ns:
            g = grid if grid is not None else default_ski_grid(n)
            def make_fn(n=n, g=g):
                rng = np.random.default_rng(seed)
                x = tracked(np.sort(rng.random(n))[:, None].copy())
                v = tracked(rng.standard_normal(n))
                state = build_ski(x, kernel, g)
                def fn():
                    out = ski_matvec(state, noise, v)
                    del out
                return fn
            add({"n": n, "d": 1, "grid": g, "kernel": kernel_text}, make_fn)

    elif suite == "memory":
        for strategy in ("cholesky", "cg"):
            for n in ns:
                if strategy == "cholesky" and 16 * n * n > MEMORY_CHOLESKY_BYTES_LIMIT:
                    records.append(
                        BenchRecord(
                            suite=suite,
                            params={"n": n, "d": 1, "strategy": strategy, "kernel": kernel_text},
                            seed=seed,
                            status="skipped",
                        )
                    )
                    continue
                def make_fn(n=n, strategy=strategy):
                    spec = DatasetSpec("trend-seasonal", n=n, noise=noise, seed=seed)
                    x, y = _raw_dataset(spec)
                    cfg = CgConfig(max_iterations=MEMORY_CG_ITERATIONS)
                    def fn():
                        state = gp_fit(x, y, kernel, noise, strategy, cg_config=cfg)
                        del state
                    return fn
                add({"n": n, "d": 1, "strategy": strategy, "kernel": kernel_text}, make_fn)

    elif suite == "accuracy":
        acc_kernel = parse_kernel(ACCURACY_KERNEL)
        acc_text = format_kernel(acc_kernel)
        for n in ns:
            spec = DatasetSpec("trend-seasonal", n=n, noise=ACCURACY_DATA_NOISE, seed=seed)

            def make_exact(spec=spec):
                xtr, ytr, xte, yte = generate_dataset(spec)
                def fn():
                    state = gp_fit(xtr, ytr, acc_kernel, ACCURACY_FIT_NOISE, "cholesky")
                    mean, var = gp_predict(state, xte)
                    rmse, nll, cov = metrics(mean, var, ACCURACY_FIT_NOISE, yte)
                    return {"rmse": rmse, "nll": nll, "coverage95": cov}
                return fn

            def make_sparse(spec=spec):
                xtr, ytr, xte, yte = generate_dataset(spec)
                m_eff = min(m, xtr.shape[0])
                def fn():
                    state = sparse_fit(
                        xtr, ytr, acc_kernel, ACCURACY_FIT_NOISE, m_eff, OptimizerConfig(steps=0)
                    )
                    mean, var = sparse_predict(state, xte)
                    rmse, nll, cov = metrics(mean, var, state.noise, yte)
                    return {"rmse": rmse, "nll": nll, "coverage95": cov}
                return fn

            add({"n": n, "d": 1, "strategy": "exact", "kernel": acc_text}, make_exact)
            add(
                {"n": n, "d": 1, "strategy": "sparse", "m": min(m, n - n // 5), "kernel": acc_text},
                make_sparse,
            )

    return records


_PARAM_ORDER = ["n", "d", "strategy", "m", "grid", "kernel", "rmse", "nll", "coverage95"]


def _format_value(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_table(records, format="csv"):
    """Render records as RFC-4180-style csv or an aligned markdown table.

    Column order is stable: suite, the parameter columns, seed,
    median_ms, peak_bytes, status.
    """
    if not records:
        raise ValueError("no records to emit")
    if format not in ("csv", "markdown"):
        raise ValueError(f"unknown format {format!r}")
    keys = [k for k in _PARAM_ORDER if any(k in r.params for r in records)]
    extras = sorted({k for r in records for k in r.params} - set(keys))
    keys += extras
    header = ["suite", *keys, "seed", "median_ms", "peak_bytes", "status"]
    rows = [header]
    for r in records:
        rows.append(
            [r.suite]
            + [_format_value(r.params[k]) if k in r.params else "" for k in keys]
            + [str(r.seed), f"{r.median_ms:.3f}", str(r.peak_tracked_bytes), r.status]
        )
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerows(rows)
        return buf.getvalue()
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    def line(row):
        return "| " + " | ".join(cell.ljust(w) for cell, w in zip(row, widths)) + " |"
    out = [line(rows[0]), "| " + " | ".join("-" * w for w in widths) + " |"]
    out += [line(row) for row in rows[1:]]
    return "\n".join(out) + "\n"


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="bench",
        description="Timed suites over the GP library: gram, cholesky, matvec, "
        "exact, sparse, ski, memory, accuracy.",
    )
    parser.add_argument("--suite", required=True, choices=list(SUITES))
    parser.add_argument("--n", default=None, help="comma-separated sizes, e.g. 512,1024")
    parser.add_argument("--d", default="1", help="comma-separated input dims")
    parser.add_argument("--m", type=int, default=200, help="inducing point count")
    parser.add_argument("--grid", type=int, default=None, help="ski grid size")
    parser.add_argument("--kernel", default="(scale 1.0 (rbf 0.5))")
    parser.add_argument("--runs", type=int, default=5)
    parser.add_argument("--warmup", type=int, default=1)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--format", choices=["csv", "markdown"], default="markdown")
    parser.add_argument("--out", default=None)
    args = parser.parse_args(argv)

    try:
        n_list = [int(v) for v in args.n.split(",")] if args.n else None
        d_list = [int(v) for v in args.d.split(",")]
        kernel = parse_kernel(args.kernel)
        threads = os.environ.get("BENCH_THREADS")
        limit = threadpoolctl.threadpool_limits(int(threads)) if threads else nullcontext()
    except (ValueError, KernelParseError) as exc:
        parser.exit(2, f"bench: {exc}\n")

    with limit:
        records = run_suite(
            args.suite,
            n_list=n_list,
            d_list=d_list,
            m=args.m,
            grid=args.grid,
            kernel=kernel,
            runs=args.runs,
            warmup=args.warmup,
            seed=args.seed,
        )
    text = emit_table(records, args.format)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 1 if any(r.status.startswith("failed") for r in records) else 0


if __name__ == "__main__":
    sys.exit(main())
