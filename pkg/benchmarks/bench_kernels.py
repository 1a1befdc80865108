"""Benchmark the numpy and compiled kernel backends against each other.

Micro-benchmarks time each dense kernel on shapes spanning the desk fixture
up to moderately larger matrices; the end-to-end section times a full tiny
federated run under each backend. Run from the repository root:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --repeats 500 --end-to-end-runs 5
"""

import argparse
import statistics
import time

import numpy as np

from fedprompt import kernels
from fedprompt.experiment import run_experiment
from fedprompt.verify import tiny_config

LN_EPS = 1e-6

MICRO_SHAPES = [
    ("desk attention", (13, 8), (8, 8)),
    ("desk head", (4, 16), (16, 20)),
    ("medium", (64, 64), (64, 64)),
    ("large", (256, 128), (128, 256)),
]


def _time_call(fn, repeats):
    """Median wall time per call in microseconds, after one warm-up call."""
    fn()
    samples = []
    for _ in range(repeats):
        start = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - start)
    return statistics.median(samples) / 1000.0


def micro_cases(rng, a_shape, b_shape):
    a = rng.normal(size=a_shape)
    b = rng.normal(size=b_shape)
    at = np.ascontiguousarray(a.T)
    bt = np.ascontiguousarray(b.T)
    y = kernels.softmax_rows(a)
    gy = rng.normal(size=a_shape)
    return [
        ("matmul", lambda: kernels.matmul(a, b)),
        ("matmul_nt", lambda: kernels.matmul_nt(a, bt)),
        ("matmul_tn", lambda: kernels.matmul_tn(at, b)),
        ("softmax_rows", lambda: kernels.softmax_rows(a)),
        ("softmax_backward", lambda: kernels.softmax_rows_backward(y, gy)),
        ("layer_norm", lambda: kernels.layer_norm(a, LN_EPS)),
        ("layer_norm_backward", lambda: kernels.layer_norm_backward(a, gy, LN_EPS)),
    ]


def run_micro(repeats, seed):
    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)} (active: {kernels.get_backend()})")
    print(f"{repeats} repeats per cell, median microseconds per call\n")
    header = f"{'shape':>14} {'kernel':>20} " + " ".join(f"{b:>10}" for b in backends)
    if len(backends) == 2:
        header += f" {'speedup':>9}"
    print(header)
    rng = np.random.default_rng(seed)
    for label, a_shape, b_shape in MICRO_SHAPES:
        rows = {}
        for backend in backends:
            kernels.set_backend(backend)
            for name, fn in micro_cases(np.random.default_rng(seed), a_shape, b_shape):
                rows.setdefault(name, {})[backend] = _time_call(fn, repeats)
        for name, per_backend in rows.items():
            cells = " ".join(f"{per_backend[b]:>10.2f}" for b in backends)
            line = f"{label:>14} {name:>20} {cells}"
            if len(backends) == 2:
                line += f" {per_backend['numpy'] / per_backend['compiled']:>8.2f}x"
            print(line)
        print()


def run_end_to_end(runs):
    backends = kernels.available_backends()
    print(f"end-to-end: tiny 2-task federated run, best of {runs}\n")
    for backend in backends:
        kernels.set_backend(backend)
        times = []
        for i in range(runs):
            cfg = tiny_config(seed=i)
            start = time.perf_counter()
            run_experiment(cfg)
            times.append(time.perf_counter() - start)
        print(f"{backend:>10}: {min(times) * 1000.0:.1f} ms")


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=200, help="timing repeats per kernel")
    parser.add_argument("--end-to-end-runs", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--skip-end-to-end", action="store_true")
    args = parser.parse_args(argv)
    original = kernels.get_backend()
    try:
        run_micro(args.repeats, args.seed)
        if not args.skip_end_to_end:
            run_end_to_end(args.end_to_end_runs)
    finally:
        kernels.set_backend(original)


if __name__ == "__main__":
    main()
