"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--end-to-end]

Prints one row per kernel with the best-of-``repeat`` time for each backend and
the speed-up. ``--end-to-end`` also times a short training run under each
backend in a subprocess (the backend is chosen at import).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from tfczsl import _pykernels
from tfczsl._backend import compiled_kernels

END_TO_END = """
import time
from tfczsl import experiment
from tfczsl.config import build_config
cfg = build_config({}, ["trainer.epochs=10"])
t0 = time.perf_counter()
experiment.train(cfg)
print(time.perf_counter() - t0)
"""


def cases(rng):
    # shapes of a default-config hidden layer on a joint batch
    n, d_in, d_out = 64, 32, 64
    W = rng.normal(size=(d_out, d_in))
    b = rng.normal(size=d_out)
    X = rng.normal(size=(n, d_in))
    Z = X @ W.T + b
    G = rng.normal(size=(n, d_out))
    p, g = rng.normal(size=20_000), rng.normal(size=20_000)
    m, v = np.zeros_like(p), np.zeros_like(p)
    draws = np.array([rng.integers(0, i + 1) for i in range(10_000)], dtype=np.int64)
    return {
        "dense_forward": lambda k: k.dense_forward(W, b, X, True),
        "dense_backward": lambda k: k.dense_backward(W, X, Z, G, True),
        "adam_update": lambda k: k.adam_update(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.5, 0.1),
        "reservoir_fill": lambda k: k.reservoir_fill(256, draws),
    }


def best_time(fn, repeat):
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat, number)) / number


def end_to_end(backend):
    env = dict(os.environ, TFCZSL_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", END_TO_END], env=env, capture_output=True,
                         text=True, check=True)
    return float(out.stdout.strip())


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args(argv)

    compiled = compiled_kernels()
    if compiled is None:
        sys.exit("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
    print(f"{'kernel':<16}{'cython (us)':>14}{'numpy (us)':>14}{'speed-up':>10}")
    for name, call in cases(np.random.default_rng(0)).items():
        fast = best_time(lambda: call(compiled), args.repeat)
        slow = best_time(lambda: call(_pykernels), args.repeat)
        print(f"{name:<16}{1e6 * fast:>14.2f}{1e6 * slow:>14.2f}{slow / fast:>9.1f}x")
    if args.end_to_end:
        fast, slow = end_to_end("cython"), end_to_end("python")
        print(f"{'train (10 ep)':<16}{fast:>13.2f}s{slow:>13.2f}s{slow / fast:>9.1f}x")


if __name__ == "__main__":
    main()
