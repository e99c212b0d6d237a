"""Compare the numba and numpy convolution backends.

Times forward, input-gradient and weight-gradient passes for a few layer
shapes and checks that both backends agree on the results.

    python3 benchmarks/bench_backends.py [--reps 20] [--csv out.csv]
"""

from __future__ import annotations

import argparse
import csv
import statistics
import sys
import time

import numpy as np

from wconv import _kernels
from wconv.conv import ConvGeometry, KernelTensor, conv2d_backward, conv2d_forward
from wconv.tensor import make_rng

SHAPES = [
    # batch, channels, filters, extent, k
    (8, 3, 16, 32, 3),
    (8, 16, 16, 32, 3),
    (1, 16, 16, 256, 3),
    (8, 16, 16, 32, 5),
]


def _time(fn, reps):
    fn()  # warm-up (and JIT compile on first use)
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def run(reps: int):
    if not _kernels.HAVE_NUMBA:
        sys.exit("numba is not installed; nothing to compare")
    rng = make_rng(0)
    rows = []
    for b, c, f, n, k in SHAPES:
        x = rng.standard_normal((b, c, n, n))
        kern = KernelTensor.of(rng.standard_normal((f, c, k, k)), rng.standard_normal(f))
        geom = ConvGeometry.same(k)
        up = rng.standard_normal((b, f, n, n))
        results, times = {}, {}
        for backend in _kernels.BACKENDS:
            _kernels.set_backend(backend)
            results[backend] = (conv2d_forward(x, kern, geom), *conv2d_backward(x, kern, geom, up))
            times[backend] = (
                _time(lambda: conv2d_forward(x, kern, geom), reps),
                _time(lambda: conv2d_backward(x, kern, geom, up), reps),
            )
        diff = max(np.abs(a - b_).max() for a, b_ in zip(results["numba"], results["numpy"]))
        rows.append((b, c, f, n, k, *times["numba"], *times["numpy"], diff))
    _kernels.set_backend("numba")
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--csv", help="also write the table to this file")
    args = ap.parse_args(argv)
    rows = run(args.reps)
    header = ("B", "C", "F", "N", "K", "nb_fwd_ms", "nb_bwd_ms", "np_fwd_ms", "np_bwd_ms", "max_abs_diff")
    print(" ".join(f"{h:>11}" for h in header))
    for r in rows:
        cells = [f"{v:>11d}" for v in r[:5]] + [f"{v * 1e3:>11.3f}" for v in r[5:9]] + [f"{r[9]:>11.2e}"]
        print(" ".join(cells))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)


if __name__ == "__main__":
    main()
