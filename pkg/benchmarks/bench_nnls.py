#!/usr/bin/env python3
"""Compare the numba-compiled NNLS kernel against the pure-numpy fallback.

The backend is chosen at import time from SLPKIT_BACKEND, so each backend is
timed in a child process. Workload: batched active-set solves at the sizes
used by the exact precoders (m = 2*N_T rows, n = 2*K columns).
"""

import argparse
import json
import os
import subprocess
import sys

_CHILD = r"""
import json, sys, time
import numpy as np
from slpkit import nnls

m, n, n_prob, reps = (int(v) for v in sys.argv[1:5])
rng = np.random.default_rng(0)
a = rng.standard_normal((n_prob, m, n))
b = rng.standard_normal((n_prob, m))
nnls.solve_block(a[:2], b[:2])  # warm up (JIT compile on the numba path)
times = []
for _ in range(reps):
    t0 = time.perf_counter()
    _, iters, ok = nnls.solve_block(a, b)
    times.append(time.perf_counter() - t0)
assert ok.all()
print(json.dumps({
    "backend": nnls.BACKEND,
    "median_s": float(np.median(times)),
    "per_solve_us": float(np.median(times)) / n_prob * 1e6,
}))
"""


def run_backend(backend, m, n, n_prob, reps):
    env = dict(os.environ, SLPKIT_BACKEND=backend)
    out = subprocess.run(
        [sys.executable, "-c", _CHILD, str(m), str(n), str(n_prob), str(reps)],
        env=env, capture_output=True, text=True, check=True,
    )
    return json.loads(out.stdout.strip().splitlines()[-1])


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--rows", type=int, default=28, help="m = 2*N_T")
    parser.add_argument("--cols", type=int, default=24, help="n = 2*K")
    parser.add_argument("--problems", type=int, default=500)
    parser.add_argument("--reps", type=int, default=9)
    args = parser.parse_args()

    print(f"NNLS batch: {args.problems} problems of size {args.rows}x{args.cols}")
    results = {}
    for backend in ("numpy", "numba"):
        r = run_backend(backend, args.rows, args.cols, args.problems, args.reps)
        results[backend] = r
        print(f"  {r['backend']:6s}: {r['median_s']*1e3:9.2f} ms/batch "
              f"({r['per_solve_us']:8.2f} us/solve)")
    speedup = results["numpy"]["median_s"] / results["numba"]["median_s"]
    print(f"  numba speedup: {speedup:.1f}x")


if __name__ == "__main__":
    main()
