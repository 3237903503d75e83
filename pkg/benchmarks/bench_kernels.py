"""Compare the compiled and numpy kernel backends.

Times a teacher-forced forward pass, the matching backward pass and a greedy
decode on random batches, and checks that both backends agree.

    python3 benchmarks/bench_kernels.py [--batch 64] [--n 10] [--rho 32] [--repeat 20]
"""

import argparse
import time

import numpy as np

from seq2slate import kernels
from seq2slate.model import backward_batch, forward_batch
from seq2slate.numerics import make_rng
from seq2slate.optim import init_params


def _best_of(fns, repeat):
    # round-robin so that warm-up and frequency drift hit every column alike
    best = [float("inf")] * len(fns)
    for _ in range(repeat):
        for k, fn in enumerate(fns):
            t0 = time.perf_counter()
            fn()
            best[k] = min(best[k], time.perf_counter() - t0)
    return best


def bench(batch=64, n=10, m=16, rho=32, repeat=20, seed=0):
    rng = make_rng(seed)
    params = init_params(m, m, rho, rng)
    X = rng.normal(size=(batch, n, m))
    perm = np.array([rng.permutation(n) for _ in range(batch)])
    dS = rng.normal(size=(batch, n, n))
    rows = []
    results = {}
    for name in ("python", "compiled"):
        if name == "compiled" and kernels.compiled_backend is None:
            print("compiled backend not built; skipping")
            continue
        kernels.use_backend(name)
        fwd = forward_batch(params, X, kernels.FORCED, perm=perm)
        grad = backward_batch(params, fwd, dS)
        greedy = forward_batch(params, X, kernels.GREEDY)
        results[name] = (fwd.scores, grad.flat(), greedy.perm)
        times = _best_of([lambda: forward_batch(params, X, kernels.FORCED, perm=perm),
                          lambda: backward_batch(params, fwd, dS),
                          lambda: forward_batch(params, X, kernels.GREEDY)], repeat)
        rows.append((name, *times))
    kernels.use_backend("compiled" if kernels.compiled_backend is not None else "python")

    print(f"batch={batch} n={n} m={m} rho={rho} (best of {repeat}, milliseconds)")
    print(f"{'backend':<10}{'forward':>10}{'backward':>10}{'greedy':>10}")
    for name, *times in rows:
        print(f"{name:<10}" + "".join(f"{1000 * t:>10.2f}" for t in times))
    if len(rows) == 2:
        speedup = [p / c for p, c in zip(rows[0][1:], rows[1][1:])]
        print(f"{'speedup':<10}" + "".join(f"{s:>9.1f}x" for s in speedup))
        (S_py, g_py, p_py), (S_c, g_c, p_c) = results["python"], results["compiled"]
        print(f"max |dS| {np.abs(S_py - S_c).max():.2e}  max |dgrad| {np.abs(g_py - g_c).max():.2e}  "
              f"greedy perms equal {np.array_equal(p_py, p_c)}")
    return rows


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--n", type=int, default=10)
    ap.add_argument("--m", type=int, default=16)
    ap.add_argument("--rho", type=int, default=32)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    bench(args.batch, args.n, args.m, args.rho, args.repeat)
