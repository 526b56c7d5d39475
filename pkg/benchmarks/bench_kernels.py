"""Time the compiled kernels against the numpy fallback on training-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Shapes follow a desk-scale training step (batch 128, window 20, d 32, p 64)
and a retrieval pass over a 200k-item catalogue.
"""

import argparse
import timeit

import numpy as np

from pimi import _kernels_py

try:
    from pimi import _kernels as compiled
except ImportError:
    compiled = None


def cases(rng):
    B, n, d, p, items = 128, 20, 32, 64, 200_000
    idx = rng.integers(0, 5001, size=B * n * 11).astype(np.int64)
    src = rng.normal(size=(idx.size, d))
    weights = rng.random((B * n, n))
    bins = rng.integers(0, p + 1, size=(B * n, n)).astype(np.int64)
    ts = np.sort(rng.integers(0, 10**9, size=(B, n)), axis=1).astype(np.int64)
    mask = np.ones((B, n), dtype=np.uint8)
    mask[:, :5] = 0
    scores = rng.normal(size=(4, items))
    return {
        "scatter_add_rows": lambda m: m.scatter_add_rows(np.zeros((5001, d)), idx, src),
        "bin_accumulate": lambda m: m.bin_accumulate(weights, bins, p + 1),
        "interval_matrices": lambda m: m.interval_matrices(ts, mask, p),
        "topn_rows(N=50)": lambda m: m.topn_rows(scores, 50, 1),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    backends = {"python": _kernels_py}
    if compiled is not None:
        backends["cython"] = compiled
    else:
        print("compiled kernels not built; timing the fallback only")
    print(f"{'kernel':<20}" + "".join(f"{name + ' ms':>14}" for name in backends) + f"{'speedup':>10}")
    for name, fn in cases(rng).items():
        times = {}
        for backend, module in backends.items():
            fn(module)  # warm up
            times[backend] = min(timeit.repeat(lambda: fn(module), number=1, repeat=args.repeat)) * 1e3
        speedup = f"{times['python'] / times['cython']:.1f}x" if "cython" in times else "-"
        print(f"{name:<20}" + "".join(f"{t:>14.3f}" for t in times.values()) + f"{speedup:>10}")


if __name__ == "__main__":
    main()
