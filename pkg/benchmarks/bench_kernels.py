"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Sizes follow the synthetic tasks (96 training rows, 36 descriptions) and a
larger setting closer to a real description bank.
"""
import argparse
import timeit

import numpy as np

from dvp.kernels import _fallback

try:
    from dvp.kernels import _core
except ImportError:  # extension not built
    _core = None


def cases(rng):
    small_S = rng.standard_normal((96, 36))
    big_S = rng.standard_normal((2000, 600))
    X = rng.standard_normal((2000, 32))
    C = rng.standard_normal((8, 32))
    Z = rng.standard_normal((200, 32))
    return [
        ("topk_counts 96x36 k=3", "topk_counts", (small_S, rng.integers(0, 6, 96), 6, 3)),
        ("topk_counts 2000x600 k=3", "topk_counts", (big_S, rng.integers(0, 100, 2000), 100, 3)),
        ("kmeans_assign 2000x32 v=8", "kmeans_assign", (X, C)),
        ("rbf_gram 200x32", "rbf_gram", (Z, 3.0)),
    ]


def best_time(fn, args, repeat):
    number = 1
    while timeit.timeit(lambda: fn(*args), number=number) < 0.05:
        number *= 2
    return min(timeit.repeat(lambda: fn(*args), number=number, repeat=repeat)) / number


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ns = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for label, name, args in cases(rng):
        t_py = best_time(getattr(_fallback, name), args, ns.repeat)
        if _core is None:
            print(f"{label:<28}{t_py * 1e3:>12.3f}{'n/a':>14}{'':>10}")
            continue
        t_c = best_time(getattr(_core, name), args, ns.repeat)
        print(f"{label:<28}{t_py * 1e3:>12.3f}{t_c * 1e3:>14.3f}{t_py / t_c:>9.1f}x")


if __name__ == "__main__":
    main()
