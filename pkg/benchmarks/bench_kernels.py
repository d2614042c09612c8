"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Both variants are always importable; which one the package uses at runtime
is chosen by ``SKILLMEM_NUMBA`` (set it to 0 to force numpy).
"""
import argparse
import timeit

import numpy as np

from skillmem import _accel, kernels


def cases(rng):
    scores = rng.normal(size=(20_000, 12))
    probs = rng.dirichlet(np.ones(12), size=20_000)
    actions = np.argsort(-rng.random((20_000, 12)), axis=1)[:, :3]
    points = rng.normal(size=(5_000, 64))
    centroids = rng.normal(size=(4, 64))
    return [
        ("topk_rows 20000x12 k=3", kernels.topk_rows_np, kernels.topk_rows_nb, (scores, 3)),
        ("joint_log_prob_rows 20000x12 k=3", kernels.joint_log_prob_rows_np, kernels.joint_log_prob_rows_nb, (probs, actions)),
        ("kmeans_assign 5000x64 k=4", kernels.kmeans_assign_np, kernels.kmeans_assign_nb, (points, centroids)),
    ]


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"numba available: {_accel.HAVE_NUMBA}; package uses numba: {_accel.USE_NUMBA}")
    print(f"{'kernel':36s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, f_np, f_nb, a in cases(np.random.default_rng(0)):
        f_nb(*a)  # compile outside the timed region
        t_np = min(timeit.repeat(lambda: f_np(*a), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: f_nb(*a), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:36s} {t_np:10.2f} {t_nb:10.2f} {t_np / t_nb:7.1f}x")


if __name__ == "__main__":
    main()
