"""Numba vs numpy timings for the hot kernels.

    python3 benchmarks/bench_kernels.py [--size 64] [--repeat 5]

Both implementations are called directly, so the SBPROBE_DISABLE_NUMBA flag
does not matter here. Each numba kernel is run once before timing so JIT
compilation is excluded. Reported times are the best of ``--repeat`` runs.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from sbprobe import kernels
from sbprobe._accel import HAVE_NUMBA
from sbprobe.masks import ChessPatternConfig, build_schedule


def cases(size: int, rng: np.random.Generator):
    img = rng.random((size, size, 3))
    known = build_schedule(ChessPatternConfig(2, 6, 1, (size, size))).masks[0].values  # True = kept
    return {
        "median r=1": (kernels._median_nb, kernels._median_np, (img, 1)),
        "median r=2": (kernels._median_nb, kernels._median_np, (img, 2)),
        "nl-means 1/3": (kernels._nlmeans_nb, kernels._nlmeans_np, (img, 1, 3, 0.01)),
        "harmonic fill": (lambda *a: kernels._harmonic_fill_nb(*a, 1.6),
                          kernels._harmonic_fill_np, (img, known, 1e-7, 20000)),
    }


def best(fn, args, repeat: int) -> float:
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        raise SystemExit("numba is disabled or missing; nothing to compare")
    rng = np.random.default_rng(args.seed)
    print(f"{args.size}x{args.size}x3, best of {args.repeat}")
    print(f"{'kernel':16s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s} {'max |diff|':>11s}")
    for name, (nb, ref, a) in cases(args.size, rng).items():
        out_nb = nb(*a)  # warm-up / compile
        out_np = ref(*a)
        t_nb, t_np = best(nb, a, args.repeat), best(ref, a, args.repeat)
        diff = float(np.abs(out_nb - out_np).max())
        print(f"{name:16s} {t_nb * 1e3:10.2f} {t_np * 1e3:10.2f} {t_np / t_nb:7.1f}x {diff:11.1e}")


if __name__ == "__main__":
    main()
