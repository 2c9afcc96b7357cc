"""Time the block-matching kernel: numba vs pure numpy.

    python benchmarks/bench_block_matching.py [--repeat 5] [--size 432x768]

Both paths must return identical displacements; the script checks that
before reporting timings.
"""
import argparse
import time

import numpy as np

from ivvae import flowkernels
from ivvae.motion import BlockMatchingEstimator


def textured(h, w, seed=0):
    rng = np.random.default_rng(seed)
    img = rng.random((h // 4 + 1, w // 4 + 1))
    img = np.kron(img, np.ones((4, 4)))[:h, :w]
    return img + 0.1 * rng.random((h, w))


def time_level(fn, a, bpad, pu, pv, block, radius, pad, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(a, bpad, pu, pv, block, radius, pad)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--size", default="432x768")
    args = ap.parse_args()
    h, w = (int(v) for v in args.size.split("x"))
    block, radius = 16, 4
    a = textured(h, w)
    b = np.roll(a, (1, 3), axis=(0, 1))
    nby, nbx = h // block, w // block
    pad = radius + block
    bpad = np.pad(b, pad, mode="edge")
    pu = np.zeros((nby, nbx), np.int64)
    pv = np.zeros((nby, nbx), np.int64)
    a = np.ascontiguousarray(a[:nby * block, :nbx * block])

    if flowkernels.HAVE_NUMBA:
        flowkernels.block_match_numba(a, bpad, pu, pv, block, radius, pad)  # compile
        t_nb, out_nb = time_level(flowkernels.block_match_numba, a, bpad, pu, pv, block, radius, pad, args.repeat)
    t_np, out_np = time_level(flowkernels.block_match_numpy, a, bpad, pu, pv, block, radius, pad, args.repeat)

    print(f"frame {h}x{w}, {nby * nbx} blocks of {block}px, search +-{radius}")
    print(f"numpy : {t_np * 1e3:8.1f} ms")
    if flowkernels.HAVE_NUMBA:
        same = all(np.array_equal(x, y) for x, y in zip(out_nb, out_np))
        print(f"numba : {t_nb * 1e3:8.1f} ms  (speedup {t_np / t_nb:.1f}x, identical={same})")
    est = BlockMatchingEstimator()
    t0 = time.perf_counter()
    est(a, np.roll(a, (1, 3), axis=(0, 1)))
    print(f"full 3-level flow estimate: {(time.perf_counter() - t0) * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
