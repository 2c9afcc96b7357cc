"""Block-matching search kernel, compiled with numba when available.

Set ``IVVAE_NO_NUMBA=1`` to force the pure-numpy path (both paths return
identical displacements; the benchmark in ``benchmarks/`` compares speed).
"""
from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# costs closer than this count as a tie, broken toward the smaller displacement
TIE_EPS = 1e-9


def _numba_disabled() -> bool:
    return os.environ.get("IVVAE_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")


def block_match_numpy(a, bpad, pu, pv, block, radius, pad):
    """Best integer displacement per block.

    ``a`` is ``[nby*block, nbx*block]``; ``bpad`` is the second frame padded
    by ``pad`` on every side; ``pu``/``pv`` are per-block predicted integer
    displacements.  The search covers ``pred +- radius`` with a zero-mean
    normalized SAD cost.
    """
    nby, nbx = pu.shape
    out_u = np.zeros((nby, nbx), np.int64)
    out_v = np.zeros((nby, nbx), np.int64)
    span = 2 * radius + 1
    offs = np.arange(-radius, radius + 1)
    n = block * block
    for by in range(nby):
        for bx in range(nbx):
            y0, x0 = by * block, bx * block
            ab = a[y0:y0 + block, x0:x0 + block]
            ab = ab - ab.mean()
            ys = y0 + pv[by, bx] - radius + pad
            xs = x0 + pu[by, bx] - radius + pad
            region = bpad[ys:ys + block + span - 1, xs:xs + block + span - 1]
            cand = sliding_window_view(region, (block, block))  # [dv, du, block, block]
            cand = cand - cand.mean(axis=(2, 3), keepdims=True)
            cost = np.abs(cand - ab).sum(axis=(2, 3)) / n
            cu = pu[by, bx] + offs[None, :]
            cv = pv[by, bx] + offs[:, None]
            mag = cu * cu + cv * cv
            best = cost.min()
            tied = cost <= best + TIE_EPS
            # among near-ties: smallest magnitude, then first in scan order
            masked = np.where(tied, mag, np.iinfo(np.int64).max)
            k = int(np.argmin(masked))
            iv, iu = divmod(k, span)
            out_u[by, bx] = pu[by, bx] + offs[iu]
            out_v[by, bx] = pv[by, bx] + offs[iv]
    return out_u, out_v


def _block_match_loops(a, bpad, pu, pv, block, radius, pad):
    nby, nbx = pu.shape
    out_u = np.zeros((nby, nbx), np.int64)
    out_v = np.zeros((nby, nbx), np.int64)
    n = block * block
    span = 2 * radius + 1
    for by in range(nby):
        for bx in range(nbx):
            y0 = by * block
            x0 = bx * block
            ma = 0.0
            for i in range(block):
                for j in range(block):
                    ma += a[y0 + i, x0 + j]
            ma /= n
            costs = np.empty((span, span))
            for iv in range(span):
                for iu in range(span):
                    ys = y0 + pv[by, bx] + iv - radius + pad
                    xs = x0 + pu[by, bx] + iu - radius + pad
                    mb = 0.0
                    for i in range(block):
                        for j in range(block):
                            mb += bpad[ys + i, xs + j]
                    mb /= n
                    sad = 0.0
                    for i in range(block):
                        for j in range(block):
                            sad += abs(bpad[ys + i, xs + j] - mb - (a[y0 + i, x0 + j] - ma))
                    costs[iv, iu] = sad / n
            best = costs.min()
            best_mag = -1
            for iv in range(span):
                for iu in range(span):
                    if costs[iv, iu] <= best + TIE_EPS:
                        cu = pu[by, bx] + iu - radius
                        cv = pv[by, bx] + iv - radius
                        mag = cu * cu + cv * cv
                        if best_mag < 0 or mag < best_mag:
                            best_mag = mag
                            out_u[by, bx] = cu
                            out_v[by, bx] = cv
    return out_u, out_v


try:
    from numba import njit

    block_match_numba = njit(cache=False)(_block_match_loops)
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    block_match_numba = None
    HAVE_NUMBA = False


def block_match(a, bpad, pu, pv, block, radius, pad):
    args = (np.ascontiguousarray(a, np.float64), np.ascontiguousarray(bpad, np.float64),
            np.ascontiguousarray(pu, np.int64), np.ascontiguousarray(pv, np.int64),
            int(block), int(radius), int(pad))
    if HAVE_NUMBA and not _numba_disabled():
        return block_match_numba(*args)
    return block_match_numpy(*args)
