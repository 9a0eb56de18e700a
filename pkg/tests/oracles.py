"""Independent reference implementations used only by the test suite.

These deliberately avoid the package's own algorithms: IoU is estimated by
point sampling instead of polygon clipping, and assignments are found by
exhaustive enumeration instead of the Hungarian method.
"""
from __future__ import annotations

import math

import numpy as np

from trackloop.geometry import BevBox


def _inside(box: BevBox, pts: np.ndarray) -> np.ndarray:
    """Boolean mask of points inside an oriented rectangle."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    dx = pts[:, 0] - box.u
    dy = pts[:, 1] - box.v
    local_x = c * dx + s * dy
    local_y = -s * dx + c * dy
    return (np.abs(local_x) <= 0.5 * box.l) & (np.abs(local_y) <= 0.5 * box.w)


def mc_rotated_iou(a: BevBox, b: BevBox, n_samples: int, seed: int) -> float:
    """Monte-Carlo IoU estimate from stratified point sampling.

    Samples a jittered grid over the intersection of the two axis-aligned
    bounding boxes; the rectangle areas themselves are exact, so only the
    intersection area carries sampling error.
    """
    ca, cb = a.corners(), b.corners()
    lo = np.maximum(ca.min(axis=0), cb.min(axis=0))
    hi = np.minimum(ca.max(axis=0), cb.max(axis=0))
    union_exact = a.area + b.area
    if np.any(hi <= lo):
        return 0.0
    m = int(math.sqrt(n_samples))
    rng = np.random.default_rng(seed)
    gx, gy = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    jitter = rng.random((2, m, m))
    px = lo[0] + (gx + jitter[0]) / m * (hi[0] - lo[0])
    py = lo[1] + (gy + jitter[1]) / m * (hi[1] - lo[1])
    pts = np.stack([px.ravel(), py.ravel()], axis=1)
    hits = _inside(a, pts) & _inside(b, pts)
    box_area = float((hi[0] - lo[0]) * (hi[1] - lo[1]))
    inter = box_area * float(np.count_nonzero(hits)) / (m * m)
    return inter / (union_exact - inter)


def enumerate_best_assignment(values: np.ndarray, n_real: int):
    """Exhaustive search over detection-to-track assignments.

    `values` is an (n, n_real + n) affinity matrix whose last n columns are
    the per-detection virtual (new-birth) columns.  Every detection must take
    either an unused real column or its own virtual column.  Returns
    (best_total, best_columns) where best_columns[i] is the column chosen for
    row i.  Exact: dynamic program over the set of used real columns visits
    every feasible assignment.
    """
    n = values.shape[0]
    # dp maps used-column bitmask -> (total, columns tuple); keep best per mask
    dp = {0: (0.0, ())}
    for i in range(n):
        nxt: dict[int, tuple[float, tuple]] = {}
        for mask, (total, cols) in dp.items():
            # virtual column for row i
            cand = (total + values[i, n_real + i], cols + (n_real + i,))
            if mask not in nxt or _better(cand, nxt[mask]):
                nxt[mask] = cand
            for j in range(n_real):
                if mask & (1 << j) or not np.isfinite(values[i, j]):
                    continue
                cand = (total + values[i, j], cols + (j,))
                m2 = mask | (1 << j)
                if m2 not in nxt or _better(cand, nxt[m2]):
                    nxt[m2] = cand
        dp = nxt
    best = max(dp.values(), key=lambda kv: kv[0])
    return best[0], list(best[1])


def _better(a: tuple, b: tuple) -> bool:
    return a[0] > b[0]
