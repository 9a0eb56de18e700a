"""Planar box geometry: rotated IoU, ego-frame changes, non-maximum suppression.

All boxes live in a right-handed 2-D frame (x forward/right, y up/left is up to
the caller; nothing here assumes a particular convention beyond right-handed).
Angles are radians, normalized to [-pi, pi).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(theta: float) -> float:
    """Normalize an angle to [-pi, pi)."""
    t = math.fmod(theta + math.pi, TWO_PI)
    if t < 0.0:
        t += TWO_PI
    return t - math.pi


@dataclass
class BevBox:
    """Oriented rectangle in the bird's-eye-view plane.

    u, v: center; l: extent along the heading axis; w: extent across it;
    theta: heading in radians.
    """

    u: float
    v: float
    w: float
    l: float
    theta: float

    def __post_init__(self) -> None:
        if not (self.w > 0.0 and self.l > 0.0):
            raise ValueError(f"box extents must be positive, got w={self.w} l={self.l}")
        self.theta = wrap_angle(self.theta)

    @property
    def center(self) -> np.ndarray:
        return np.array([self.u, self.v])

    @property
    def area(self) -> float:
        return self.w * self.l

    def corners(self) -> np.ndarray:
        """4x2 corner array in counter-clockwise order."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        hl, hw = 0.5 * self.l, 0.5 * self.w
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.u, self.v])


@dataclass
class EgoState:
    """Ego pose and motion in the global frame."""

    x: float
    y: float
    heading: float
    vx: float = 0.0
    vy: float = 0.0
    omega: float = 0.0

    def __post_init__(self) -> None:
        self.heading = wrap_angle(self.heading)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


# ===== rotated IoU =====


def _polygon_area(poly: np.ndarray) -> float:
    """Shoelace area of a polygon given as an (n, 2) vertex array (CCW positive)."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Clip a polygon by a convex CCW polygon (Sutherland-Hodgman)."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = output
        output = []
        prev = inp[-1]
        prev_side = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for cur in inp:
            cur_side = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            if cur_side >= 0.0:
                if prev_side < 0.0:
                    t = prev_side / (prev_side - cur_side)
                    output.append((prev[0] + t * (cur[0] - prev[0]),
                                   prev[1] + t * (cur[1] - prev[1])))
                output.append(cur)
            elif prev_side >= 0.0:
                t = prev_side / (prev_side - cur_side)
                output.append((prev[0] + t * (cur[0] - prev[0]),
                               prev[1] + t * (cur[1] - prev[1])))
            prev, prev_side = cur, cur_side
    return np.array(output) if output else np.empty((0, 2))


def rotated_iou(a: BevBox, b: BevBox) -> float:
    """Intersection-over-union of two oriented rectangles.

    Exact up to float rounding: the intersection is computed by convex
    clipping and its area by the shoelace formula.  Symmetric by
    construction (the operands are ordered canonically before clipping).
    """
    # cheap reject: disjoint circumscribed circles
    dx, dy = a.u - b.u, a.v - b.v
    reach = 0.5 * (math.hypot(a.w, a.l) + math.hypot(b.w, b.l))
    if dx * dx + dy * dy > reach * reach:
        return 0.0
    key_a = (a.u, a.v, a.w, a.l, a.theta)
    key_b = (b.u, b.v, b.w, b.l, b.theta)
    if key_b < key_a:
        a, b = b, a
    inter = _polygon_area(_clip_polygon(a.corners(), b.corners()))
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def iou_matrix(boxes_a: Sequence[BevBox], boxes_b: Sequence[BevBox]) -> np.ndarray:
    """Pairwise rotated IoU, shape (len(a), len(b))."""
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = rotated_iou(a, b)
    return out


# ===== ego-frame changes =====


def ego_compensate(points: np.ndarray, ego_prev: EgoState, ego_cur: EgoState) -> np.ndarray:
    """Re-express point(s) given in the previous ego frame in the current one.

    points: (2,) or (k, 2).  The transform is rigid: previous frame -> global
    -> current frame.
    """
    pts = np.asarray(points, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    g = pts @ rotation(ego_prev.heading).T + ego_prev.position
    out = (g - ego_cur.position) @ rotation(ego_cur.heading)
    return out[0] if single else out


def compensate_box(box: BevBox, ego_prev: EgoState, ego_cur: EgoState) -> BevBox:
    """Re-express a box given in the previous ego frame in the current one."""
    u, v = ego_compensate(np.array([box.u, box.v]), ego_prev, ego_cur)
    return BevBox(float(u), float(v), box.w, box.l,
                  wrap_angle(box.theta + ego_prev.heading - ego_cur.heading))


def box_to_global(box: BevBox, ego: EgoState) -> BevBox:
    g = ego.position + rotation(ego.heading) @ np.array([box.u, box.v])
    return BevBox(float(g[0]), float(g[1]), box.w, box.l, wrap_angle(box.theta + ego.heading))


def box_to_ego(box: BevBox, ego: EgoState) -> BevBox:
    p = rotation(ego.heading).T @ (np.array([box.u, box.v]) - ego.position)
    return BevBox(float(p[0]), float(p[1]), box.w, box.l, wrap_angle(box.theta - ego.heading))


def point_to_ego(point: np.ndarray, ego: EgoState) -> np.ndarray:
    return rotation(ego.heading).T @ (np.asarray(point, dtype=float) - ego.position)


def point_to_global(point: np.ndarray, ego: EgoState) -> np.ndarray:
    return ego.position + rotation(ego.heading) @ np.asarray(point, dtype=float)


# ===== non-maximum suppression =====


def nms(boxes: Sequence[BevBox], scores: Sequence[float], iou_threshold: float) -> List[int]:
    """Greedy NMS.  Returns surviving indices in order of selection.

    Ties in score are broken toward the lower input index, so the result is
    deterministic for any input ordering.
    """
    order = sorted(range(len(boxes)), key=lambda i: (-float(scores[i]), i))
    kept: List[int] = []
    for i in order:
        if all(rotated_iou(boxes[i], boxes[k]) < iou_threshold for k in kept):
            kept.append(i)
    return kept
