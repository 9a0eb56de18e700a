"""Supervision and training for the learned tracker.

The model trains on its own online rollouts.  Each optimization step samples
fresh scenario clips, runs ``track_step`` frame by frame with trace
collection on, and supervises the score and offset heads against simulator
ground truth.  There is no teacher forcing: an association mistake early in
a clip changes the track states every later frame is scored on.

Per-frame loss terms:

  affinity   hinge over (positive, negative) affinity column pairs per row
  sot        hinge over (true cell, other cell) pairs per recovery window
  rank       hinge over confidence-score pairs ordered by box quality
  refine     smooth-l1 on refinement offsets against ground-truth centers
  forecast   smooth-l1 on forecast offsets against future ground truth

Every hinge uses the same rule: ``max(0, margin - (pos - neg))`` averaged
over pairs.  Regressions average smooth-l1 over supervised coordinates.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, TrainingError
from .geometry import BevBox, rotated_iou
from .logs import FORECAST_STEPS, GtFrame, GtRecord, make_gt_frames
from .neural import (Node, ParamStore, Tape, adam_step, add, concat, constant,
                     gather_rows, mul, narrow, nmean, nsum, relu, reshape,
                     scale, smooth_l1, sub)
from .simkit import (Detection, FeatureGrid, NoiseConfig, Scenario, SimConfig,
                     generate_scenario, pseudo_detect, render_feature_grid)
from .trackcore import (ColumnSnap, StepTrace, Track, TrackerConfig,
                        UpdateEvent, track_step)

MATCH_IOU = 0.5             # identity threshold for detections and tracks
LOSS_KEYS = ("affinity", "sot", "rank", "refine", "forecast")


# ===== scalar reference losses =====


def margin_loss(positives: Sequence[float], negatives: Sequence[float],
                margin: float = 0.2) -> float:
    """Mean hinge ``max(0, margin - (p - q))`` over all positive/negative pairs.

    Zero when either side is empty, and zero once every positive clears
    every negative by at least ``margin``.
    """
    pos = np.asarray(list(positives), dtype=float)
    neg = np.asarray(list(negatives), dtype=float)
    if pos.size == 0 or neg.size == 0:
        return 0.0
    gaps = margin - (pos[:, None] - neg[None, :])
    return float(np.maximum(gaps, 0.0).mean())


def regression_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean elementwise smooth-l1 between prediction and target."""
    d = np.abs(np.asarray(pred, dtype=float) - np.asarray(target, dtype=float))
    if d.size == 0:
        return 0.0
    vals = np.where(d < 1.0, 0.5 * d * d, d - 0.5)
    return float(vals.mean())


# ===== identity supervision =====


def _match_boxes(boxes: Sequence[BevBox], classes: Sequence[str],
                 records: Sequence[GtRecord],
                 min_iou: float = 0.0) -> List[Tuple[Optional[int], float]]:
    """Exclusive greedy best-IoU assignment of boxes to ground-truth records.

    Pairs are taken in descending IoU order; each box and each record is
    used at most once.  Returns (gt_id or None, iou) per box, where the iou
    is the assigned overlap (0.0 for unassigned boxes).
    """
    pairs = []
    for i, (box, cls) in enumerate(zip(boxes, classes)):
        for rec in records:
            if rec.cls != cls:
                continue
            v = rotated_iou(box, rec.box)
            if v > min_iou:
                pairs.append((v, i, rec.gt_id))
    # descending iou; index order breaks exact ties deterministically
    pairs.sort(key=lambda p: (-p[0], p[1], p[2]))
    out: List[Tuple[Optional[int], float]] = [(None, 0.0)] * len(boxes)
    used_box, used_gt = set(), set()
    for v, i, gid in pairs:
        if i in used_box or gid in used_gt:
            continue
        used_box.add(i)
        used_gt.add(gid)
        out[i] = (gid, v)
    return out


@dataclass
class AssociationLabels:
    """Identity assignments for one affinity matrix.

    Column index space matches the matrix: column j < M is track j, column
    M + i is detection i's own newborn column.
    """

    det_gt: List[Optional[int]]
    det_iou: List[float]
    track_gt: List[Optional[int]]
    positive_cols: List[List[int]]   # per detection row; empty = unsupervised


def supervise_association(detections: Sequence[Detection],
                          columns: Sequence[ColumnSnap],
                          gt_frames: Sequence[GtFrame],
                          frame: int) -> AssociationLabels:
    """Label one frame's association problem from ground truth.

    Detections are matched against the current frame.  Each track column is
    matched against the frame of its own last state, grouped so that tracks
    sharing a last frame compete exclusively for identities.  A detection
    whose identity appears on no column is a newborn (its unary column is
    the positive); a detection with no identity gets no supervision.
    """
    m = len(columns)
    det_pairs = _match_boxes([d.box for d in detections],
                             [d.cls for d in detections],
                             gt_frames[frame].records, min_iou=MATCH_IOU)
    det_gt = [g for g, _ in det_pairs]
    det_iou = [v for _, v in det_pairs]

    track_gt: List[Optional[int]] = [None] * m
    by_last: Dict[int, List[int]] = {}
    for j, col in enumerate(columns):
        by_last.setdefault(col.last_frame, []).append(j)
    for last_frame, js in sorted(by_last.items()):
        got = _match_boxes([columns[j].last_box for j in js],
                           [columns[j].cls for j in js],
                           gt_frames[last_frame].records, min_iou=MATCH_IOU)
        for j, (gid, _) in zip(js, got):
            track_gt[j] = gid

    positive_cols: List[List[int]] = []
    for i, gid in enumerate(det_gt):
        if gid is None:
            positive_cols.append([])
            continue
        cols = [j for j in range(m) if track_gt[j] == gid]
        positive_cols.append(cols if cols else [m + i])
    return AssociationLabels(det_gt=det_gt, det_iou=det_iou,
                             track_gt=track_gt, positive_cols=positive_cols)


def _box_and_class(obj) -> Tuple[BevBox, str]:
    if isinstance(obj, UpdateEvent):
        return obj.post_box, obj.cls
    if isinstance(obj, Track):
        return obj.current_box, obj.cls
    return obj.box, obj.cls      # duck-typed record


def refine_rank_pairs(tracks: Sequence, gt_frame: GtFrame) -> List[Tuple[int, int]]:
    """Ordered index pairs (p, q) where track p overlaps ground truth
    strictly better than track q.

    Overlap is the exclusively assigned IoU from `_match_boxes` with no
    threshold; unassigned tracks count as 0.  Ties produce no pair.
    """
    boxes, classes = zip(*[_box_and_class(t) for t in tracks]) if tracks else ((), ())
    matched = _match_boxes(boxes, classes, gt_frame.records, min_iou=0.0)
    ious = [v for _, v in matched]
    n = len(ious)
    return [(p, q) for p in range(n) for q in range(n) if ious[p] > ious[q]]


# ===== node-graph loss assembly =====


def _zero() -> Node:
    return constant(np.asarray(0.0))


def _hinge_mean(scores: Node, pos_idx: List[int], neg_idx: List[int],
                margin: float) -> Node:
    """Mean hinge over pre-expanded (positive, negative) index pairs."""
    if not pos_idx:
        return _zero()
    p = gather_rows(scores, np.asarray(pos_idx, dtype=int))
    q = gather_rows(scores, np.asarray(neg_idx, dtype=int))
    return nmean(relu(add(constant(np.asarray(margin)), sub(q, p))))


def _masked_smooth_l1(pred: Node, target: np.ndarray, mask: np.ndarray) -> Node:
    """Mean smooth-l1 over coordinates where mask is 1."""
    count = float(mask.sum())
    if count == 0.0:
        return _zero()
    diff = mul(sub(pred, constant(target)), constant(mask))
    return scale(nsum(smooth_l1(diff)), 1.0 / count)


def _record_index(gt_frames: Sequence[GtFrame], cache: Dict[int, Dict[int, GtRecord]],
                  frame: int) -> Dict[int, GtRecord]:
    if frame not in cache:
        cache[frame] = {r.gt_id: r for r in gt_frames[frame].records}
    return cache[frame]


def _affinity_loss(trace: StepTrace, labels: AssociationLabels,
                   margin: float) -> Node:
    m = len(trace.columns)
    n = len(trace.detections)
    pair_len = len(trace.pair_index)
    parts: List[Node] = []
    if trace.pair_scores is not None:
        parts.append(reshape(trace.pair_scores, (pair_len,)))
    if trace.unary_scores is not None:
        parts.append(reshape(trace.unary_scores, (n,)))
    if not parts:
        return _zero()
    flat = parts[0] if len(parts) == 1 else concat(parts)

    def flat_index(row: int, col: int) -> Optional[int]:
        if col == m + row:
            return pair_len + row
        return trace.pair_index.get((row, col))

    pos_idx: List[int] = []
    neg_idx: List[int] = []
    for i, positives in enumerate(labels.positive_cols):
        if not positives:
            continue
        pos_flat = [flat_index(i, c) for c in positives]
        pos_flat = [p for p in pos_flat if p is not None]
        finite = [trace.pair_index[(i, j)] for j in range(m)
                  if (i, j) in trace.pair_index] + [pair_len + i]
        negs = [f for f in finite if f not in pos_flat]
        for p in pos_flat:
            for q in negs:
                pos_idx.append(p)
                neg_idx.append(q)
    return _hinge_mean(flat, pos_idx, neg_idx, margin)


def _sot_loss(trace: StepTrace, labels: AssociationLabels,
              gt_frames: Sequence[GtFrame],
              cache: Dict[int, Dict[int, GtRecord]], margin: float) -> Node:
    col_of = {c.track_id: j for j, c in enumerate(trace.columns)}
    parts: List[Node] = []
    sizes: List[int] = []
    pos_idx: List[int] = []
    neg_idx: List[int] = []
    for ev in trace.sot_events:
        if ev.scores is None:
            continue
        gid = labels.track_gt[col_of[ev.track_id]]
        if gid is None:
            continue
        rec = _record_index(gt_frames, cache, trace.frame).get(gid)
        if rec is None:
            continue
        target = np.array([rec.box.u, rec.box.v])
        inside = np.all(np.abs(ev.centers - target) <= 0.5 * ev.cell_size + 1e-9,
                        axis=1)
        hits = np.flatnonzero(inside)
        if hits.size == 0:
            continue                 # true position left the search window
        k = len(ev.centers)
        base = sum(sizes)
        pos = base + int(hits[0])
        for j in range(k):
            if base + j != pos:
                pos_idx.append(pos)
                neg_idx.append(base + j)
        parts.append(reshape(ev.scores, (k,)))
        sizes.append(k)
    if not parts or not pos_idx:
        return _zero()
    flat = parts[0] if len(parts) == 1 else concat(parts)
    return _hinge_mean(flat, pos_idx, neg_idx, margin)


def assemble_frame_loss(trace: StepTrace, gt_frames: Sequence[GtFrame],
                        margin: float = 0.2) -> Dict[str, Node]:
    """Build every loss component for one traced frame as graph nodes."""
    cache: Dict[int, Dict[int, GtRecord]] = {}
    labels = supervise_association(trace.detections, trace.columns,
                                   gt_frames, trace.frame)
    out: Dict[str, Node] = {
        "affinity": _affinity_loss(trace, labels, margin),
        "sot": _sot_loss(trace, labels, gt_frames, cache, margin),
        "rank": _zero(), "refine": _zero(), "forecast": _zero(),
    }
    events = trace.updates
    if not events or trace.refine_out is None:
        return out
    k = len(events)
    window = (trace.refine_out.value.shape[1] - 1) // 2

    matched = _match_boxes([ev.post_box for ev in events],
                           [ev.cls for ev in events],
                           gt_frames[trace.frame].records, min_iou=0.0)
    ious = [v for _, v in matched]
    rank_pairs = [(p, q) for p in range(k) for q in range(k)
                  if ious[p] > ious[q]]
    if rank_pairs:
        scores = reshape(narrow(trace.refine_out, 0, 1), (k,))
        out["rank"] = _hinge_mean(scores, [p for p, _ in rank_pairs],
                                  [q for _, q in rank_pairs], margin)

    ref_target = np.zeros((k, window, 2))
    ref_mask = np.zeros((k, window, 2))
    fc_target = np.zeros((k, FORECAST_STEPS, 2))
    fc_mask = np.zeros((k, FORECAST_STEPS, 2))
    for ev, (gid, iou) in zip(events, matched):
        if gid is None or iou < MATCH_IOU:
            continue
        for w, (f_s, pre_pos) in enumerate(ev.window):
            rec = _record_index(gt_frames, cache, f_s).get(gid)
            if rec is None:
                continue
            ref_target[ev.row, w] = np.array([rec.box.u, rec.box.v]) - pre_pos
            ref_mask[ev.row, w] = 1.0
        rec_now = _record_index(gt_frames, cache, trace.frame).get(gid)
        if rec_now is None:
            continue
        here = np.array([ev.post_box.u, ev.post_box.v])
        for s, fut in enumerate(rec_now.future):
            if fut is None:
                continue
            fc_target[ev.row, s] = fut - here
            fc_mask[ev.row, s] = 1.0

    offsets = reshape(narrow(trace.refine_out, 1, 2 * window), (k, window, 2))
    out["refine"] = _masked_smooth_l1(offsets, ref_target, ref_mask)
    if trace.predict_out is not None:
        pred = reshape(trace.predict_out, (k, FORECAST_STEPS, 2))
        out["forecast"] = _masked_smooth_l1(pred, fc_target, fc_mask)
    return out


# ===== clip sampling =====


# compact world for training rollouts; full-size evaluation still works
# because the model only ever sees local crops and relative positions
DEFAULT_TRAIN_SIM = SimConfig(num_frames=50, roi_half=16.0,
                              n_vehicles=3, n_pedestrians=1)


@dataclass
class Clip:
    scenario: Scenario
    dets: List[List[Detection]]
    grids: List[FeatureGrid]
    gt_frames: List[GtFrame]


class ClipSampler:
    """Deterministic (step, clip) -> Clip factory.

    Scenarios run `horizon` frames past the training window so forecast
    targets at the last supervised frame still exist.
    """

    def __init__(self, sim: Optional[SimConfig] = None,
                 noise: Optional[NoiseConfig] = None,
                 clip_len: int = 20, seed: int = 0):
        base = sim if sim is not None else DEFAULT_TRAIN_SIM
        horizon = int(round(3.0 * base.frame_rate))
        self.sim = replace(base, num_frames=clip_len + horizon)
        self.sim.validate()
        self.noise = noise if noise is not None else NoiseConfig()
        self.noise.validate()
        self.clip_len = clip_len
        self.seed = seed

    def __call__(self, step: int, clip: int) -> Clip:
        mix = np.random.SeedSequence((self.seed, step, clip))
        scenario = generate_scenario(self.sim, int(mix.generate_state(1)[0]))
        dets = [pseudo_detect(scenario, f, self.noise)
                for f in range(self.clip_len)]
        grids = [render_feature_grid(scenario, f, noise=self.noise)
                 for f in range(self.clip_len)]
        return Clip(scenario, dets, grids, make_gt_frames(scenario))


# ===== training loop =====


@dataclass
class LossReport:
    """Mean per-frame loss components for one optimization step."""

    step: int
    affinity: float
    sot: float
    rank: float
    refine: float
    forecast: float
    total: float

    def as_row(self) -> List[float]:
        return [self.step, self.affinity, self.sot, self.rank,
                self.refine, self.forecast, self.total]


@dataclass
class TrainConfig:
    steps: int = 400
    batch_clips: int = 4
    clip_len: int = 20
    lr: float = 1e-3
    margin: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.batch_clips < 1 or self.clip_len < 1:
            raise ConfigError("batch_clips and clip_len must be positive")
        if self.lr <= 0.0:
            raise ConfigError("lr must be positive")
        if self.margin < 0.0:
            raise ConfigError("margin must be non-negative")


def train(params: ParamStore, cfg: TrainConfig,
          sampler: Optional[ClipSampler] = None,
          tracker_cfg: Optional[TrackerConfig] = None,
          on_step: Optional[Callable[[LossReport], None]] = None,
          ) -> Tuple[ParamStore, List[LossReport]]:
    """Optimize tracker parameters on online rollouts.

    Each step rolls `batch_clips` fresh clips of `clip_len` frames.  Every
    frame contributes one backward pass scaled by 1 / (batch * length);
    Adam applies once per step.  Raises TrainingError naming the component
    if any loss term goes non-finite.
    """
    cfg.validate()
    sampler = sampler if sampler is not None else ClipSampler(
        clip_len=cfg.clip_len, seed=cfg.seed)
    tracker_cfg = tracker_cfg if tracker_cfg is not None else TrackerConfig()
    tracker_cfg.validate()
    curves: List[LossReport] = []
    norm = 1.0 / float(cfg.batch_clips * cfg.clip_len)
    for step in range(cfg.steps):
        sums = dict.fromkeys(LOSS_KEYS, 0.0)
        for c in range(cfg.batch_clips):
            clip = sampler(step, c)
            sim = clip.scenario.config
            tracks: List[Track] = []
            next_id = 0
            for f in range(cfg.clip_len):
                tape = Tape(params)
                res = track_step(tracks, clip.dets[f], clip.grids[f],
                                 clip.scenario.egos[max(f - 1, 0)],
                                 clip.scenario.egos[f],
                                 params, tracker_cfg, frame=f, dt=sim.dt,
                                 next_id=next_id, tape=tape, collect=True)
                tracks, next_id = res.tracks, res.next_id
                losses = assemble_frame_loss(res.trace, clip.gt_frames,
                                             margin=cfg.margin)
                total: Optional[Node] = None
                for key in LOSS_KEYS:
                    node = losses[key]
                    val = float(node.value)
                    if not math.isfinite(val):
                        raise TrainingError(
                            f"{key} loss is not finite at step {step}")
                    sums[key] += val
                    total = node if total is None else add(total, node)
                tape.backward_into_store(scale(total, norm))
        adam_step(params, cfg.lr)
        report = LossReport(step=step, total=sum(sums.values()) * norm,
                            **{k: sums[k] * norm for k in LOSS_KEYS})
        curves.append(report)
        if on_step is not None:
            on_step(report)
    return params, curves


def write_curves(path: str, curves: Sequence[LossReport]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", *LOSS_KEYS, "total"])
        for rep in curves:
            w.writerow([rep.as_row()[0]] + [f"{v:.6f}" for v in rep.as_row()[1:]])
