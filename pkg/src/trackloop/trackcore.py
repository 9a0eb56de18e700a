"""Discrete-continuous multi-object tracker over bird's-eye-view boxes.

Association couples a learned pairwise affinity with an exact bipartite
solve; unmatched tracks fall back to a single-object search over nearby
feature-grid cells; a refinement head then rescores every updated track
and nudges its recent waypoints.  A constant-velocity Kalman baseline
lives alongside under the same FrameLog contract.

All learned evaluations run through `neural` tape nodes.  In inference the
tape is created locally and discarded; in training the caller passes one
tape per frame and receives a `StepTrace` holding the score nodes that the
loss needs, so gradients stop at the previous frame's stored hidden state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError
from .geometry import (BevBox, EgoState, nms, point_to_ego, point_to_global,
                       rotation, wrap_angle)
from .logs import FrameLog, TrackRecord
from .neural import (LstmState, Node, ParamStore, Tape, bilinear_interp,
                     concat, constant, gather_rows, init_lstm, init_mlp,
                     lstm_apply, lstm_step, mlp_forward)
from .simkit import CLASS_VMAX, Detection, FeatureGrid

MERGED_DIM = 64
LSTM_HIDDEN = 128
MLP_HIDDEN = 128
MOTION_DIM = 6          # object velocity, ego velocity, cos/sin ego yaw rate


@dataclass
class TrackerConfig:
    """Knobs for the learned tracker; the flags switch ablation variants."""

    max_tracks: int = 50        # per class, after NMS
    max_dets: int = 50          # per class, before association
    nms_iou: float = 0.1
    history_cap: int = 16       # stored waypoints per track
    refine_window: int = 4      # most recent frames the refine head may move
    max_occlusion: int = 10     # consecutive unobserved frames before death
    kill_score: float = -2.0
    sot: bool = True            # recover unmatched tracks by grid search
    motion: bool = True         # feed motion features (off: zeros)
    rescore: bool = True        # replace track score with the refine logit
    refine: bool = True         # apply waypoint offsets
    # rebuild the recurrent state from the stored feature window instead of
    # carrying it forward, so history_cap truly bounds track memory
    windowed_memory: bool = False

    def validate(self) -> None:
        if self.max_tracks < 1 or self.max_dets < 1:
            raise ConfigError("track and detection caps must be positive")
        if not 0.0 <= self.nms_iou <= 1.0:
            raise ConfigError(f"nms_iou {self.nms_iou} outside [0, 1]")
        if self.history_cap < 1:
            raise ConfigError("history_cap must be positive")
        if self.refine_window < 1 or self.refine_window > self.history_cap:
            raise ConfigError("refine_window must be in [1, history_cap]")
        if self.max_occlusion < 0:
            raise ConfigError("max_occlusion must be >= 0")


@dataclass
class TrackState:
    """One stored waypoint, in the ego frame of its own timestamp."""

    frame: int
    box: BevBox
    source: str             # "detected" or "sot"
    refined: bool = False
    feature: Optional[np.ndarray] = None   # merged observation, for replays


@dataclass
class Track:
    track_id: int
    cls: str
    states: List[TrackState]
    last_ego: EgoState      # ego pose at states[-1].frame
    lstm: LstmState
    velocity: np.ndarray    # ego-frame m/s, finite difference; newborn: zero
    score: float
    det_score: float        # score of the last matched detection
    age: int = 1
    frames_since_observed: int = 0

    @property
    def last_state(self) -> TrackState:
        return self.states[-1]

    @property
    def current_box(self) -> BevBox:
        return self.states[-1].box

    def append_state(self, state: TrackState, ego: EgoState, cap: int) -> None:
        self.states.append(state)
        self.last_ego = ego
        if len(self.states) > cap:
            del self.states[: len(self.states) - cap]


@dataclass
class AffinityMatrix:
    """N x (M + N) association scores; -inf marks forbidden entries."""

    values: np.ndarray


# ===== trace structures for training =====


@dataclass
class ColumnSnap:
    """Pre-step snapshot of one affinity column's track."""

    track_id: int
    cls: str
    last_frame: int
    last_box: BevBox


@dataclass
class SotEvent:
    track_id: int
    cls: str
    last_frame: int
    last_box: BevBox
    centers: np.ndarray     # (K, 2) candidate cell centers, current ego frame
    cell_size: float
    scores: Optional[Node]  # (K, 1)
    chosen: int


@dataclass
class UpdateEvent:
    """One track that received a new state this frame."""

    row: int                # row in refine_out / predict_out
    track_id: int
    cls: str
    frame: int
    window: List[Tuple[int, np.ndarray]]   # (frame, pre-refine position)
    post_box: BevBox        # current box after refinement


@dataclass
class StepTrace:
    """Score nodes and labeling context from one track_step call."""

    frame: int
    tape: Tape
    detections: List[Detection]
    columns: List[ColumnSnap]
    pair_scores: Optional[Node]            # (P, 1) same-class pairs
    pair_rows: np.ndarray
    pair_cols: np.ndarray
    pair_index: Dict[Tuple[int, int], int]
    unary_scores: Optional[Node]           # (N, 1)
    sot_events: List[SotEvent] = field(default_factory=list)
    refine_out: Optional[Node] = None      # (K, 1 + 2 * refine_window)
    predict_out: Optional[Node] = None     # (K, 12)
    updates: List[UpdateEvent] = field(default_factory=list)


@dataclass
class StepResult:
    tracks: List["Track"]
    framelog: FrameLog
    next_id: int
    trace: Optional[StepTrace] = None


# ===== model =====


def init_tracker_model(store: Optional[ParamStore] = None, channels: int = 32,
                       seed: int = 0, hidden: int = MLP_HIDDEN,
                       merged: int = MERGED_DIM, lstm_hidden: int = LSTM_HIDDEN,
                       refine_window: int = 4) -> ParamStore:
    """Register every learned function of the tracker in one store.

    Layer widths are free parameters; everything downstream reads sizes
    back from the store, so a checkpoint fully determines the model.
    """
    if store is None:
        store = ParamStore()
    hid = hidden
    init_mlp(store, "merge", [channels + MOTION_DIM, hid, hid, merged], seed)
    init_mlp(store, "pair", [merged + lstm_hidden, hid, hid, 1], seed)
    init_mlp(store, "unary", [merged, hid, hid, 1], seed)
    init_lstm(store, "lstm", merged, lstm_hidden, seed)
    init_mlp(store, "refine", [lstm_hidden, hid, hid, 1 + 2 * refine_window], seed)
    init_mlp(store, "predict", [lstm_hidden, hid, hid, 12], seed)
    return store


def _hidden_dim(params: ParamStore) -> int:
    # lstm bias stacks the four gates
    return params.values["lstm.b"].size // 4


def _merged_features(tape: Tape, grid: FeatureGrid, gnode: Node,
                     centers: np.ndarray, velocities: np.ndarray,
                     ego: EgoState, motion_on: bool) -> Node:
    """Batched merge of interpolated grid features with motion features.

    centers, velocities: (k, 2) in the current ego frame.  Returns (k, 64).
    """
    pts = grid.metric_to_grid(centers)
    bev = bilinear_interp(gnode, pts)
    k = centers.shape[0]
    motion = np.zeros((k, MOTION_DIM))
    if motion_on:
        ego_vel = rotation(ego.heading).T @ np.array([ego.vx, ego.vy])
        motion[:, 0:2] = velocities
        motion[:, 2:4] = ego_vel
        motion[:, 4] = math.cos(ego.omega)
        motion[:, 5] = math.sin(ego.omega)
    return mlp_forward(tape, "merge", concat([bev, constant(motion)]))


def detection_feature(det: Detection, grid: FeatureGrid,
                      track_velocity: np.ndarray, ego: EgoState,
                      params: ParamStore) -> np.ndarray:
    """Merged feature of one detection under one velocity hypothesis."""
    tape = Tape(params)
    out = _merged_features(tape, grid, constant(grid.values),
                           np.array([[det.box.u, det.box.v]]),
                           np.asarray(track_velocity, dtype=float).reshape(1, 2),
                           ego, motion_on=True)
    return out.value[0].copy()


def update_trajectory_repr(track: Track, new_feature: np.ndarray,
                           params: ParamStore) -> LstmState:
    """Advance the track's recurrent state by one frame and store it."""
    tape = Tape(params)
    h, c = lstm_step(tape, "lstm", constant(np.asarray(new_feature, dtype=float)),
                     constant(track.lstm.hidden), constant(track.lstm.cell))
    track.lstm = LstmState(h.value.copy(), c.value.copy())
    return track.lstm


def _compensated_last(track: Track, ego_cur: EgoState) -> np.ndarray:
    """Track's last stored position re-expressed in the current ego frame."""
    st = track.last_state
    g = point_to_global(np.array([st.box.u, st.box.v]), track.last_ego)
    return point_to_ego(g, ego_cur)


@dataclass
class _AffinityParts:
    values: np.ndarray
    merged: Optional[Node]      # (P + N, 64): pair rows then unary rows
    pair_scores: Optional[Node]
    pair_rows: np.ndarray
    pair_cols: np.ndarray
    pair_index: Dict[Tuple[int, int], int]
    unary_scores: Optional[Node]
    unary_base: int             # row offset of the first unary row in merged


def _affinity_parts(detections: Sequence[Detection], tracks: Sequence[Track],
                    grid: FeatureGrid, ego: EgoState, params: ParamStore,
                    dt: float, frame: int, tape: Tape,
                    motion_on: bool) -> _AffinityParts:
    n, m = len(detections), len(tracks)
    values = np.full((n, m + n), -np.inf)
    empty = np.zeros(0, dtype=int)
    if n == 0:
        return _AffinityParts(values, None, None, empty, empty, {}, None, 0)

    det_centers = np.array([[d.box.u, d.box.v] for d in detections])
    comp = [_compensated_last(tr, ego) for tr in tracks]
    elapsed = [max(frame - tr.last_state.frame, 1) * dt for tr in tracks]

    pair_rows: List[int] = []
    pair_cols: List[int] = []
    pair_vel: List[np.ndarray] = []
    for i, det in enumerate(detections):
        for j, tr in enumerate(tracks):
            if tr.cls != det.cls:
                continue    # cross-class association is forbidden
            pair_rows.append(i)
            pair_cols.append(j)
            pair_vel.append((det_centers[i] - comp[j]) / elapsed[j])
    p = len(pair_rows)
    pair_rows_a = np.array(pair_rows, dtype=int)
    pair_cols_a = np.array(pair_cols, dtype=int)

    centers = np.concatenate([det_centers[pair_rows_a] if p else det_centers[:0],
                              det_centers])
    vels = np.concatenate([np.array(pair_vel).reshape(p, 2), np.zeros((n, 2))])
    gnode = constant(grid.values)
    merged = _merged_features(tape, grid, gnode, centers, vels, ego, motion_on)

    pair_scores = None
    if p:
        hidden = np.stack([tracks[j].lstm.hidden for j in pair_cols])
        pair_in = concat([narrow_rows(merged, 0, p), constant(hidden)])
        pair_scores = mlp_forward(tape, "pair", pair_in)
        values[pair_rows_a, pair_cols_a] = pair_scores.value[:, 0]
    unary_scores = mlp_forward(tape, "unary", narrow_rows(merged, p, n))
    values[np.arange(n), m + np.arange(n)] = unary_scores.value[:, 0]

    pair_index = {(int(r), int(c)): k
                  for k, (r, c) in enumerate(zip(pair_rows_a, pair_cols_a))}
    return _AffinityParts(values, merged, pair_scores, pair_rows_a, pair_cols_a,
                          pair_index, unary_scores, p)


def narrow_rows(a: Node, start: int, length: int) -> Node:
    return gather_rows(a, np.arange(start, start + length))


def build_affinity(detections: Sequence[Detection], tracks: Sequence[Track],
                   grid: FeatureGrid, ego: EgoState, params: ParamStore,
                   dt: float = 0.1, frame: Optional[int] = None) -> AffinityMatrix:
    """Association scores: pair terms, a unary new-birth diagonal, -inf rest."""
    if frame is None:
        frame = detections[0].frame if detections else 0
    parts = _affinity_parts(detections, tracks, grid, ego, params,
                            dt=dt, frame=frame, tape=Tape(params), motion_on=True)
    return AffinityMatrix(parts.values)


def hungarian(affinity: AffinityMatrix) -> Dict[int, int]:
    """Maximum-total-affinity assignment of each row to a distinct column.

    -inf entries are replaced by a sentinel below any reachable total, so
    they are never chosen (each row's own virtual column is always finite).
    """
    v = affinity.values
    if v.shape[0] == 0:
        return {}
    finite = v[np.isfinite(v)]
    big = 2.0 * float(np.abs(finite).sum()) + 1.0
    rows, cols = linear_sum_assignment(np.where(np.isfinite(v), v, -big),
                                       maximize=True)
    return {int(r): int(c) for r, c in zip(rows, cols)}


# ===== single-object recovery =====


def _sot_candidates(grid: FeatureGrid, center: np.ndarray,
                    radius: float) -> Optional[np.ndarray]:
    """Cell centers within `radius` of `center`, row-major order, or None."""
    h, w, _ = grid.values.shape
    ox, oy = float(grid.origin[0]), float(grid.origin[1])
    cell = grid.cell_size
    row_lo = max(0, math.ceil((center[1] - radius - oy) / cell))
    row_hi = min(h - 1, math.floor((center[1] + radius - oy) / cell))
    col_lo = max(0, math.ceil((center[0] - radius - ox) / cell))
    col_hi = min(w - 1, math.floor((center[0] + radius - ox) / cell))
    if row_lo > row_hi or col_lo > col_hi:
        return None
    rr, cc = np.meshgrid(np.arange(row_lo, row_hi + 1),
                         np.arange(col_lo, col_hi + 1), indexing="ij")
    centers = np.stack([ox + cc.ravel() * cell, oy + rr.ravel() * cell], axis=1)
    keep = np.hypot(centers[:, 0] - center[0], centers[:, 1] - center[1]) <= radius + 1e-9
    if not np.any(keep):
        return None
    return centers[keep]


@dataclass
class _SotOutcome:
    detection: Detection
    velocity: np.ndarray
    feature: Node           # (1, 64) merged feature of the chosen cell
    event: Optional[SotEvent]


def _sot_attempt(track: Track, grid: FeatureGrid, ego_cur: EgoState,
                 params: ParamStore, dt: float, frame: int, tape: Tape,
                 motion_on: bool, collect: bool) -> Optional[_SotOutcome]:
    comp = _compensated_last(track, ego_cur)
    radius = CLASS_VMAX[track.cls] * dt
    centers = _sot_candidates(grid, comp, radius)
    if centers is None:
        return None
    elapsed = max(frame - track.last_state.frame, 1) * dt
    vels = (centers - comp) / elapsed
    merged = _merged_features(tape, grid, constant(grid.values), centers, vels,
                              ego_cur, motion_on)
    hidden = np.broadcast_to(track.lstm.hidden,
                             (centers.shape[0], track.lstm.hidden.size))
    scores = mlp_forward(tape, "pair", concat([merged, constant(hidden)]))
    chosen = int(np.argmax(scores.value[:, 0]))    # first max, row-major cells

    last = track.last_state.box
    theta = wrap_angle(last.theta + track.last_ego.heading - ego_cur.heading)
    box = BevBox(float(centers[chosen, 0]), float(centers[chosen, 1]),
                 last.w, last.l, theta)
    det = Detection(box=box, score=track.score, frame=frame, cls=track.cls)
    event = None
    if collect:
        event = SotEvent(track_id=track.track_id, cls=track.cls,
                         last_frame=track.last_state.frame,
                         last_box=BevBox(last.u, last.v, last.w, last.l, last.theta),
                         centers=centers, cell_size=grid.cell_size,
                         scores=scores, chosen=chosen)
    return _SotOutcome(det, vels[chosen], gather_rows(merged, np.array([chosen])),
                       event)


def sot_recover(track: Track, grid: FeatureGrid, ego_prev: EgoState,
                ego_cur: EgoState, params: ParamStore,
                dt: float = 0.1, frame: Optional[int] = None) -> Optional[Detection]:
    """Search grid cells near the coasted position for the lost object.

    `ego_prev` is the pose the track's last state was expressed in; the
    stored per-state pose generalizes it when frames were skipped, so it is
    accepted for contract shape but the snapshot is what is used.  Returns
    None when the whole neighborhood lies outside the grid.
    """
    if frame is None:
        frame = track.last_state.frame + 1
    out = _sot_attempt(track, grid, ego_cur, params, dt=dt, frame=frame,
                       tape=Tape(params), motion_on=True, collect=False)
    return None if out is None else out.detection


# ===== refinement =====


def _apply_refinement(track: Track, vec: np.ndarray, window: int,
                      apply_offsets: bool) -> List[Tuple[int, np.ndarray]]:
    """Shift the most recent waypoints by the head's offsets.

    vec: (1 + 2*window,) output, score first, then (du, dv) pairs ordered
    oldest-refined to newest.  Tracks shorter than the window use only the
    leading pairs.  Returns the pre-refinement window for supervision.
    """
    states = track.states[-window:]
    pre = [(st.frame, np.array([st.box.u, st.box.v])) for st in states]
    if apply_offsets:
        offs = vec[1:1 + 2 * len(states)].reshape(len(states), 2)
        for st, (du, dv) in zip(states, offs):
            st.box = BevBox(st.box.u + du, st.box.v + dv,
                            st.box.w, st.box.l, st.box.theta)
            st.refined = True
    return pre


def refine_and_score(track: Track, params: ParamStore,
                     window: int = 4,
                     apply_offsets: bool = True) -> Tuple[float, np.ndarray]:
    """Score the track and nudge its recent waypoints from the hidden state."""
    tape = Tape(params)
    out = mlp_forward(tape, "refine", constant(track.lstm.hidden))
    vec = out.value
    k = min(window, len(track.states))
    _apply_refinement(track, vec, window, apply_offsets)
    return float(vec[0]), vec[1:1 + 2 * k].reshape(k, 2).copy()


# ===== the per-frame step =====


def _cap_detections(detections: Sequence[Detection], cap: int) -> List[Detection]:
    """Keep the top-scoring `cap` per class, preserving input order."""
    by_cls: Dict[str, List[int]] = {}
    for i, d in enumerate(detections):
        by_cls.setdefault(d.cls, []).append(i)
    keep = set()
    for idxs in by_cls.values():
        ranked = sorted(idxs, key=lambda i: (-detections[i].score, i))
        keep.update(ranked[:cap])
    return [d for i, d in enumerate(detections) if i in keep]


def track_step(tracks: List[Track], detections: Sequence[Detection],
               grid: FeatureGrid, ego_prev: EgoState, ego_cur: EgoState,
               params: ParamStore, cfg: TrackerConfig, *,
               frame: int, dt: float, next_id: int = 0,
               tape: Optional[Tape] = None, collect: bool = False) -> StepResult:
    """One tracker frame: associate, recover, update, refine, prune.

    Mutates the passed tracks; returns the surviving list (original order,
    newborns appended), the FrameLog for this frame, and the next unused
    track id.  With `collect` the returned trace carries the score nodes on
    `tape` for loss assembly.
    """
    if tape is None:
        tape = Tape(params)
    dets = _cap_detections(detections, cfg.max_dets)
    n, m = len(dets), len(tracks)

    parts = _affinity_parts(dets, tracks, grid, ego_cur, params,
                            dt=dt, frame=frame, tape=tape, motion_on=cfg.motion)
    assignment = hungarian(AffinityMatrix(parts.values))
    det_of_col = {j: i for i, j in assignment.items() if j < m}

    columns = [ColumnSnap(tr.track_id, tr.cls, tr.last_state.frame,
                          BevBox(tr.current_box.u, tr.current_box.v,
                                 tr.current_box.w, tr.current_box.l,
                                 tr.current_box.theta))
               for tr in tracks] if collect else []

    survivors: List[Track] = []
    updates: List[Tuple[Track, Node]] = []
    sot_events: List[SotEvent] = []
    for j, tr in enumerate(tracks):
        tr.age += 1
        i = det_of_col.get(j)
        if i is not None:
            det = dets[i]
            comp = _compensated_last(tr, ego_cur)
            elapsed = max(frame - tr.last_state.frame, 1) * dt
            tr.velocity = (np.array([det.box.u, det.box.v]) - comp) / elapsed
            tr.det_score = det.score
            tr.frames_since_observed = 0
            tr.append_state(TrackState(frame, det.box, "detected"), ego_cur,
                            cfg.history_cap)
            updates.append((tr, narrow_rows(parts.merged, parts.pair_index[(i, j)], 1)))
            survivors.append(tr)
            continue
        if not cfg.sot or tr.frames_since_observed + 1 > cfg.max_occlusion:
            continue    # terminated: unobserved too long (or variant disabled)
        out = _sot_attempt(tr, grid, ego_cur, params, dt=dt, frame=frame,
                           tape=tape, motion_on=cfg.motion, collect=collect)
        tr.frames_since_observed += 1
        if out is None:
            survivors.append(tr)    # coasts without a state this frame
            continue
        tr.velocity = out.velocity
        tr.append_state(TrackState(frame, out.detection.box, "sot"), ego_cur,
                        cfg.history_cap)
        updates.append((tr, out.feature))
        if out.event is not None:
            sot_events.append(out.event)
        survivors.append(tr)

    for i in range(n):
        if assignment.get(i, -1) >= m:      # unmatched detection: new birth
            det = dets[i]
            tr = Track(track_id=next_id, cls=det.cls,
                       states=[TrackState(frame, det.box, "detected")],
                       last_ego=ego_cur, lstm=LstmState.zeros(_hidden_dim(params)),
                       velocity=np.zeros(2), score=det.score,
                       det_score=det.score)
            next_id += 1
            updates.append((tr, narrow_rows(parts.merged, parts.unary_base + i, 1)))
            survivors.append(tr)

    refine_out = None
    predict_out = None
    events: List[UpdateEvent] = []
    if updates:
        feats = concat([node for _, node in updates], axis=0) \
            if len(updates) > 1 else updates[0][1]
        if cfg.windowed_memory:
            for tr, _ in updates:
                window = [s.feature for s in tr.states[:-1]
                          if s.feature is not None]
                tr.lstm = lstm_apply(params, "lstm",
                                     window[-(cfg.history_cap - 1):]
                                     if cfg.history_cap > 1 else [])
        h0 = constant(np.stack([tr.lstm.hidden for tr, _ in updates]))
        c0 = constant(np.stack([tr.lstm.cell for tr, _ in updates]))
        h1, c1 = lstm_step(tape, "lstm", feats, h0, c0)
        refine_out = mlp_forward(tape, "refine", h1)
        predict_out = mlp_forward(tape, "predict", h1)
        for k, (tr, _) in enumerate(updates):
            tr.last_state.feature = feats.value[k].copy()
            tr.lstm = LstmState(h1.value[k].copy(), c1.value[k].copy())
            pre = _apply_refinement(tr, refine_out.value[k], cfg.refine_window,
                                    cfg.refine)
            tr.score = float(refine_out.value[k, 0]) if cfg.rescore else tr.det_score
            if collect:
                b = tr.current_box
                events.append(UpdateEvent(
                    row=k, track_id=tr.track_id, cls=tr.cls, frame=frame,
                    window=pre,
                    post_box=BevBox(b.u, b.v, b.w, b.l, b.theta)))

    survivors = [tr for tr in survivors if tr.score >= cfg.kill_score]

    current = [tr for tr in survivors if tr.last_state.frame == frame]
    keep_ids = set()
    for cls in sorted({tr.cls for tr in current}):
        group = [tr for tr in current if tr.cls == cls]
        order = nms([tr.current_box for tr in group],
                    [tr.score for tr in group], cfg.nms_iou)
        for idx in order[:cfg.max_tracks]:      # selection order is by score
            keep_ids.add(id(group[idx]))
    final = [tr for tr in survivors
             if tr.last_state.frame != frame or id(tr) in keep_ids]

    row_of = {id(tr): k for k, (tr, _) in enumerate(updates)}
    records = []
    for tr in final:
        if tr.last_state.frame != frame:
            continue
        fc = None
        if predict_out is not None:
            fc = predict_out.value[row_of[id(tr)]].reshape(6, 2).copy()
        records.append(TrackRecord(track_id=tr.track_id, box=tr.current_box,
                                   score=tr.score, source=tr.last_state.source,
                                   cls=tr.cls, forecast=fc))
    framelog = FrameLog(frame=frame, tracks=records)

    trace = None
    if collect:
        trace = StepTrace(frame=frame, tape=tape, detections=dets,
                          columns=columns, pair_scores=parts.pair_scores,
                          pair_rows=parts.pair_rows, pair_cols=parts.pair_cols,
                          pair_index=parts.pair_index,
                          unary_scores=parts.unary_scores,
                          sot_events=sot_events, refine_out=refine_out,
                          predict_out=predict_out, updates=events)
    return StepResult(tracks=final, framelog=framelog, next_id=next_id,
                      trace=trace)


# ===== constant-velocity Kalman baseline =====


@dataclass
class KfConfig:
    """Baseline tracker knobs; gate is a chi-square bound on 2 dof."""

    gate: float = 9.21
    min_hits: int = 2
    max_age: int = 10
    obs_noise: float = 0.3
    accel_noise: float = 3.0
    init_vel_var: float = 100.0

    def validate(self) -> None:
        if self.gate <= 0:
            raise ConfigError("gate must be positive")
        if self.min_hits < 1 or self.max_age < 0:
            raise ConfigError("min_hits must be >= 1 and max_age >= 0")


@dataclass
class KfTrack:
    track_id: int
    cls: str
    x: np.ndarray           # (4,) global position and velocity
    P: np.ndarray           # (4, 4) covariance
    size: Tuple[float, float]
    theta: float            # global heading
    score: float
    hits: int = 1
    time_since_update: int = 0


def _kf_matrices(dt: float, cfg: KfConfig) -> Tuple[np.ndarray, np.ndarray]:
    f = np.eye(4)
    f[0, 2] = f[1, 3] = dt
    q = cfg.accel_noise ** 2
    qb = np.array([[dt ** 4 / 4, dt ** 3 / 2], [dt ** 3 / 2, dt ** 2]]) * q
    big_q = np.zeros((4, 4))
    for axis in range(2):
        idx = np.ix_([axis, axis + 2], [axis, axis + 2])
        big_q[idx] = qb
    return f, big_q


def kf_track_step(tracks: List[KfTrack], detections: Sequence[Detection],
                  cfg: KfConfig, *, frame: int, dt: float,
                  ego: Optional[EgoState] = None,
                  next_id: int = 0) -> Tuple[List[KfTrack], FrameLog, int]:
    """Constant-velocity Kalman baseline with gated Hungarian association.

    Filtering runs in the global frame when `ego` is given (detections are
    converted on the way in and logs on the way out); without an ego the
    detection coordinates are taken as already global.
    """
    f, big_q = _kf_matrices(dt, cfg)
    h_obs = np.zeros((2, 4))
    h_obs[0, 0] = h_obs[1, 1] = 1.0
    r_obs = np.eye(2) * cfg.obs_noise ** 2

    for tr in tracks:
        tr.x = f @ tr.x
        tr.P = f @ tr.P @ f.T + big_q
        tr.time_since_update += 1

    obs = []
    for d in detections:
        p = np.array([d.box.u, d.box.v])
        theta = d.box.theta
        if ego is not None:
            p = point_to_global(p, ego)
            theta = wrap_angle(theta + ego.heading)
        obs.append((p, theta))

    n, m = len(detections), len(tracks)
    matched_det = [False] * n
    if n and m:
        cost = np.full((n, m), np.inf)
        s_inv = []
        for j, tr in enumerate(tracks):
            s = h_obs @ tr.P @ h_obs.T + r_obs
            s_inv.append(np.linalg.inv(s))
        for i, d in enumerate(detections):
            for j, tr in enumerate(tracks):
                if d.cls != tr.cls:
                    continue
                r = obs[i][0] - tr.x[:2]
                d2 = float(r @ s_inv[j] @ r)
                if d2 <= cfg.gate:
                    cost[i, j] = d2
        big = cfg.gate * (min(n, m) + 1.0)
        rows, cols = linear_sum_assignment(np.where(np.isfinite(cost), cost, big))
        for i, j in zip(rows, cols):
            if not np.isfinite(cost[i, j]):
                continue
            tr = tracks[j]
            r = obs[i][0] - h_obs @ tr.x
            s = h_obs @ tr.P @ h_obs.T + r_obs
            gain = tr.P @ h_obs.T @ np.linalg.inv(s)
            tr.x = tr.x + gain @ r
            tr.P = (np.eye(4) - gain @ h_obs) @ tr.P
            tr.hits += 1
            tr.time_since_update = 0
            tr.size = (detections[i].box.w, detections[i].box.l)
            tr.theta = obs[i][1]
            tr.score = detections[i].score
            matched_det[i] = True

    for i, d in enumerate(detections):
        if matched_det[i]:
            continue
        p0 = np.diag([cfg.obs_noise ** 2, cfg.obs_noise ** 2,
                      cfg.init_vel_var, cfg.init_vel_var])
        tracks.append(KfTrack(track_id=next_id, cls=d.cls,
                              x=np.array([obs[i][0][0], obs[i][0][1], 0.0, 0.0]),
                              P=p0, size=(d.box.w, d.box.l), theta=obs[i][1],
                              score=d.score))
        next_id += 1

    tracks = [tr for tr in tracks if tr.time_since_update <= cfg.max_age]

    records = []
    for tr in tracks:
        if tr.time_since_update != 0:
            continue
        if tr.hits < cfg.min_hits and frame + 1 > cfg.min_hits:
            continue    # probation, waived during the first min_hits frames
        p = tr.x[:2]
        theta = tr.theta
        if ego is not None:
            p = point_to_ego(p, ego)
            theta = wrap_angle(theta - ego.heading)
        records.append(TrackRecord(track_id=tr.track_id,
                                   box=BevBox(float(p[0]), float(p[1]),
                                              tr.size[0], tr.size[1], theta),
                                   score=tr.score, source="detected",
                                   cls=tr.cls, forecast=None))
    return tracks, FrameLog(frame=frame, tracks=records), next_id
