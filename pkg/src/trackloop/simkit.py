"""Synthetic scenario simulator: actors, ego motion, pseudo-detections, grids.

Everything is a deterministic function of (config, seed).  Independent random
streams are derived with SeedSequence keys so that, e.g., grid noise for a
frame does not depend on how many actors were generated.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError
from .geometry import (
    BevBox,
    EgoState,
    box_to_ego,
    box_to_global,
    rotation,
    rotated_iou,
    wrap_angle,
)

# physical speed caps (m/s) used for recovery radii and feature normalization
CLASS_VMAX: Dict[str, float] = {
    "vehicle": 110.0 / 3.6,
    "pedestrian": 12.0 / 3.6,
}

# simulator draw ranges per class: (speed lo, speed hi, turn-rate max rad/s)
_CLASS_MOTION = {
    "vehicle": (3.0, 10.0, 0.30),
    "pedestrian": (0.6, 1.8, 0.80),
}
_CLASS_KERNEL_SIGMA = {"vehicle": 0.9, "pedestrian": 0.5}

# informative grid channels; the rest carry noise only
N_SIGNAL_CHANNELS = 8

# random stream ids
_S_ACTOR, _S_EGO, _S_OCCL, _S_DETECT, _S_FPS, _S_GRID = 0, 1, 2, 3, 4, 5


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, *key]))


@dataclass
class NoiseConfig:
    """Pseudo-detector corruption model."""

    sigma_pos: float = 0.3
    sigma_theta: float = 0.05
    miss_rate: float = 0.05
    fp_rate: float = 0.5
    score_mean: float = 0.78
    score_sigma: float = 0.08
    fp_score_lo: float = 0.25
    fp_score_hi: float = 0.85
    fp_imprint_prob: float = 0.0

    def validate(self) -> None:
        if not (0.0 <= self.miss_rate < 1.0):
            raise ConfigError(f"miss_rate must be in [0, 1), got {self.miss_rate}")
        if self.fp_rate < 0.0 or self.sigma_pos < 0.0 or self.sigma_theta < 0.0:
            raise ConfigError("noise magnitudes must be non-negative")


@dataclass
class SimConfig:
    num_frames: int = 100
    frame_rate: float = 10.0
    n_vehicles: int = 4
    n_pedestrians: int = 1
    roi_half: float = 50.0
    cell_size: float = 0.5
    channels: int = 32
    grid_noise_std: float = 0.05
    occlusion_rate: float = 0.5     # expected occlusion windows per actor
    occlusion_min: int = 3
    occlusion_max: int = 8
    birth_window: int = 0           # actors are born uniformly in [0, birth_window]
    turn_scale: float = 1.0         # scales per-class turn-rate bounds; 0 = straight lines
    boundary_steer: bool = True     # steer actors back toward the ego ROI center
    ego_speed_max: float = 5.0
    ego_turn_max: float = 0.15
    seg_min: int = 10
    seg_max: int = 30

    @property
    def dt(self) -> float:
        return 1.0 / self.frame_rate

    def validate(self) -> None:
        if self.num_frames < 1:
            raise ConfigError("num_frames must be positive")
        if self.frame_rate <= 0.0:
            raise ConfigError("frame_rate must be positive")
        if self.roi_half <= 0.0 or self.cell_size <= 0.0:
            raise ConfigError("roi_half and cell_size must be positive")
        if self.channels < N_SIGNAL_CHANNELS:
            raise ConfigError(f"need at least {N_SIGNAL_CHANNELS} grid channels")
        if self.occlusion_min > self.occlusion_max or self.occlusion_min < 1:
            raise ConfigError("bad occlusion window bounds")
        if self.seg_min > self.seg_max or self.seg_min < 1:
            raise ConfigError("bad segment length bounds")


@dataclass
class GtTrajectory:
    """One actor's life in global coordinates, frame-indexed from birth."""

    gt_id: int
    cls: str
    birth_frame: int
    boxes: List[BevBox] = field(default_factory=list)
    velocities: List[np.ndarray] = field(default_factory=list)
    occlusion: List[Tuple[int, int]] = field(default_factory=list)  # inclusive windows

    @property
    def death_frame(self) -> int:
        """Last frame the actor exists (inclusive)."""
        return self.birth_frame + len(self.boxes) - 1

    def alive(self, frame: int) -> bool:
        return self.birth_frame <= frame <= self.death_frame

    def box_at(self, frame: int) -> BevBox:
        return self.boxes[frame - self.birth_frame]

    def velocity_at(self, frame: int) -> np.ndarray:
        return self.velocities[frame - self.birth_frame]

    def occluded_at(self, frame: int) -> bool:
        return any(a <= frame <= b for a, b in self.occlusion)


@dataclass
class Scenario:
    config: SimConfig
    seed: int
    egos: List[EgoState]
    actors: List[GtTrajectory]

    def alive_actors(self, frame: int) -> List[GtTrajectory]:
        return [a for a in self.actors if a.alive(frame)]

    def visible_actors(self, frame: int) -> List[GtTrajectory]:
        """Alive, not occluded, and inside the ego region of interest.

        Boundary steering keeps actors near the ego, but a slow actor can
        still fall behind a receding ego; such frames count as invisible,
        same as a scripted occlusion.
        """
        ego = self.egos[frame]
        rot_t = rotation(ego.heading).T
        out = []
        for a in self.actors:
            if not a.alive(frame) or a.occluded_at(frame):
                continue
            rel = rot_t @ (a.box_at(frame).center - ego.position)
            if float(np.max(np.abs(rel))) > self.config.roi_half:
                continue
            out.append(a)
        return out


@dataclass
class Detection:
    box: BevBox            # ego frame of `frame`
    score: float
    frame: int
    cls: str
    feature: Optional[np.ndarray] = None


@dataclass
class FeatureGrid:
    """Dense (H, W, C) feature map in the ego frame of one timestamp.

    `origin` is the metric position of the center of cell (0, 0); row index
    runs along y, column index along x.
    """

    origin: np.ndarray
    cell_size: float
    values: np.ndarray

    def metric_to_grid(self, points: np.ndarray) -> np.ndarray:
        """(k, 2) metric (x, y) -> (k, 2) continuous (row, col)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        col = (pts[:, 0] - self.origin[0]) / self.cell_size
        row = (pts[:, 1] - self.origin[1]) / self.cell_size
        return np.stack([row, col], axis=1)

    def cell_center(self, row: int, col: int) -> np.ndarray:
        return self.origin + self.cell_size * np.array([col, row], dtype=float)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.values.shape


# ===== generation =====


def _sample_motion_plan(rng: np.random.Generator, cfg: SimConfig, cls: str,
                        n_frames: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-frame (speed, turn rate) with piecewise-constant segments."""
    lo, hi, turn_max = _CLASS_MOTION[cls]
    turn_max *= cfg.turn_scale
    speeds = np.empty(n_frames)
    rates = np.empty(n_frames)
    k = 0
    speed = float(rng.uniform(lo, hi))
    while k < n_frames:
        seg = int(rng.integers(cfg.seg_min, cfg.seg_max + 1))
        rate = float(rng.uniform(-turn_max, turn_max))
        speeds[k:k + seg] = speed
        rates[k:k + seg] = rate
        k += seg
        speed = float(np.clip(speed * rng.uniform(0.85, 1.15), lo, hi))
    return speeds, rates


def _generate_ego(cfg: SimConfig, seed: int) -> List[EgoState]:
    rng = _rng(seed, _S_EGO)
    x, y = 0.0, 0.0
    heading = float(rng.uniform(-math.pi, math.pi))
    dt = cfg.dt
    speeds = np.empty(cfg.num_frames)
    rates = np.empty(cfg.num_frames)
    k = 0
    while k < cfg.num_frames:
        seg = int(rng.integers(cfg.seg_min, cfg.seg_max + 1))
        speeds[k:k + seg] = rng.uniform(0.0, cfg.ego_speed_max)
        rates[k:k + seg] = rng.uniform(-cfg.ego_turn_max, cfg.ego_turn_max)
        k += seg
    egos = []
    for f in range(cfg.num_frames):
        vx = speeds[f] * math.cos(heading)
        vy = speeds[f] * math.sin(heading)
        egos.append(EgoState(x, y, heading, vx, vy, float(rates[f])))
        x += vx * dt
        y += vy * dt
        heading = wrap_angle(heading + rates[f] * dt)
    return egos


def _steer_inward(pos: np.ndarray, ego: EgoState, rng: np.random.Generator) -> float:
    """Heading pointing back toward the ego ROI center, with jitter."""
    to_center = ego.position - pos
    return wrap_angle(math.atan2(to_center[1], to_center[0]) + float(rng.uniform(-0.4, 0.4)))


def _generate_actor(cfg: SimConfig, seed: int, idx: int, cls: str,
                    egos: List[EgoState]) -> GtTrajectory:
    rng = _rng(seed, _S_ACTOR, idx)
    if cls == "vehicle":
        w = float(rng.uniform(1.9, 2.1))
        l = float(rng.uniform(4.2, 5.0))
    else:
        w = float(rng.uniform(0.6, 0.8))
        l = float(rng.uniform(0.6, 0.8))
    birth = int(rng.integers(0, cfg.birth_window + 1)) if cfg.birth_window > 0 else 0
    birth = min(birth, cfg.num_frames - 1)
    margin = cfg.roi_half - 4.0
    ego0 = egos[birth]
    local = rng.uniform(-margin, margin, size=2)
    pos = ego0.position + rotation(ego0.heading) @ local
    heading = float(rng.uniform(-math.pi, math.pi))
    n = cfg.num_frames - birth
    speeds, rates = _sample_motion_plan(rng, cfg, cls, n)
    dt = cfg.dt
    traj = GtTrajectory(gt_id=idx, cls=cls, birth_frame=birth)
    steer_limit = cfg.roi_half - 3.0
    for k in range(n):
        ego = egos[birth + k]
        rel = rotation(ego.heading).T @ (pos - ego.position)
        if cfg.boundary_steer and np.max(np.abs(rel)) > steer_limit:
            heading = _steer_inward(pos, ego, rng)
        vel = speeds[k] * np.array([math.cos(heading), math.sin(heading)])
        traj.boxes.append(BevBox(float(pos[0]), float(pos[1]), w, l, heading))
        traj.velocities.append(vel)
        pos = pos + vel * dt
        heading = wrap_angle(heading + rates[k] * dt)
    return traj


def _sample_occlusions(cfg: SimConfig, seed: int, traj: GtTrajectory) -> None:
    rng = _rng(seed, _S_OCCL, traj.gt_id)
    n_windows = int(rng.poisson(cfg.occlusion_rate))
    windows: List[Tuple[int, int]] = []
    for _ in range(n_windows):
        dur = int(rng.integers(cfg.occlusion_min, cfg.occlusion_max + 1))
        last_start = traj.death_frame - dur + 1
        if last_start <= traj.birth_frame:
            continue
        start = int(rng.integers(traj.birth_frame + 1, last_start + 1))
        windows.append((start, start + dur - 1))
    # merge overlapping windows so occlusion state is well defined
    windows.sort()
    merged: List[Tuple[int, int]] = []
    for a, b in windows:
        if merged and a <= merged[-1][1] + 1:
            merged[-1] = (merged[-1][0], max(merged[-1][1], b))
        else:
            merged.append((a, b))
    traj.occlusion = merged


def _truncate_overlaps(actors: List[GtTrajectory]) -> List[GtTrajectory]:
    """Kill the later-born actor at the first frame two actors collide."""
    if not actors:
        return actors
    last = max(a.death_frame for a in actors)
    for f in range(last + 1):
        alive = [a for a in actors if a.alive(f)]
        for i in range(len(alive)):
            for j in range(i + 1, len(alive)):
                a, b = alive[i], alive[j]
                # a truncation earlier in this frame may have killed one of them
                if not (a.alive(f) and b.alive(f)):
                    continue
                if rotated_iou(a.box_at(f), b.box_at(f)) > 0.02:
                    victim = b if (b.birth_frame, b.gt_id) >= (a.birth_frame, a.gt_id) else a
                    keep = f - victim.birth_frame
                    del victim.boxes[keep:]
                    del victim.velocities[keep:]
    pruned = [a for a in actors if len(a.boxes) >= 2]
    for a in pruned:
        a.occlusion = [(s, min(e, a.death_frame)) for s, e in a.occlusion
                       if s <= a.death_frame]
    return pruned


def generate_scenario(cfg: SimConfig, seed: int) -> Scenario:
    """Deterministically build a scenario from (config, seed)."""
    cfg.validate()
    egos = _generate_ego(cfg, seed)
    actors = []
    for idx in range(cfg.n_vehicles + cfg.n_pedestrians):
        cls = "vehicle" if idx < cfg.n_vehicles else "pedestrian"
        actors.append(_generate_actor(cfg, seed, idx, cls, egos))
    actors = _truncate_overlaps(actors)
    for traj in actors:
        _sample_occlusions(cfg, seed, traj)
    return Scenario(config=cfg, seed=seed, egos=egos, actors=actors)


# ===== pseudo-detector =====


def _frame_false_positives(scenario: Scenario, frame: int, noise: NoiseConfig):
    """Shared FP stream so detector output and grid imprints agree."""
    cfg = scenario.config
    rng = _rng(scenario.seed, _S_FPS, frame)
    out = []
    for _ in range(int(rng.poisson(noise.fp_rate))):
        cls = "vehicle" if rng.random() < 0.5 else "pedestrian"
        if cls == "vehicle":
            w = float(rng.uniform(1.9, 2.1))
            l = float(rng.uniform(4.2, 5.0))
        else:
            w = float(rng.uniform(0.6, 0.8))
            l = float(rng.uniform(0.6, 0.8))
        box = BevBox(
            float(rng.uniform(-cfg.roi_half, cfg.roi_half)),
            float(rng.uniform(-cfg.roi_half, cfg.roi_half)),
            w, l, float(rng.uniform(-math.pi, math.pi)),
        )
        score = float(rng.uniform(noise.fp_score_lo, noise.fp_score_hi))
        imprint = bool(rng.random() < noise.fp_imprint_prob)
        out.append((box, score, cls, imprint))
    return out


def pseudo_detect(scenario: Scenario, frame: int, noise: NoiseConfig) -> List[Detection]:
    """Noisy ego-frame detections for one frame.

    Visible actors are detected with positional/heading noise and a
    per-detection miss probability; sizes are exact.  False positives are
    appended after the actor detections.
    """
    noise.validate()
    ego = scenario.egos[frame]
    rng = _rng(scenario.seed, _S_DETECT, frame)
    out: List[Detection] = []
    for traj in scenario.visible_actors(frame):
        missed = rng.random() < noise.miss_rate
        d_pos = rng.normal(0.0, noise.sigma_pos, size=2) if noise.sigma_pos > 0 else np.zeros(2)
        d_theta = float(rng.normal(0.0, noise.sigma_theta)) if noise.sigma_theta > 0 else 0.0
        d_score = float(rng.normal(0.0, noise.score_sigma)) if noise.score_sigma > 0 else 0.0
        if missed:
            continue
        b = box_to_ego(traj.box_at(frame), ego)
        out.append(Detection(
            box=BevBox(b.u + d_pos[0], b.v + d_pos[1], b.w, b.l,
                       wrap_angle(b.theta + d_theta)),
            score=float(np.clip(noise.score_mean + d_score, 0.01, 0.999)),
            frame=frame,
            cls=traj.cls,
        ))
    for box, score, cls, _ in _frame_false_positives(scenario, frame, noise):
        out.append(Detection(box=box, score=score, frame=frame, cls=cls))
    return out


# ===== feature grid =====


def render_feature_grid(scenario: Scenario, frame: int,
                        noise: Optional[NoiseConfig] = None) -> FeatureGrid:
    """Dense ego-frame feature map for one frame.

    Each visible actor leaves a Gaussian kernel imprint whose channels encode
    class, heading and velocity; occluded actors leave nothing.  A seeded
    noise field covers every channel.  When false-positive imprints are
    enabled in `noise`, the same FP draw as `pseudo_detect` is used.
    """
    cfg = scenario.config
    ego = scenario.egos[frame]
    side = int(round(2.0 * cfg.roi_half / cfg.cell_size))
    origin = np.array([-cfg.roi_half + 0.5 * cfg.cell_size,
                       -cfg.roi_half + 0.5 * cfg.cell_size])
    values = _rng(scenario.seed, _S_GRID, frame).standard_normal(
        (side, side, cfg.channels)) * cfg.grid_noise_std
    grid = FeatureGrid(origin=origin, cell_size=cfg.cell_size, values=values)

    for traj in scenario.visible_actors(frame):
        box = box_to_ego(traj.box_at(frame), ego)
        vel_ego = rotation(ego.heading).T @ traj.velocity_at(frame)
        _imprint(grid, cfg, traj.cls, np.array([box.u, box.v]), box.theta, vel_ego)
    if noise is not None and noise.fp_imprint_prob > 0.0:
        for box, _, cls, imprint in _frame_false_positives(scenario, frame, noise):
            if imprint:
                _imprint(grid, cfg, cls, np.array([box.u, box.v]), box.theta, np.zeros(2))
    return grid


def _imprint(grid: FeatureGrid, cfg: SimConfig, cls: str, center: np.ndarray,
             heading: float, vel: np.ndarray) -> None:
    sigma = _CLASS_KERNEL_SIGMA[cls]
    reach = 3.0 * sigma
    h, w, _ = grid.values.shape
    r0 = max(0, int(math.floor((center[1] - reach - grid.origin[1]) / grid.cell_size)))
    r1 = min(h - 1, int(math.ceil((center[1] + reach - grid.origin[1]) / grid.cell_size)))
    c0 = max(0, int(math.floor((center[0] - reach - grid.origin[0]) / grid.cell_size)))
    c1 = min(w - 1, int(math.ceil((center[0] + reach - grid.origin[0]) / grid.cell_size)))
    if r1 < r0 or c1 < c0:
        return
    rows = np.arange(r0, r1 + 1)
    cols = np.arange(c0, c1 + 1)
    ys = grid.origin[1] + rows * grid.cell_size
    xs = grid.origin[0] + cols * grid.cell_size
    d2 = (ys[:, None] - center[1]) ** 2 + (xs[None, :] - center[0]) ** 2
    bump = np.exp(-d2 / (2.0 * sigma * sigma))
    speed = float(np.hypot(vel[0], vel[1]))
    patch = grid.values[r0:r1 + 1, c0:c1 + 1]
    patch[:, :, 0] += bump
    patch[:, :, 1 if cls == "vehicle" else 2] += bump
    patch[:, :, 3] += bump * math.cos(heading)
    patch[:, :, 4] += bump * math.sin(heading)
    patch[:, :, 5] += bump * (speed / CLASS_VMAX[cls])
    patch[:, :, 6] += bump * (vel[0] / 10.0)
    patch[:, :, 7] += bump * (vel[1] / 10.0)


# ===== scenario serialization =====


def _box_list(b: BevBox) -> list:
    return [b.u, b.v, b.w, b.l, b.theta]


def write_scenario(path: str, scenario: Scenario, noise: NoiseConfig) -> None:
    """Write the JSON Lines interchange form (see docs/formats.md).

    The first record carries metadata; each following record is one frame
    with the ego state, ego-frame ground truth, and pseudo-detections.
    """
    cfg = scenario.config
    with open(path, "w") as f:
        meta = {"meta": {"seed": scenario.seed, "config": asdict(cfg),
                         "noise": asdict(noise)}}
        f.write(json.dumps(meta) + "\n")
        for frame in range(cfg.num_frames):
            ego = scenario.egos[frame]
            visible = set(id(t) for t in scenario.visible_actors(frame))
            gt = []
            for traj in scenario.alive_actors(frame):
                b = box_to_ego(traj.box_at(frame), ego)
                v = rotation(ego.heading).T @ traj.velocity_at(frame)
                gt.append({
                    "id": traj.gt_id,
                    "cls": traj.cls,
                    "box": _box_list(b),
                    "vel": [float(v[0]), float(v[1])],
                    # covers scripted occlusion and out-of-ROI frames alike
                    "occluded": id(traj) not in visible,
                })
            dets = [{"box": _box_list(d.box), "score": d.score, "cls": d.cls}
                    for d in pseudo_detect(scenario, frame, noise)]
            record = {
                "frame": frame,
                "ego": {"x": ego.x, "y": ego.y, "heading": ego.heading,
                        "vx": ego.vx, "vy": ego.vy, "omega": ego.omega},
                "gt": gt,
                "detections": dets,
            }
            f.write(json.dumps(record) + "\n")


def read_scenario(path: str) -> Tuple[Scenario, List[List[Detection]]]:
    """Inverse of `write_scenario`; returns the scenario and stored detections."""
    with open(path) as f:
        lines = [line for line in f if line.strip()]
    if not lines:
        raise DataError(f"{path}: empty scenario file")
    try:
        meta = json.loads(lines[0])["meta"]
    except (json.JSONDecodeError, KeyError) as e:
        raise DataError(f"{path}: missing meta record") from e
    cfg = SimConfig(**meta["config"])
    seed = int(meta["seed"])
    egos: List[EgoState] = []
    frames_gt: List[list] = []
    detections: List[List[Detection]] = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            ego = EgoState(**rec["ego"])
            egos.append(ego)
            frames_gt.append(rec["gt"])
            detections.append([
                Detection(box=BevBox(*d["box"]), score=float(d["score"]),
                          frame=rec["frame"], cls=d["cls"])
                for d in rec["detections"]
            ])
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise DataError(f"{path}:{lineno}: malformed frame record") from e
    if len(egos) != cfg.num_frames:
        raise DataError(f"{path}: expected {cfg.num_frames} frames, found {len(egos)}")

    actors: Dict[int, GtTrajectory] = {}
    occluded_frames: Dict[int, List[int]] = {}
    for frame, gt in enumerate(frames_gt):
        for entry in gt:
            gid = int(entry["id"])
            traj = actors.get(gid)
            if traj is None:
                traj = GtTrajectory(gt_id=gid, cls=entry["cls"], birth_frame=frame)
                actors[gid] = traj
                occluded_frames[gid] = []
            ego = egos[frame]
            traj.boxes.append(box_to_global(BevBox(*entry["box"]), ego))
            v = rotation(ego.heading) @ np.array(entry["vel"], dtype=float)
            traj.velocities.append(v)
            if entry["occluded"]:
                occluded_frames[gid].append(frame)
    for gid, frames in occluded_frames.items():
        windows = []
        for f in frames:
            if windows and f == windows[-1][1] + 1:
                windows[-1] = (windows[-1][0], f)
            else:
                windows.append((f, f))
        actors[gid].occlusion = windows
    scenario = Scenario(config=cfg, seed=seed, egos=egos,
                        actors=[actors[k] for k in sorted(actors)])
    return scenario, detections
