"""Scenario-level rollout drivers: simulator in, FrameLogs out."""
from __future__ import annotations

from typing import Dict, List, Optional, Sequence, Tuple

from .errors import ConfigError
from .forecast import cv_baseline
from .logs import FrameLog
from .neural import ParamStore
from .simkit import (Detection, NoiseConfig, Scenario, SimConfig,
                     generate_scenario, pseudo_detect, render_feature_grid)
from .trackcore import (KfConfig, TrackerConfig, kf_track_step, track_step)

# Inference-time variants; all learned ones share one checkpoint.
TRACKER_VARIANTS = ("pnp", "kf", "pnp-no-sot", "pnp-no-motion",
                    "pnp-no-rescore", "pnp-no-refine")


def tracker_config(variant: str) -> Optional[TrackerConfig]:
    """TrackerConfig for a variant name; None selects the Kalman baseline."""
    if variant == "kf":
        return None
    flags = {"pnp": {}, "pnp-no-sot": {"sot": False},
             "pnp-no-motion": {"motion": False},
             "pnp-no-rescore": {"rescore": False},
             "pnp-no-refine": {"refine": False}}
    if variant not in flags:
        raise ConfigError(f"unknown tracker variant {variant!r}; "
                          f"choose from {', '.join(TRACKER_VARIANTS)}")
    return TrackerConfig(**flags[variant])


def simulate(cfg: SimConfig, noise: NoiseConfig,
             seed: int) -> Tuple[Scenario, List[List[Detection]]]:
    """Generate a scenario and its full pseudo-detection stream."""
    scenario = generate_scenario(cfg, seed)
    dets = [pseudo_detect(scenario, f, noise) for f in range(cfg.num_frames)]
    return scenario, dets


def run_tracker(scenario: Scenario, dets_per_frame: Sequence[Sequence[Detection]],
                params: Optional[ParamStore], variant: str = "pnp",
                noise: Optional[NoiseConfig] = None,
                forecaster: str = "learned",
                kf_cfg: Optional[KfConfig] = None,
                tracker_cfg: Optional[TrackerConfig] = None) -> List[FrameLog]:
    """Roll one tracker over a full scenario.

    `noise` controls only the rendered feature grid (noise channels and
    false-positive imprints); detections come from `dets_per_frame` as-is.
    The forecaster choice does not feed back into tracking, so "learned"
    and "cv" runs produce identical boxes and ids.  `tracker_cfg`, when
    given, replaces the per-variant config (used by history-length sweeps).
    """
    if variant == "kf":
        return run_kf(scenario, dets_per_frame, kf_cfg)
    cfg = tracker_cfg if tracker_cfg is not None else tracker_config(variant)
    if params is None:
        raise ConfigError(f"variant {variant!r} needs model parameters")
    if forecaster not in ("learned", "cv"):
        raise ConfigError(f"unknown forecaster {forecaster!r}")
    sim = scenario.config
    logs: List[FrameLog] = []
    tracks, next_id = [], 0
    for f in range(sim.num_frames):
        grid = render_feature_grid(scenario, f, noise=noise)
        res = track_step(tracks, dets_per_frame[f], grid,
                         scenario.egos[max(f - 1, 0)], scenario.egos[f],
                         params, cfg, frame=f, dt=sim.dt, next_id=next_id)
        tracks, next_id = res.tracks, res.next_id
        if forecaster == "cv":
            by_id = {tr.track_id: tr for tr in tracks}
            for rec in res.framelog.tracks:
                rec.forecast = cv_baseline(by_id[rec.track_id]).offsets
        logs.append(res.framelog)
    return logs


def run_kf(scenario: Scenario, dets_per_frame: Sequence[Sequence[Detection]],
           kf_cfg: Optional[KfConfig] = None) -> List[FrameLog]:
    kf_cfg = kf_cfg or KfConfig()
    sim = scenario.config
    logs: List[FrameLog] = []
    tracks, next_id = [], 0
    for f in range(sim.num_frames):
        tracks, log, next_id = kf_track_step(tracks, dets_per_frame[f], kf_cfg,
                                             frame=f, dt=sim.dt,
                                             ego=scenario.egos[f],
                                             next_id=next_id)
        logs.append(log)
    return logs
