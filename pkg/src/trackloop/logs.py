"""Per-frame system output and ground-truth logs, the metrics interchange unit.

FrameLog files are JSON Lines, one record per frame (docs/formats.md).  All
boxes are in the ego frame of their own frame; forecasts are stored as
(du, dv) offsets from the track's current center at 0.5 s spacing.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .errors import DataError
from .geometry import BevBox, box_to_ego, point_to_ego
from .simkit import Detection, Scenario

FORECAST_STEPS = 6          # 3 s horizon at 0.5 s spacing
FORECAST_STEP_SECONDS = 0.5


@dataclass
class TrackRecord:
    track_id: int
    box: BevBox
    score: float
    source: str                      # "detected" | "sot"
    cls: str
    forecast: Optional[np.ndarray] = None   # (FORECAST_STEPS, 2) offsets

    def forecast_abs(self) -> np.ndarray:
        """Absolute forecast positions in this frame's ego coordinates."""
        if self.forecast is None:
            raise DataError(f"track {self.track_id} has no forecast attached")
        return self.forecast + np.array([self.box.u, self.box.v])


@dataclass
class FrameLog:
    frame: int
    tracks: List[TrackRecord] = field(default_factory=list)


@dataclass
class GtRecord:
    gt_id: int
    cls: str
    box: BevBox
    occluded: bool
    # absolute ego-frame positions at +0.5s .. +3.0s; None once the actor is gone
    future: List[Optional[np.ndarray]] = field(default_factory=list)


@dataclass
class GtFrame:
    frame: int
    records: List[GtRecord] = field(default_factory=list)


def make_gt_frames(scenario: Scenario) -> List[GtFrame]:
    """Project scenario ground truth into per-frame ego-coordinate records."""
    cfg = scenario.config
    step = int(round(FORECAST_STEP_SECONDS * cfg.frame_rate))
    if step < 1:
        raise DataError(f"frame rate {cfg.frame_rate} too low for forecast spacing")
    out: List[GtFrame] = []
    for frame in range(cfg.num_frames):
        ego = scenario.egos[frame]
        visible = set(id(t) for t in scenario.visible_actors(frame))
        gtf = GtFrame(frame=frame)
        for traj in scenario.alive_actors(frame):
            future: List[Optional[np.ndarray]] = []
            for k in range(1, FORECAST_STEPS + 1):
                fut = frame + k * step
                if traj.alive(fut):
                    b = traj.box_at(fut)
                    future.append(point_to_ego(np.array([b.u, b.v]), ego))
                else:
                    future.append(None)
            gtf.records.append(GtRecord(
                gt_id=traj.gt_id,
                cls=traj.cls,
                box=box_to_ego(traj.box_at(frame), ego),
                occluded=id(traj) not in visible,
                future=future,
            ))
        out.append(gtf)
    return out


# ===== serialization =====


def write_framelogs(path: str, framelogs: List[FrameLog]) -> None:
    with open(path, "w") as f:
        for log in framelogs:
            tracks = []
            for t in log.tracks:
                entry = {
                    "id": t.track_id,
                    "box": [t.box.u, t.box.v, t.box.w, t.box.l, t.box.theta],
                    "score": t.score,
                    "source": t.source,
                    "cls": t.cls,
                    "forecast": None if t.forecast is None
                    else [[float(a), float(b)] for a, b in t.forecast],
                }
                tracks.append(entry)
            f.write(json.dumps({"frame": log.frame, "tracks": tracks}) + "\n")


def read_framelogs(path: str) -> List[FrameLog]:
    out: List[FrameLog] = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                tracks = [
                    TrackRecord(
                        track_id=int(t["id"]),
                        box=BevBox(*t["box"]),
                        score=float(t["score"]),
                        source=t["source"],
                        cls=t["cls"],
                        forecast=None if t.get("forecast") is None
                        else np.asarray(t["forecast"], dtype=float),
                    )
                    for t in rec["tracks"]
                ]
                out.append(FrameLog(frame=int(rec["frame"]), tracks=tracks))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DataError(f"{path}:{lineno}: malformed frame log") from e
    return out


def write_detections(path: str, dets_per_frame: List[List[Detection]]) -> None:
    with open(path, "w") as f:
        for frame, dets in enumerate(dets_per_frame):
            entries = [{"box": [d.box.u, d.box.v, d.box.w, d.box.l,
                                d.box.theta],
                        "score": d.score, "cls": d.cls} for d in dets]
            f.write(json.dumps({"frame": frame, "dets": entries}) + "\n")


def read_detections(path: str) -> List[List[Detection]]:
    out: List[List[Detection]] = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out.append([Detection(box=BevBox(*d["box"]),
                                      score=float(d["score"]),
                                      frame=int(rec["frame"]), cls=d["cls"])
                            for d in rec["dets"]])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DataError(f"{path}:{lineno}: malformed detection log") from e
    return out


def write_gtlogs(path: str, gtlogs: List[GtFrame]) -> None:
    with open(path, "w") as f:
        for gtf in gtlogs:
            records = []
            for r in gtf.records:
                records.append({
                    "id": r.gt_id,
                    "cls": r.cls,
                    "box": [r.box.u, r.box.v, r.box.w, r.box.l, r.box.theta],
                    "occluded": r.occluded,
                    "future": [None if p is None else [float(p[0]), float(p[1])]
                               for p in r.future],
                })
            f.write(json.dumps({"frame": gtf.frame, "records": records}) + "\n")


def read_gtlogs(path: str) -> List[GtFrame]:
    out: List[GtFrame] = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                records = [
                    GtRecord(
                        gt_id=int(r["id"]),
                        cls=r["cls"],
                        box=BevBox(*r["box"]),
                        occluded=bool(r["occluded"]),
                        future=[None if p is None
                                else np.asarray(p, dtype=float)
                                for p in r["future"]],
                    )
                    for r in rec["records"]
                ]
                out.append(GtFrame(frame=int(rec["frame"]), records=records))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise DataError(f"{path}:{lineno}: malformed ground-truth log") from e
    return out
