"""Tracking and prediction metrics over FrameLog / GtFrame pairs.

Everything here is pure over the interchange logs: detection PR and AP,
CLEAR-MOT (MOTA, MOTP, FP, FN, IDS, FRAG, MT, ML), recall-averaged
AMOTA/AMOTP, track initialization and longest-gap durations, and
recall-conditioned forecast displacement errors.

Matching is always class-gated: a predicted box can only match ground
truth of its own class.  Ground-truth records flagged occluded still count
everywhere except detection AP with ``include_occluded=False``, where they
become ignore regions.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DataError
from .logs import FrameLog, GtFrame, GtRecord, TrackRecord
from .geometry import iou_matrix

RECALL_GRID = 40                 # targets k/40 for k = 1..40
ADE_HORIZONS = ((1.0, 1), (2.0, 3), (3.0, 5))   # seconds -> forecast index


# ===== shared per-frame pairing =====


@dataclass
class _FramePairs:
    """IoU context of one aligned (prediction, ground-truth) frame."""

    gt_ids: List[int]
    occluded: List[bool]
    pred_ids: List[int]
    scores: np.ndarray
    iou: np.ndarray              # (n_gt, n_pred), zero across classes


def _pair_frames(framelogs: Sequence[FrameLog],
                 gtlogs: Sequence[GtFrame]) -> List[_FramePairs]:
    if len(framelogs) != len(gtlogs):
        raise DataError(f"log length mismatch: {len(framelogs)} prediction "
                        f"frames vs {len(gtlogs)} ground-truth frames")
    out = []
    for log, gtf in zip(framelogs, gtlogs):
        if log.frame != gtf.frame:
            raise DataError(f"frame mismatch: prediction frame {log.frame} "
                            f"vs ground truth frame {gtf.frame}")
        iou = iou_matrix([r.box for r in gtf.records],
                         [t.box for t in log.tracks])
        for i, r in enumerate(gtf.records):
            for j, t in enumerate(log.tracks):
                if r.cls != t.cls:
                    iou[i, j] = 0.0
        out.append(_FramePairs(
            gt_ids=[r.gt_id for r in gtf.records],
            occluded=[r.occluded for r in gtf.records],
            pred_ids=[t.track_id for t in log.tracks],
            scores=np.array([t.score for t in log.tracks], dtype=float),
            iou=iou))
    return out


# ===== detection PR / AP =====


@dataclass
class PrCurve:
    ap: float
    max_recall: float
    recall: np.ndarray
    precision: np.ndarray
    scores: np.ndarray


def _pr_from_pairs(pairs: Sequence[_FramePairs], iou_threshold: float,
                   include_occluded: bool) -> PrCurve:
    ranked = []
    for f, fp in enumerate(pairs):
        for j, s in enumerate(fp.scores):
            ranked.append((-float(s), f, j))
    ranked.sort()

    n_gt = 0
    active: List[np.ndarray] = []
    for fp in pairs:
        keep = np.array([include_occluded or not o for o in fp.occluded],
                        dtype=bool)
        active.append(keep)
        n_gt += int(keep.sum())

    taken = [np.zeros(len(fp.gt_ids), dtype=bool) for fp in pairs]
    flags = []              # 1 = TP, 0 = FP, skipped entries dropped
    out_scores = []
    for neg_s, f, j in ranked:
        fp = pairs[f]
        col = fp.iou[:, j].copy()
        col[taken[f]] = 0.0
        cand = col.copy()
        cand[~active[f]] = 0.0
        best = int(np.argmax(cand)) if cand.size else -1
        if best >= 0 and cand[best] >= iou_threshold:
            taken[f][best] = True
            flags.append(1)
            out_scores.append(-neg_s)
            continue
        if not include_occluded and col.size and float(col.max()) >= iou_threshold:
            continue        # overlaps an ignored occluded object: drop
        flags.append(0)
        out_scores.append(-neg_s)

    if n_gt == 0 or not flags:
        return PrCurve(0.0, 0.0, np.zeros(0), np.zeros(0), np.zeros(0))
    tp = np.cumsum(flags)
    fp_count = np.cumsum([1 - f for f in flags])
    recall = tp / n_gt
    precision = tp / (tp + fp_count)
    # all-point interpolated area: precision envelope from the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, envelope):
        ap += (r - prev_r) * p
        prev_r = r
    return PrCurve(float(ap), float(recall[-1]), recall, precision,
                   np.asarray(out_scores))


def detection_ap(framelogs: Sequence[FrameLog], gtlogs: Sequence[GtFrame],
                 iou_threshold: float = 0.5,
                 include_occluded: bool = True) -> PrCurve:
    """Average precision over globally score-ranked boxes.

    Boxes are matched greedily in score order; each ground-truth record can
    absorb one prediction per frame.  With ``include_occluded=False``,
    occluded records are removed from the recall base and predictions lying
    on them are ignored rather than counted as false positives.
    """
    return _pr_from_pairs(_pair_frames(framelogs, gtlogs), iou_threshold,
                          include_occluded)


# ===== CLEAR-MOT =====


@dataclass
class FrameMatch:
    """Matching outcome of one frame at one threshold."""

    frame: int
    matches: List[Tuple[int, int]]       # (gt_id, pred_id)
    match_iou: List[float]
    misses: List[int]                    # unmatched gt ids
    false_positives: List[int]           # unmatched pred ids
    switches: List[int]                  # gt ids whose pred id changed
    resumptions: List[int]               # gt ids rematched after a gap


@dataclass
class MatchTrace:
    frames: List[FrameMatch] = field(default_factory=list)

    def validate(self) -> None:
        for fm in self.frames:
            gts = [g for g, _ in fm.matches]
            preds = [p for _, p in fm.matches]
            if len(set(gts)) != len(gts) or len(set(preds)) != len(preds):
                raise DataError(f"duplicate id in matches at frame {fm.frame}")


@dataclass
class MotSummary:
    mota: float
    motp: float
    fp: int
    fn: int
    ids: int
    frag: int
    mt: int
    ml: int
    gt_total: int
    n_gt_tracks: int
    recall: float


def _mot_run(pairs: Sequence[_FramePairs], iou_threshold: float,
             score_min: Optional[float] = None) -> Tuple[MotSummary, MatchTrace]:
    trace = MatchTrace()
    last_pred: Dict[int, int] = {}       # last-known association per gt id
    in_gap: Dict[int, bool] = {}
    prev_matches: Dict[int, int] = {}
    present: Dict[int, List[int]] = {}
    matched_frames: Dict[int, int] = {}
    fp = fn = ids = frag = 0
    iou_sum = 0.0
    n_match = 0
    gt_total = 0

    for f, fpair in enumerate(pairs):
        cols = list(range(len(fpair.pred_ids)))
        if score_min is not None:
            cols = [j for j in cols if fpair.scores[j] >= score_min]
        gt_ids = fpair.gt_ids
        gt_total += len(gt_ids)
        for g in gt_ids:
            present.setdefault(g, []).append(f)

        matches: List[Tuple[int, int]] = []
        match_iou: List[float] = []
        used_g, used_p = set(), set()
        # keep surviving previous pairs first
        col_of = {fpair.pred_ids[j]: j for j in cols}
        row_of = {g: i for i, g in enumerate(gt_ids)}
        for g, p in prev_matches.items():
            i, j = row_of.get(g), col_of.get(p)
            if i is None or j is None:
                continue
            if fpair.iou[i, j] >= iou_threshold:
                matches.append((g, p))
                match_iou.append(float(fpair.iou[i, j]))
                used_g.add(i)
                used_p.add(j)
        # optimal assignment for the rest
        free_g = [i for i in range(len(gt_ids)) if i not in used_g]
        free_p = [j for j in cols if j not in used_p]
        if free_g and free_p:
            sub = fpair.iou[np.ix_(free_g, free_p)]
            rr, cc = linear_sum_assignment(-sub)
            for a, b in zip(rr, cc):
                if sub[a, b] >= iou_threshold:
                    i, j = free_g[a], free_p[b]
                    matches.append((gt_ids[i], fpair.pred_ids[j]))
                    match_iou.append(float(sub[a, b]))
                    used_g.add(i)
                    used_p.add(j)

        switches, resumptions = [], []
        for (g, p), v in zip(matches, match_iou):
            if g in last_pred and last_pred[g] != p:
                switches.append(g)
                ids += 1
            if in_gap.get(g):
                resumptions.append(g)
                frag += 1
            in_gap[g] = False
            last_pred[g] = p
            matched_frames[g] = matched_frames.get(g, 0) + 1
            iou_sum += v
            n_match += 1
        misses = [g for i, g in enumerate(gt_ids) if i not in used_g]
        for g in misses:
            if g in last_pred:
                in_gap[g] = True
        fps = [fpair.pred_ids[j] for j in cols if j not in used_p]
        fn += len(misses)
        fp += len(fps)
        prev_matches = dict(matches)
        trace.frames.append(FrameMatch(frame=f, matches=matches,
                                       match_iou=match_iou, misses=misses,
                                       false_positives=fps, switches=switches,
                                       resumptions=resumptions))

    mt = ml = 0
    for g, frames in present.items():
        cover = matched_frames.get(g, 0) / len(frames)
        if cover >= 0.8:
            mt += 1
        if cover <= 0.2:
            ml += 1
    mota = 1.0 - (fp + fn + ids) / gt_total if gt_total else 0.0
    motp = 1.0 - iou_sum / n_match if n_match else 1.0
    recall = 1.0 - fn / gt_total if gt_total else 0.0
    summary = MotSummary(mota=mota, motp=motp, fp=fp, fn=fn, ids=ids,
                         frag=frag, mt=mt, ml=ml, gt_total=gt_total,
                         n_gt_tracks=len(present), recall=recall)
    return summary, trace


def clear_mot(framelogs: Sequence[FrameLog], gtlogs: Sequence[GtFrame],
              iou_threshold: float = 0.5) -> Tuple[MotSummary, MatchTrace]:
    """CLEAR-MOT scores with previous-pair persistence.

    A (gt, pred) pair from the previous frame is kept whenever it still
    clears the IoU threshold; remaining boxes get an optimal assignment.
    Identity switches compare against the last-known association, so a
    track resuming under a new id after a gap still counts as a switch.
    """
    return _mot_run(_pair_frames(framelogs, gtlogs), iou_threshold)


# ===== AMOTA / AMOTP =====


@dataclass
class AmotaRow:
    target_recall: float
    achieved: bool
    cutoff: float
    motar: float
    mota: float
    motp: float
    recall: float
    fp: int
    fn: int
    ids: int


@dataclass
class AmotaResult:
    amota: float
    amotp: float
    rows: List[AmotaRow]


def _cutoff_for_recall(pr: PrCurve, target: float) -> Optional[float]:
    """Smallest prefix of the ranked detections whose recall reaches target."""
    if pr.recall.size == 0 or pr.max_recall < target:
        return None
    k = int(np.argmax(pr.recall >= target))
    return float(pr.scores[k])


def amota_amotp(framelogs: Sequence[FrameLog], gtlogs: Sequence[GtFrame],
                iou_threshold: float = 0.5,
                n_recall: int = RECALL_GRID) -> AmotaResult:
    """Recall-averaged MOTA and MOTP over `n_recall` operating points.

    At each target recall the score cutoff achieving it (closest from
    above, via the detection PR sweep) defines one tracker operating point.
    There, with r the recall that operating point actually reaches,
    MOTAR = max(0, 1 - (FP + FN + IDS - (1 - r) GT) / (r GT)), which
    cancels the recall-mandated misses and stays within [0, 1].
    Unreachable targets contribute 0 to AMOTA and are skipped by AMOTP;
    AMOTP is 1.0 when no target is reachable.
    """
    pairs = _pair_frames(framelogs, gtlogs)
    pr = _pr_from_pairs(pairs, iou_threshold, include_occluded=True)
    rows: List[AmotaRow] = []
    motar_sum = 0.0
    motp_vals = []
    for k in range(1, n_recall + 1):
        target = k / n_recall
        cutoff = _cutoff_for_recall(pr, target)
        if cutoff is None:
            rows.append(AmotaRow(target_recall=target, achieved=False,
                                 cutoff=math.nan, motar=0.0, mota=0.0,
                                 motp=1.0, recall=0.0, fp=0, fn=0, ids=0))
            continue
        s, _ = _mot_run(pairs, iou_threshold, score_min=cutoff)
        r = s.recall
        denom = r * s.gt_total
        motar = 0.0
        if denom > 0.0:
            motar = max(0.0, 1.0 - (s.fp + s.fn + s.ids
                                    - (1.0 - r) * s.gt_total) / denom)
        motar_sum += motar
        motp_vals.append(s.motp)
        rows.append(AmotaRow(target_recall=target, achieved=True,
                             cutoff=cutoff, motar=motar, mota=s.mota,
                             motp=s.motp, recall=r, fp=s.fp, fn=s.fn,
                             ids=s.ids))
    amotp = float(np.mean(motp_vals)) if motp_vals else 1.0
    return AmotaResult(amota=motar_sum / n_recall, amotp=amotp, rows=rows)


# ===== initialization and gap durations =====


@dataclass
class TidLgd:
    tid_seconds: float
    lgd_seconds: float


def tid_lgd(framelogs: Sequence[FrameLog], gtlogs: Sequence[GtFrame],
            iou_threshold: float = 0.5, frame_rate: float = 10.0) -> TidLgd:
    """Mean track initialization duration and longest gap duration.

    TID: frames from ground-truth birth until first matched, in seconds.
    LGD: the longest present-but-unmatched stretch.  A never-matched
    trajectory contributes its full lifespan to both.
    """
    pairs = _pair_frames(framelogs, gtlogs)
    _, trace = _mot_run(pairs, iou_threshold)
    present: Dict[int, List[int]] = {}
    matched: Dict[int, set] = {}
    for f, fpair in enumerate(pairs):
        for g in fpair.gt_ids:
            present.setdefault(g, []).append(f)
    for fm in trace.frames:
        for g, _ in fm.matches:
            matched.setdefault(g, set()).add(fm.frame)

    tids, lgds = [], []
    for g, frames in present.items():
        hits = matched.get(g, set())
        lifespan = len(frames)
        if not hits:
            tids.append(lifespan)
            lgds.append(lifespan)
            continue
        first = min(hits)
        tids.append(first - frames[0])
        gap = longest = 0
        for f in frames:
            gap = 0 if f in hits else gap + 1
            longest = max(longest, gap)
        lgds.append(longest)
    if not tids:
        return TidLgd(0.0, 0.0)
    return TidLgd(tid_seconds=float(np.mean(tids)) / frame_rate,
                  lgd_seconds=float(np.mean(lgds)) / frame_rate)


# ===== recall-conditioned forecast errors =====


@dataclass
class AdePoint:
    target_recall: float
    achieved: bool
    cutoff: float
    ade: float
    fde: float
    horizon_errors: Dict[float, float]   # seconds -> mean error
    n_pairs: int


@dataclass
class AdeFde:
    points: List[AdePoint]
    curve: List[Tuple[float, float, float, float]]  # recall, fde@1s/2s/3s


def _forecast_errors(framelogs: Sequence[FrameLog], gtlogs: Sequence[GtFrame],
                     pairs: Sequence[_FramePairs], iou_threshold: float,
                     cutoff: float) -> Dict[float, List[float]]:
    _, trace = _mot_run(pairs, iou_threshold, score_min=cutoff)
    errors: Dict[float, List[float]] = {h: [] for h, _ in ADE_HORIZONS}
    for fm in trace.frames:
        log = framelogs[fm.frame]
        gtf = gtlogs[fm.frame]
        by_pred = {t.track_id: t for t in log.tracks}
        by_gt = {r.gt_id: r for r in gtf.records}
        for g, p in fm.matches:
            rec = by_pred[p]
            if rec.forecast is None:
                raise DataError(
                    f"track {p} is a true positive at frame {fm.frame} "
                    "but carries no forecast")
            abs_pred = rec.forecast_abs()
            fut = by_gt[g].future
            for horizon, idx in ADE_HORIZONS:
                if idx < len(fut) and fut[idx] is not None:
                    d = float(np.linalg.norm(abs_pred[idx] - fut[idx]))
                    errors[horizon].append(d)
    return errors


def ade_fde(framelogs: Sequence[FrameLog], gtlogs: Sequence[GtFrame],
            recall_points: Sequence[float] = (0.6, 0.9),
            iou_threshold: float = 0.5,
            n_recall: int = RECALL_GRID) -> AdeFde:
    """Displacement errors of forecasts on true-positive tracks.

    For each recall operating point the score cutoff reaching that recall
    (closest from above) selects the evaluated set.  ADE pools the 1/2/3 s
    horizon errors; FDE is the 3 s error.  Ground-truth futures that end
    early are skipped at the missing horizons.  Also sweeps the recall grid
    to produce FDE-vs-recall curves per horizon.
    """
    pairs = _pair_frames(framelogs, gtlogs)
    pr = _pr_from_pairs(pairs, iou_threshold, include_occluded=True)

    points = []
    for target in recall_points:
        cutoff = _cutoff_for_recall(pr, target)
        if cutoff is None:
            points.append(AdePoint(target_recall=target, achieved=False,
                                   cutoff=math.nan, ade=math.nan,
                                   fde=math.nan, horizon_errors={},
                                   n_pairs=0))
            continue
        errors = _forecast_errors(framelogs, gtlogs, pairs, iou_threshold,
                                  cutoff)
        pooled = [e for v in errors.values() for e in v]
        horizon_means = {h: (float(np.mean(v)) if v else math.nan)
                         for h, v in errors.items()}
        points.append(AdePoint(
            target_recall=target, achieved=True, cutoff=cutoff,
            ade=float(np.mean(pooled)) if pooled else math.nan,
            fde=horizon_means[3.0], horizon_errors=horizon_means,
            n_pairs=len(errors[3.0])))

    curve = []
    for k in range(1, n_recall + 1):
        r = k / n_recall
        cutoff = _cutoff_for_recall(pr, r)
        if cutoff is None:
            continue
        errors = _forecast_errors(framelogs, gtlogs, pairs, iou_threshold,
                                  cutoff)
        means = [float(np.mean(errors[h])) if errors[h] else math.nan
                 for h, _ in ADE_HORIZONS]
        curve.append((r, means[0], means[1], means[2]))
    return AdeFde(points=points, curve=curve)


# ===== report assembly =====


def pool_scenarios(framelog_runs: Sequence[Sequence[FrameLog]],
                   gtlog_runs: Sequence[Sequence[GtFrame]],
                   ) -> Tuple[List[FrameLog], List[GtFrame]]:
    """Concatenate per-scenario logs into one metric stream.

    Track and ground-truth ids are offset per scenario so identities never
    collide across scenario boundaries; frame alignment inside each scenario
    is preserved.  Association persistence cannot leak across the seam
    because no id appears on both sides of it.
    """
    if len(framelog_runs) != len(gtlog_runs):
        raise DataError("scenario count mismatch between system and GT logs")
    frames: List[FrameLog] = []
    gts: List[GtFrame] = []
    base = 0
    for framelogs, gtlogs in zip(framelog_runs, gtlog_runs):
        ids = [t.track_id for log in framelogs for t in log.tracks]
        ids += [r.gt_id for gtf in gtlogs for r in gtf.records]
        for log in framelogs:
            frames.append(FrameLog(frame=log.frame, tracks=[
                TrackRecord(track_id=t.track_id + base, box=t.box,
                            score=t.score, source=t.source, cls=t.cls,
                            forecast=t.forecast) for t in log.tracks]))
        for gtf in gtlogs:
            gts.append(GtFrame(frame=gtf.frame, records=[
                GtRecord(gt_id=r.gt_id + base, cls=r.cls, box=r.box,
                         occluded=r.occluded, future=r.future)
                for r in gtf.records]))
        base += max(ids, default=-1) + 1
    return frames, gts


@dataclass
class Report:
    detection: PrCurve
    mot: MotSummary
    amota: AmotaResult
    durations: TidLgd
    prediction: Optional[AdeFde]


def evaluate(framelogs: Sequence[FrameLog], gtlogs: Sequence[GtFrame],
             iou_threshold: float = 0.5, frame_rate: float = 10.0,
             with_forecasts: bool = True) -> Report:
    """Run the full metric suite over one aligned log pair.

    Detection AP filters by visibility: fully hidden ground truth becomes
    an ignore region, so coasted boxes bridging a gap are neither rewarded
    nor punished there.  The identity metrics (MOT, AMOTA, TID/LGD) keep
    hidden records in the denominator, which is what rewards gap bridging.
    """
    det = detection_ap(framelogs, gtlogs, iou_threshold,
                       include_occluded=False)
    mot, _ = clear_mot(framelogs, gtlogs, iou_threshold)
    am = amota_amotp(framelogs, gtlogs, iou_threshold)
    dur = tid_lgd(framelogs, gtlogs, iou_threshold, frame_rate)
    pred = ade_fde(framelogs, gtlogs) if with_forecasts else None
    return Report(detection=det, mot=mot, amota=am, durations=dur,
                  prediction=pred)


def report_dict(report: Report) -> dict:
    out = {
        "detection": {"ap": report.detection.ap,
                      "max_recall": report.detection.max_recall},
        "mot": {"mota": report.mot.mota, "motp": report.mot.motp,
                "fp": report.mot.fp, "fn": report.mot.fn,
                "ids": report.mot.ids, "frag": report.mot.frag,
                "mt": report.mot.mt, "ml": report.mot.ml,
                "gt_total": report.mot.gt_total,
                "recall": report.mot.recall},
        "amota": {"amota": report.amota.amota, "amotp": report.amota.amotp},
        "durations": {"tid_seconds": report.durations.tid_seconds,
                      "lgd_seconds": report.durations.lgd_seconds},
    }
    if report.prediction is not None:
        out["prediction"] = {
            f"recall_{pt.target_recall:g}": {
                "achieved": pt.achieved, "ade": pt.ade, "fde": pt.fde,
                "n_pairs": pt.n_pairs,
                "horizons": {f"{h:g}s": v
                             for h, v in pt.horizon_errors.items()},
            }
            for pt in report.prediction.points
        }
    return out


def write_report(outdir: str, report: Report) -> None:
    """Emit report.json plus plot-ready CSV tables."""
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "report.json"), "w") as f:
        json.dump(report_dict(report), f, indent=2, sort_keys=True)
    with open(os.path.join(outdir, "pr_curve.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["score", "recall", "precision"])
        for s, r, p in zip(report.detection.scores, report.detection.recall,
                           report.detection.precision):
            w.writerow([f"{s:.6f}", f"{r:.6f}", f"{p:.6f}"])
    with open(os.path.join(outdir, "amota_table.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["target_recall", "achieved", "cutoff", "motar", "mota",
                    "motp", "recall", "fp", "fn", "ids"])
        for row in report.amota.rows:
            w.writerow([f"{row.target_recall:.4f}", int(row.achieved),
                        f"{row.cutoff:.6f}", f"{row.motar:.6f}",
                        f"{row.mota:.6f}", f"{row.motp:.6f}",
                        f"{row.recall:.6f}", row.fp, row.fn, row.ids])
    if report.prediction is not None:
        with open(os.path.join(outdir, "fde_recall.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["recall", "fde_1s", "fde_2s", "fde_3s"])
            for r, f1, f2, f3 in report.prediction.curve:
                w.writerow([f"{r:.4f}", f"{f1:.6f}", f"{f2:.6f}",
                            f"{f3:.6f}"])
