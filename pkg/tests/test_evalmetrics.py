"""Metric suite: detection PR, CLEAR-MOT bookkeeping, recall-averaged
scores, duration metrics, forecast displacement, and report output.

Expected numbers are hand-traced from the metric definitions; box overlap
values use the axis-aligned 2.0 x 4.5 vehicle footprint, e.g. a 0.5 m
longitudinal offset gives IoU 8/10 = 0.8."""
import json
import math
import os

import numpy as np
import pytest

from trackloop.errors import DataError
from trackloop.evalmetrics import (MatchTrace, ade_fde, amota_amotp,
                                   clear_mot, detection_ap, evaluate,
                                   report_dict, tid_lgd, write_report)
from trackloop.geometry import BevBox, rotation
from trackloop.logs import FrameLog, GtFrame, GtRecord, TrackRecord, make_gt_frames
from trackloop.simkit import (NoiseConfig, SimConfig, generate_scenario,
                              pseudo_detect)


def vb(u, v=0.0, theta=0.0):
    return BevBox(u, v, 2.0, 4.5, theta)


def gtf(frame, items):
    recs = []
    for it in items:
        gt_id, box = it[0], it[1]
        occ = it[2] if len(it) > 2 else False
        fut = it[3] if len(it) > 3 else []
        recs.append(GtRecord(gt_id=gt_id, cls="vehicle", box=box,
                             occluded=occ, future=list(fut)))
    return GtFrame(frame=frame, records=recs)


def flog(frame, items):
    tracks = []
    for it in items:
        tid, box, score = it[0], it[1], it[2]
        fc = it[3] if len(it) > 3 else None
        tracks.append(TrackRecord(track_id=tid, box=box, score=score,
                                  source="detected", cls="vehicle",
                                  forecast=fc))
    return FrameLog(frame=frame, tracks=tracks)


def perfect_logs(n_frames=10, n_gt=2, with_forecasts=False):
    """Each GT sits still; predictions are exact copies."""
    gts, preds = [], []
    for f in range(n_frames):
        items, pitems = [], []
        for g in range(n_gt):
            box = vb(8.0 * g)
            center = np.array([box.u, box.v])
            fut = [center.copy() for _ in range(6)]
            items.append((g + 1, box, False, fut))
            fc = np.zeros((6, 2)) if with_forecasts else None
            pitems.append((100 + g, box, 0.9, fc))
        gts.append(gtf(f, items))
        preds.append(flog(f, pitems))
    return preds, gts


class TestDetectionAp:
    def test_perfect(self):
        preds, gts = perfect_logs()
        pr = detection_ap(preds, gts)
        assert pr.ap == pytest.approx(1.0)
        assert pr.max_recall == pytest.approx(1.0)

    def test_no_predictions(self):
        _, gts = perfect_logs()
        empty = [flog(f, []) for f in range(len(gts))]
        pr = detection_ap(empty, gts)
        assert pr.ap == 0.0 and pr.max_recall == 0.0

    def test_perfect_plus_disjoint_fp(self):
        # 1 GT; a perfect score-0.9 box and a disjoint score-0.8 box:
        # PR points (r=1, p=1) then (r=1, p=0.5); interpolated area = 1
        gts = [gtf(0, [(1, vb(0))])]
        preds = [flog(0, [(10, vb(0), 0.9), (11, vb(30.0), 0.8)])]
        pr = detection_ap(preds, gts)
        assert pr.recall.tolist() == [1.0, 1.0]
        assert pr.precision.tolist() == [1.0, 0.5]
        assert pr.scores.tolist() == [0.9, 0.8]
        assert pr.ap == pytest.approx(1.0)
        assert pr.max_recall == pytest.approx(1.0)

    def test_interpolation_area(self):
        # flags in score order: FP, TP, TP over 2 GT
        # recall [0, .5, 1], precision [0, .5, 2/3], envelope 2/3 everywhere
        gts = [gtf(0, [(1, vb(0)), (2, vb(10))])]
        preds = [flog(0, [(10, vb(30.0), 0.9), (11, vb(0), 0.8),
                          (12, vb(10.0), 0.7)])]
        pr = detection_ap(preds, gts)
        assert pr.ap == pytest.approx(2.0 / 3.0)

    def test_one_gt_absorbs_one_prediction(self):
        # duplicate on the same GT: second best becomes FP
        gts = [gtf(0, [(1, vb(0))])]
        preds = [flog(0, [(10, vb(0), 0.9), (11, vb(0.5), 0.8)])]
        pr = detection_ap(preds, gts)
        assert pr.precision.tolist() == [1.0, 0.5]

    def test_class_gate(self):
        gts = [GtFrame(0, [GtRecord(gt_id=1, cls="pedestrian",
                                    box=BevBox(0, 0, 0.6, 0.6, 0.0),
                                    occluded=False, future=[])])]
        preds = [flog(0, [(10, vb(0), 0.9)])]
        pr = detection_ap(preds, gts)
        assert pr.ap == 0.0

    def test_occluded_flag_default_counts(self):
        # occluded GT stays in the recall base by default
        gts = [gtf(0, [(1, vb(0)), (2, vb(10.0), True)])]
        preds = [flog(0, [(10, vb(0), 0.9)])]
        pr = detection_ap(preds, gts)
        assert pr.max_recall == pytest.approx(0.5)

    def test_occluded_excluded_with_flag(self):
        gts = [gtf(0, [(1, vb(0)), (2, vb(10.0), True)])]
        # one hit on the visible GT, one box on the occluded GT (ignored),
        # one box in the void (still FP)
        preds = [flog(0, [(10, vb(0), 0.9), (11, vb(10.0), 0.8),
                          (12, vb(30.0), 0.7)])]
        pr = detection_ap(preds, gts, include_occluded=False)
        assert pr.max_recall == pytest.approx(1.0)
        assert pr.recall.size == 2          # ignored box dropped
        assert pr.precision.tolist() == [1.0, 0.5]
        assert pr.ap == pytest.approx(1.0)

    def test_misaligned_logs(self):
        preds, gts = perfect_logs(n_frames=4)
        with pytest.raises(DataError):
            detection_ap(preds[:3], gts)
        preds[1].frame = 7
        with pytest.raises(DataError):
            detection_ap(preds, gts)

    def test_noiseless_detector_cross_module(self):
        # pseudo detections on a quiet scenario reproduce every visible
        # object exactly, so visible-only AP is 1.0
        cfg = SimConfig(num_frames=30, n_vehicles=3, n_pedestrians=2,
                        roi_half=30.0)
        noise = NoiseConfig(sigma_pos=0.0, sigma_theta=0.0, miss_rate=0.0,
                            fp_rate=0.0, score_sigma=0.0)
        scenario = generate_scenario(cfg, seed=5)
        gts = make_gt_frames(scenario)
        preds = []
        for f in range(cfg.num_frames):
            dets = pseudo_detect(scenario, f, noise)
            preds.append(FrameLog(frame=f, tracks=[
                TrackRecord(track_id=i, box=d.box, score=d.score,
                            source="detected", cls=d.cls)
                for i, d in enumerate(dets)]))
        pr = detection_ap(preds, gts, include_occluded=False)
        assert pr.ap == pytest.approx(1.0)
        assert pr.max_recall == pytest.approx(1.0)


class TestClearMot:
    def test_perfect(self):
        preds, gts = perfect_logs()
        mot, trace = clear_mot(preds, gts)
        trace.validate()
        assert mot.mota == pytest.approx(1.0)
        assert mot.motp == pytest.approx(0.0)
        assert (mot.fp, mot.fn, mot.ids, mot.frag) == (0, 0, 0, 0)
        assert mot.mt == 2 and mot.ml == 0

    def test_hand_traced_mota_07(self):
        # 10 GT frames; frame 5 is missed and carries one stray box;
        # the id changes on resume: FP=1 FN=1 IDS=1 -> MOTA 0.7
        gts = [gtf(f, [(1, vb(0))]) for f in range(10)]
        preds = []
        for f in range(10):
            if f < 5:
                preds.append(flog(f, [(10, vb(0), 0.9)]))
            elif f == 5:
                preds.append(flog(f, [(99, vb(30.0), 0.9)]))
            else:
                preds.append(flog(f, [(11, vb(0), 0.9)]))
        mot, _ = clear_mot(preds, gts)
        assert (mot.fp, mot.fn, mot.ids, mot.frag) == (1, 1, 1, 1)
        assert mot.mota == pytest.approx(0.7)
        assert mot.motp == pytest.approx(0.0)
        assert mot.gt_total == 10

    def test_gap_fragment_and_mt(self):
        # matched on frames 0-3 and 5-9 with one id: FRAG 1, coverage 0.9
        gts = [gtf(f, [(1, vb(0))]) for f in range(10)]
        preds = [flog(f, [] if f == 4 else [(10, vb(0), 0.9)])
                 for f in range(10)]
        mot, _ = clear_mot(preds, gts)
        assert mot.frag == 1 and mot.ids == 0
        assert mot.fn == 1 and mot.fp == 0
        assert mot.mt == 1 and mot.ml == 0

    def test_persistence_beats_greedy_iou(self):
        # an existing pair survives even when a new box overlaps better
        gts = [gtf(0, [(1, vb(0))]), gtf(1, [(1, vb(0))])]
        preds = [flog(0, [(10, vb(0), 0.9)]),
                 flog(1, [(10, vb(0.5), 0.9), (11, vb(0), 0.9)])]
        mot, trace = clear_mot(preds, gts)
        assert trace.frames[1].matches == [(1, 10)]
        assert mot.ids == 0 and mot.fp == 1

    def test_persistence_dropped_below_threshold(self):
        # the old partner decayed to IoU 0.38 < 0.5; a fresh box takes over
        gts = [gtf(0, [(1, vb(0))]), gtf(1, [(1, vb(0))])]
        preds = [flog(0, [(10, vb(0), 0.9)]),
                 flog(1, [(10, vb(2.0), 0.9), (11, vb(0), 0.9)])]
        mot, trace = clear_mot(preds, gts)
        assert trace.frames[1].matches == [(1, 11)]
        assert mot.ids == 1

    def test_switch_counts_against_last_known(self):
        # gap, then resume under a new id: one switch and one fragment
        gts = [gtf(f, [(1, vb(0))]) for f in range(5)]
        preds = [flog(0, [(10, vb(0), 0.9)]), flog(1, [(10, vb(0), 0.9)]),
                 flog(2, []), flog(3, []), flog(4, [(11, vb(0), 0.9)])]
        mot, _ = clear_mot(preds, gts)
        assert mot.ids == 1 and mot.frag == 1

    def test_motp_frozen_offset(self):
        # constant 0.5 m offset: IoU 0.8 every frame, MOTP = 0.2
        gts = [gtf(f, [(1, vb(0))]) for f in range(4)]
        preds = [flog(f, [(10, vb(0.5), 0.9)]) for f in range(4)]
        mot, _ = clear_mot(preds, gts)
        assert mot.motp == pytest.approx(0.2, abs=1e-9)

    def test_mota_can_go_negative(self):
        gts = [gtf(0, [(1, vb(0))])]
        preds = [flog(0, [(10, vb(30.0), 0.9), (11, vb(40.0), 0.8),
                          (12, vb(50.0), 0.7)])]
        mot, _ = clear_mot(preds, gts)
        assert mot.mota == pytest.approx(-3.0)

    def test_ml_counts_sparse_coverage(self):
        # matched 2 of 10 frames: coverage 0.2 counts as mostly lost
        gts = [gtf(f, [(1, vb(0))]) for f in range(10)]
        preds = [flog(f, [(10, vb(0), 0.9)] if f < 2 else [])
                 for f in range(10)]
        mot, _ = clear_mot(preds, gts)
        assert mot.ml == 1 and mot.mt == 0


class TestAmota:
    def test_perfect(self):
        preds, gts = perfect_logs()
        out = amota_amotp(preds, gts)
        assert out.amota == pytest.approx(1.0)
        assert out.amotp == pytest.approx(0.0)
        assert len(out.rows) == 40
        assert all(r.achieved for r in out.rows)

    def test_half_recall_tracker(self):
        # only one of two actors is ever predicted: targets above 0.5 are
        # unreachable and contribute zero, the rest reach MOTAR 1
        preds, gts = perfect_logs(n_gt=2)
        preds = [FrameLog(frame=log.frame, tracks=log.tracks[:1])
                 for log in preds]
        out = amota_amotp(preds, gts)
        achieved = [r for r in out.rows if r.achieved]
        assert len(achieved) == 20
        assert all(r.motar == pytest.approx(1.0) for r in achieved)
        assert out.amota == pytest.approx(0.5)
        assert out.amotp == pytest.approx(0.0)

    def test_more_coverage_never_hurts(self):
        preds_half, gts = perfect_logs(n_gt=2)
        preds_half = [FrameLog(frame=log.frame, tracks=log.tracks[:1])
                      for log in preds_half]
        preds_full, _ = perfect_logs(n_gt=2)
        a = amota_amotp(preds_half, gts).amota
        b = amota_amotp(preds_full, gts).amota
        assert b >= a

    def test_low_score_fps_lower_high_recall_rows(self):
        preds, gts = perfect_logs(n_gt=2)
        for log in preds:
            log.tracks.append(TrackRecord(track_id=999 + log.frame,
                                          box=vb(40.0), score=0.1,
                                          source="detected", cls="vehicle"))
        out = amota_amotp(preds, gts)
        assert 0.0 < out.amota <= 1.0
        # the FPs only enter below the real boxes' scores; every target is
        # still reached by the clean prefix
        assert all(r.achieved for r in out.rows)
        assert all(r.motar == pytest.approx(1.0) for r in out.rows)


class TestTidLgd:
    def test_continuously_matched(self):
        preds, gts = perfect_logs()
        out = tid_lgd(preds, gts, frame_rate=10.0)
        assert out.tid_seconds == 0.0 and out.lgd_seconds == 0.0

    def test_late_initialization(self):
        # born frame 0, first matched frame 5 at 10 Hz -> TID 0.5 s
        gts = [gtf(f, [(1, vb(0))]) for f in range(10)]
        preds = [flog(f, [(10, vb(0), 0.9)] if f >= 5 else [])
                 for f in range(10)]
        out = tid_lgd(preds, gts, frame_rate=10.0)
        assert out.tid_seconds == pytest.approx(0.5)
        assert out.lgd_seconds == pytest.approx(0.5)

    def test_longest_gap(self):
        # unmatched on frames 3, 4 and 7 -> longest gap 2 frames = 0.2 s
        gts = [gtf(f, [(1, vb(0))]) for f in range(10)]
        preds = [flog(f, [] if f in (3, 4, 7) else [(10, vb(0), 0.9)])
                 for f in range(10)]
        out = tid_lgd(preds, gts, frame_rate=10.0)
        assert out.tid_seconds == 0.0
        assert out.lgd_seconds == pytest.approx(0.2)

    def test_never_matched_counts_lifespan(self):
        gts = [gtf(f, [(1, vb(0))]) for f in range(10)]
        preds = [flog(f, []) for f in range(10)]
        out = tid_lgd(preds, gts, frame_rate=10.0)
        assert out.tid_seconds == pytest.approx(1.0)
        assert out.lgd_seconds == pytest.approx(1.0)

    def test_mean_over_trajectories(self):
        # gt 1 instant, gt 2 first matched at frame 4: mean TID 0.2 s
        gts = [gtf(f, [(1, vb(0)), (2, vb(10.0))]) for f in range(10)]
        preds = []
        for f in range(10):
            items = [(10, vb(0), 0.9)]
            if f >= 4:
                items.append((11, vb(10.0), 0.9))
            preds.append(flog(f, items))
        out = tid_lgd(preds, gts, frame_rate=10.0)
        assert out.tid_seconds == pytest.approx(0.2)


def forecast_logs(deltas, n_frames=5, score=0.9):
    """One static GT with known future; forecasts off by `deltas` per index."""
    gts, preds = [], []
    center = np.array([0.0, 0.0])
    for f in range(n_frames):
        fut = [center.copy() for _ in range(6)]
        gts.append(gtf(f, [(1, vb(0), False, fut)]))
        fc = np.zeros((6, 2))
        for idx, d in deltas.items():
            fc[idx] = d
        preds.append(flog(f, [(10, vb(0), score, fc)]))
    return preds, gts


class TestAdeFde:
    def test_exact_forecasts(self):
        preds, gts = forecast_logs({})
        out = ade_fde(preds, gts, recall_points=(0.6,))
        pt = out.points[0]
        assert pt.achieved
        assert pt.ade == pytest.approx(0.0)
        assert pt.fde == pytest.approx(0.0)

    def test_constant_offset(self):
        preds, gts = forecast_logs({k: (1.0, 0.0) for k in range(6)})
        pt = ade_fde(preds, gts, recall_points=(0.6,)).points[0]
        assert pt.ade == pytest.approx(1.0)
        assert pt.fde == pytest.approx(1.0)

    def test_hand_horizon_means(self):
        # errors 0.2 / 0.4 / 0.6 m at 1 / 2 / 3 s -> ADE 0.4, FDE 0.6
        preds, gts = forecast_logs({1: (0.2, 0.0), 3: (0.4, 0.0),
                                    5: (0.6, 0.0)})
        pt = ade_fde(preds, gts, recall_points=(0.9,)).points[0]
        assert pt.ade == pytest.approx(0.4)
        assert pt.fde == pytest.approx(0.6)
        assert pt.horizon_errors[1.0] == pytest.approx(0.2)
        assert pt.horizon_errors[2.0] == pytest.approx(0.4)

    def test_short_future_skips_horizon(self):
        preds, gts = forecast_logs({1: (0.2, 0.0), 3: (0.4, 0.0)})
        for g in gts:
            g.records[0].future[5] = None
        pt = ade_fde(preds, gts, recall_points=(0.9,)).points[0]
        assert math.isnan(pt.fde)
        assert pt.ade == pytest.approx(0.3)

    def test_missing_forecast_on_tp_raises(self):
        preds, gts = forecast_logs({})
        preds[2].tracks[0].forecast = None
        with pytest.raises(DataError):
            ade_fde(preds, gts)

    def test_recall_conditioning(self):
        # track A (score 0.9) errs 0.1; track B (score 0.5) errs 2.0;
        # at recall 0.5 only A is evaluated, at 1.0 both pool to 1.05
        gts, preds = [], []
        for f in range(10):
            futa = [np.array([0.0, 0.0])] * 6
            futb = [np.array([20.0, 0.0])] * 6
            gts.append(gtf(f, [(1, vb(0), False, futa),
                               (2, vb(20.0), False, futb)]))
            fa = np.full((6, 2), 0.0)
            fa[:, 0] = 0.1
            fb = np.full((6, 2), 0.0)
            fb[:, 0] = 2.0
            preds.append(flog(f, [(10, vb(0), 0.9, fa),
                                  (11, vb(20.0), 0.5, fb)]))
        out = ade_fde(preds, gts, recall_points=(0.5, 1.0))
        lo, hi = out.points
        assert lo.ade == pytest.approx(0.1)
        assert hi.ade == pytest.approx(1.05)
        assert hi.fde == pytest.approx(1.05)
        assert lo.n_pairs == 10 and hi.n_pairs == 20

    def test_curve_rows(self):
        preds, gts = forecast_logs({5: (0.6, 0.0)})
        out = ade_fde(preds, gts)
        assert len(out.curve) == 40      # recall 1.0 reachable everywhere
        r, f1, f2, f3 = out.curve[-1]
        assert r == 1.0
        assert f3 == pytest.approx(0.6)

    def test_unreachable_point(self):
        preds, gts = forecast_logs({})
        empty = [FrameLog(frame=p.frame, tracks=[]) for p in preds]
        pt = ade_fde(empty, gts, recall_points=(0.6,)).points[0]
        assert not pt.achieved
        assert math.isnan(pt.ade)


def rigid_transform_logs(preds, gts, angle, shift):
    rot = rotation(angle)
    t = np.asarray(shift, dtype=float)

    def move_box(b):
        c = rot @ np.array([b.u, b.v]) + t
        return BevBox(float(c[0]), float(c[1]), b.w, b.l, b.theta + angle)

    preds2, gts2 = [], []
    for log in preds:
        tracks = []
        for tr in log.tracks:
            fc = None if tr.forecast is None else tr.forecast @ rot.T
            tracks.append(TrackRecord(track_id=tr.track_id,
                                      box=move_box(tr.box), score=tr.score,
                                      source=tr.source, cls=tr.cls,
                                      forecast=fc))
        preds2.append(FrameLog(frame=log.frame, tracks=tracks))
    for g in gts:
        recs = []
        for r in g.records:
            fut = [None if p is None else rot @ p + t for p in r.future]
            recs.append(GtRecord(gt_id=r.gt_id, cls=r.cls,
                                 box=move_box(r.box), occluded=r.occluded,
                                 future=fut))
        gts2.append(GtFrame(frame=g.frame, records=recs))
    return preds2, gts2


def approx_same(a, b, tol=1e-9):
    if isinstance(a, dict):
        assert set(a) == set(b)
        for k in a:
            approx_same(a[k], b[k], tol)
    elif isinstance(a, float):
        if math.isnan(a):
            assert math.isnan(b)
        else:
            assert a == pytest.approx(b, abs=tol)
    else:
        assert a == b


class TestInvariance:
    def test_rigid_transform(self):
        rng = np.random.default_rng(9)
        gts, preds = [], []
        for f in range(6):
            items, pitems = [], []
            for g in range(3):
                c = rng.uniform(-10, 10, size=2)
                th = float(rng.uniform(-np.pi, np.pi))
                fut = [c + rng.uniform(-1, 1, size=2) for _ in range(6)]
                items.append((g + 1, BevBox(c[0], c[1], 2.0, 4.5, th),
                              False, fut))
                off = rng.uniform(-0.2, 0.2, size=2)
                fc = rng.uniform(-1, 1, size=(6, 2))
                pitems.append((50 + g, BevBox(c[0] + off[0], c[1] + off[1],
                                              2.0, 4.5, th),
                               float(rng.uniform(0.3, 1.0)), fc))
            gts.append(gtf(f, items))
            preds.append(flog(f, pitems))
        preds2, gts2 = rigid_transform_logs(preds, gts, angle=0.7,
                                            shift=(3.0, -2.0))
        a = report_dict(evaluate(preds, gts))
        b = report_dict(evaluate(preds2, gts2))
        approx_same(a, b, tol=1e-7)


class TestReport:
    def test_full_report_files(self, tmp_path):
        preds, gts = perfect_logs(with_forecasts=True)
        rep = evaluate(preds, gts)
        write_report(str(tmp_path), rep)
        with open(os.path.join(str(tmp_path), "report.json")) as f:
            doc = json.load(f)
        assert doc["mot"]["mota"] == pytest.approx(1.0)
        assert doc["amota"]["amota"] == pytest.approx(1.0)
        assert doc["detection"]["ap"] == pytest.approx(1.0)
        assert doc["durations"]["tid_seconds"] == 0.0
        assert "recall_0.6" in doc["prediction"]
        for name in ("pr_curve.csv", "amota_table.csv", "fde_recall.csv"):
            assert os.path.exists(os.path.join(str(tmp_path), name))
        with open(os.path.join(str(tmp_path), "amota_table.csv")) as f:
            assert len(f.readlines()) == 41

    def test_report_without_forecasts(self, tmp_path):
        preds, gts = perfect_logs(with_forecasts=False)
        rep = evaluate(preds, gts, with_forecasts=False)
        assert rep.prediction is None
        write_report(str(tmp_path), rep)
        assert not os.path.exists(os.path.join(str(tmp_path),
                                               "fde_recall.csv"))
        doc = json.load(open(os.path.join(str(tmp_path), "report.json")))
        assert "prediction" not in doc
