"""Desk-scale perception-and-prediction engine.

A synthetic bird's-eye-view simulator feeds a learned multi-object tracker
that associates detections discretely, recovers occluded objects by local
search, refines trajectories continuously, and forecasts motion; metrics and
a Kalman baseline close the loop.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, ShapeError, TrainingError
from .geometry import BevBox, EgoState, iou_matrix, nms, rotated_iou, wrap_angle
from .simkit import (Detection, FeatureGrid, NoiseConfig, Scenario, SimConfig,
                     generate_scenario, pseudo_detect, render_feature_grid)
from .neural import ParamStore, grad_check, load_checkpoint, save_checkpoint
from .trackcore import (KfConfig, Track, TrackerConfig, hungarian,
                        init_tracker_model, kf_track_step, track_step)
from .forecast import Forecast, cv_baseline
from .logs import (FrameLog, GtFrame, GtRecord, TrackRecord, make_gt_frames,
                   read_detections, read_framelogs, read_gtlogs,
                   write_detections, write_framelogs, write_gtlogs)
from .learn import ClipSampler, LossReport, TrainConfig, train, write_curves
from .evalmetrics import (Report, ade_fde, amota_amotp, clear_mot,
                          detection_ap, evaluate, pool_scenarios, report_dict,
                          tid_lgd, write_report)
from .pipeline import TRACKER_VARIANTS, run_kf, run_tracker, simulate, tracker_config

__all__ = [
    "__version__",
    "ConfigError", "DataError", "ShapeError", "TrainingError",
    "BevBox", "EgoState", "iou_matrix", "nms", "rotated_iou", "wrap_angle",
    "Detection", "FeatureGrid", "NoiseConfig", "Scenario", "SimConfig",
    "generate_scenario", "pseudo_detect", "render_feature_grid",
    "ParamStore", "grad_check", "load_checkpoint", "save_checkpoint",
    "KfConfig", "Track", "TrackerConfig", "hungarian", "init_tracker_model",
    "kf_track_step", "track_step",
    "Forecast", "cv_baseline",
    "FrameLog", "GtFrame", "GtRecord", "TrackRecord", "make_gt_frames",
    "read_detections", "read_framelogs", "read_gtlogs",
    "write_detections", "write_framelogs", "write_gtlogs",
    "ClipSampler", "LossReport", "TrainConfig", "train", "write_curves",
    "Report", "ade_fde", "amota_amotp", "clear_mot", "detection_ap",
    "evaluate", "pool_scenarios", "report_dict", "tid_lgd", "write_report",
    "TRACKER_VARIANTS", "run_kf", "run_tracker", "simulate", "tracker_config",
]
