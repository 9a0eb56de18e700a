"""Command-line orchestration: generate, train, track, eval, ablate, sweep.

The config file is INI-style; every key maps onto a config dataclass field
(schema in docs/config.md, artifact formats in docs/formats.md).  Exit codes:
0 success, 2 config error, 3 runtime error, 4 ablation gate failure.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import math
import multiprocessing
import os
import platform
import re
import sys
from dataclasses import asdict, dataclass, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy

from . import __version__
from .errors import ConfigError, DataError, ShapeError, TrainingError
from .evalmetrics import Report, evaluate, pool_scenarios, report_dict, write_report
from .learn import ClipSampler, TrainConfig, train, write_curves
from .logs import (make_gt_frames, read_detections, read_framelogs,
                   read_gtlogs, write_detections, write_framelogs,
                   write_gtlogs)
from .neural import ParamStore, load_checkpoint, save_checkpoint
from .pipeline import TRACKER_VARIANTS, run_tracker, simulate
from .simkit import NoiseConfig, SimConfig, generate_scenario
from .trackcore import KfConfig, TrackerConfig, init_tracker_model

SWEEP_LENGTHS = (1, 2, 4, 8, 16, 32)
ABLATION_VARIANTS = ("pnp", "pnp-no-sot", "pnp-no-motion",
                     "pnp-no-rescore", "pnp-no-refine")
CHECKPOINT_NAME = "model.ckpt"


class GateFailure(Exception):
    """Ablation deltas disagree with the expected directions."""


# ===== config file =====

_SECTION_TYPES = {"sim": SimConfig, "noise": NoiseConfig,
                  "tracker": TrackerConfig, "kf": KfConfig,
                  "train": TrainConfig, "train_sim": SimConfig,
                  "train_noise": NoiseConfig}
_PATH_KEYS = ("data_dir", "model_dir", "tracks_dir", "report_dir")
_DEFAULT_PATHS = {"data_dir": "runs/data", "model_dir": "runs/model",
                  "tracks_dir": "runs/tracks", "report_dir": "runs/report"}
_BOOLS = {"1": True, "0": False, "true": True, "false": False,
          "yes": True, "no": False, "on": True, "off": False}


@dataclass
class RunConfig:
    """Everything a command needs, resolved from one file plus flag overrides."""

    command: str
    path: str
    text: str                       # raw file content, hashed into manifests
    sim: SimConfig
    noise: NoiseConfig
    tracker: TrackerConfig
    kf: KfConfig
    train: TrainConfig
    train_sim: Optional[SimConfig]
    train_noise: Optional[NoiseConfig]
    paths: Dict[str, str]
    scenarios: int
    seed: int
    jobs: int
    variant: str
    forecaster: str


def _anchor(path: str, lines: Sequence[str], section: str,
            key: Optional[str] = None) -> str:
    """file:line pointing at a key inside a section, else its header."""
    sec_re = re.compile(r"^\s*\[" + re.escape(section) + r"\]\s*$")
    in_sec = False
    sec_line = 1
    for n, raw in enumerate(lines, start=1):
        if sec_re.match(raw):
            in_sec, sec_line = True, n
            continue
        if re.match(r"^\s*\[", raw):
            in_sec = False
            continue
        if in_sec and key is not None \
                and re.match(r"^\s*" + re.escape(key) + r"\s*[=:]", raw):
            return f"{path}:{n}"
    return f"{path}:{sec_line}"


def _coerce(raw: str, default, where: str, name: str):
    try:
        if isinstance(default, bool):
            val = _BOOLS.get(raw.strip().lower())
            if val is None:
                raise ValueError(raw)
            return val
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        kind = type(default).__name__
        raise ConfigError(f"{where}: {name} = {raw!r} is not a valid {kind}")


def _build_section(cls, section: str, parser: configparser.ConfigParser,
                   path: str, lines: Sequence[str]):
    base = cls()
    defaults = {f.name: getattr(base, f.name) for f in fields(cls)}
    kwargs = {}
    for key, raw in parser.items(section):
        if key not in defaults:
            raise ConfigError(f"{_anchor(path, lines, section, key)}: "
                              f"unknown key {key!r} in [{section}]")
        where = _anchor(path, lines, section, key)
        kwargs[key] = _coerce(raw, defaults[key], where, key)
    cfg = replace(base, **kwargs)
    try:
        cfg.validate()
    except ConfigError as e:
        raise ConfigError(f"{_anchor(path, lines, section)}: [{section}] {e}") from e
    return cfg


def load_config(path: str, command: str, seed: Optional[int] = None,
                tracker: Optional[str] = None,
                jobs: Optional[int] = None) -> RunConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"{path}:1: cannot read config ({e.strerror})")
    lines = text.splitlines()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        parser.read_string(text, source=path)
    except configparser.ParsingError as e:
        lineno = e.errors[0][0] if e.errors else 1
        raise ConfigError(f"{path}:{lineno}: cannot parse config") from e
    except configparser.DuplicateSectionError as e:
        raise ConfigError(f"{path}:{e.lineno}: duplicate section "
                          f"[{e.section}]") from e
    except configparser.DuplicateOptionError as e:
        raise ConfigError(f"{path}:{e.lineno}: duplicate key "
                          f"{e.option!r}") from e
    except configparser.Error as e:
        raise ConfigError(f"{path}:1: {e}") from e

    known = set(_SECTION_TYPES) | {"run", "paths"}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"{_anchor(path, lines, section)}: "
                              f"unknown section [{section}]")

    built = {}
    for section, cls in _SECTION_TYPES.items():
        if parser.has_section(section):
            built[section] = _build_section(cls, section, parser, path, lines)
    sim = built.get("sim", SimConfig())
    if "sim" not in built:
        sim.validate()

    paths = dict(_DEFAULT_PATHS)
    if parser.has_section("paths"):
        for key, raw in parser.items("paths"):
            if key not in _PATH_KEYS:
                raise ConfigError(f"{_anchor(path, lines, 'paths', key)}: "
                                  f"unknown key {key!r} in [paths]")
            paths[key] = raw

    run_defaults = {"scenarios": 4, "seed": 0, "jobs": 1,
                    "tracker": "pnp", "forecaster": "learned"}
    run = dict(run_defaults)
    if parser.has_section("run"):
        for key, raw in parser.items("run"):
            if key not in run_defaults:
                raise ConfigError(f"{_anchor(path, lines, 'run', key)}: "
                                  f"unknown key {key!r} in [run]")
            where = _anchor(path, lines, "run", key)
            run[key] = _coerce(raw, run_defaults[key], where, key)
    if run["scenarios"] < 1:
        raise ConfigError(f"{_anchor(path, lines, 'run', 'scenarios')}: "
                          f"scenarios must be positive")
    if run["jobs"] < 1:
        raise ConfigError(f"{_anchor(path, lines, 'run', 'jobs')}: "
                          f"jobs must be positive")
    if run["tracker"] not in TRACKER_VARIANTS:
        raise ConfigError(f"{_anchor(path, lines, 'run', 'tracker')}: "
                          f"unknown tracker {run['tracker']!r}")
    if run["forecaster"] not in ("learned", "cv"):
        raise ConfigError(f"{_anchor(path, lines, 'run', 'forecaster')}: "
                          f"unknown forecaster {run['forecaster']!r}")

    if seed is not None:
        run["seed"] = seed
    if tracker is not None:
        run["tracker"] = tracker
    if jobs is not None:
        if jobs < 1:
            raise ConfigError("--jobs must be positive")
        run["jobs"] = jobs

    tr = built.get("train", TrainConfig())
    # one --seed reproduces the whole pipeline unless [train] pins its own
    if seed is not None and not (parser.has_section("train")
                                 and parser.has_option("train", "seed")):
        tr = replace(tr, seed=run["seed"])
    tr.validate()

    return RunConfig(command=command, path=path, text=text, sim=sim,
                     noise=built.get("noise", NoiseConfig()),
                     tracker=built.get("tracker", TrackerConfig()),
                     kf=built.get("kf", KfConfig()),
                     train=tr,
                     train_sim=built.get("train_sim"),
                     train_noise=built.get("train_noise"),
                     paths=paths, scenarios=run["scenarios"],
                     seed=run["seed"], jobs=run["jobs"],
                     variant=run["tracker"], forecaster=run["forecaster"])


# ===== artifacts =====


def _write_manifest(outdir: str, cfg: RunConfig,
                    artifacts: Sequence[str]) -> None:
    doc = {
        "artifacts": sorted(artifacts),
        "command": cfg.command,
        "config_sha256": hashlib.sha256(cfg.text.encode()).hexdigest(),
        "seed": cfg.seed,
        "versions": {"numpy": np.__version__,
                     "python": platform.python_version(),
                     "scipy": scipy.__version__,
                     "trackloop": __version__},
    }
    with open(os.path.join(outdir, "manifest.json"), "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _scenario_specs(data_dir: str) -> List[dict]:
    try:
        names = sorted(n for n in os.listdir(data_dir)
                       if re.fullmatch(r"scenario_\d+\.json", n))
    except OSError as e:
        raise DataError(f"cannot list {data_dir}: {e.strerror}")
    if not names:
        raise DataError(f"no scenario_*.json files in {data_dir}")
    specs = []
    for name in names:
        with open(os.path.join(data_dir, name)) as f:
            specs.append(json.load(f))
    return specs


def _map_jobs(fn, items: Sequence, jobs: int) -> List:
    """Order-preserving map, forked across workers when jobs > 1."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with multiprocessing.Pool(min(jobs, len(items))) as pool:
        return pool.map(fn, items)


# ===== commands =====


def cmd_generate(cfg: RunConfig, outdir: str) -> None:
    os.makedirs(outdir, exist_ok=True)
    artifacts = []
    for i in range(cfg.scenarios):
        seed = cfg.seed + i
        scenario, dets = simulate(cfg.sim, cfg.noise, seed)
        spec = {"index": i, "seed": seed, "sim": asdict(cfg.sim)}
        names = (f"scenario_{i:03d}.json", f"dets_{i:03d}.jsonl",
                 f"gt_{i:03d}.jsonl")
        with open(os.path.join(outdir, names[0]), "w") as f:
            json.dump(spec, f, indent=2, sort_keys=True)
            f.write("\n")
        write_detections(os.path.join(outdir, names[1]), dets)
        write_gtlogs(os.path.join(outdir, names[2]), make_gt_frames(scenario))
        artifacts.extend(names)
    _write_manifest(outdir, cfg, artifacts)
    print(f"wrote {cfg.scenarios} scenario(s) to {outdir} "
          f"(frames={cfg.sim.num_frames}, vehicles={cfg.sim.n_vehicles}, "
          f"pedestrians={cfg.sim.n_pedestrians})")


def cmd_train(cfg: RunConfig, outdir: str) -> None:
    os.makedirs(outdir, exist_ok=True)
    train_sim = cfg.train_sim
    channels = (train_sim.channels if train_sim is not None
                else ClipSampler().sim.channels)
    params = init_tracker_model(channels=channels, seed=cfg.train.seed)
    sampler = ClipSampler(sim=train_sim, noise=cfg.train_noise,
                          clip_len=cfg.train.clip_len, seed=cfg.train.seed)
    every = max(1, cfg.train.steps // 10)

    def progress(report):
        if report.step % every == 0 or report.step == cfg.train.steps - 1:
            print(f"step {report.step + 1}/{cfg.train.steps}  "
                  f"total {report.total:.4f}  affinity {report.affinity:.4f}  "
                  f"sot {report.sot:.4f}  rank {report.rank:.4f}  "
                  f"refine {report.refine:.4f}  forecast {report.forecast:.4f}")

    params, curves = train(params, cfg.train, sampler=sampler,
                           tracker_cfg=cfg.tracker, on_step=progress)
    save_checkpoint(params, os.path.join(outdir, CHECKPOINT_NAME))
    write_curves(os.path.join(outdir, "curves.csv"), curves)
    _write_manifest(outdir, cfg, [CHECKPOINT_NAME, "curves.csv"])
    print(f"saved checkpoint to {os.path.join(outdir, CHECKPOINT_NAME)}")


def _load_params(cfg: RunConfig) -> ParamStore:
    ckpt = os.path.join(cfg.paths["model_dir"], CHECKPOINT_NAME)
    if not os.path.isfile(ckpt):
        raise DataError(f"checkpoint not found: {ckpt} (run `trackloop train`)")
    return load_checkpoint(ckpt)


def _track_job(args) -> list:
    spec, data_dir, variant, params, noise, forecaster, tracker_cfg, kf_cfg = args
    sim = SimConfig(**spec["sim"])
    scenario = generate_scenario(sim, spec["seed"])
    dets = read_detections(
        os.path.join(data_dir, f"dets_{spec['index']:03d}.jsonl"))
    return run_tracker(scenario, dets, params, variant=variant, noise=noise,
                       forecaster=forecaster, kf_cfg=kf_cfg,
                       tracker_cfg=tracker_cfg)


def cmd_track(cfg: RunConfig, outdir: str) -> None:
    specs = _scenario_specs(cfg.paths["data_dir"])
    params = None if cfg.variant == "kf" else _load_params(cfg)
    tracker_cfg = None if cfg.variant == "kf" else _variant_tracker(cfg)
    jobs = [(spec, cfg.paths["data_dir"], cfg.variant, params, cfg.noise,
             cfg.forecaster, tracker_cfg, cfg.kf) for spec in specs]
    runs = _map_jobs(_track_job, jobs, cfg.jobs)
    os.makedirs(outdir, exist_ok=True)
    artifacts = []
    for spec, logs in zip(specs, runs):
        name = f"tracks_{spec['index']:03d}.jsonl"
        write_framelogs(os.path.join(outdir, name), logs)
        artifacts.append(name)
    _write_manifest(outdir, cfg, artifacts)
    total = sum(len(log.tracks) for logs in runs for log in logs)
    print(f"tracked {len(specs)} scenario(s) with {cfg.variant!r} "
          f"({total} track records) -> {outdir}")


def _variant_tracker(cfg: RunConfig) -> TrackerConfig:
    """Apply the variant's ablation flags on top of the [tracker] section."""
    flags = {"pnp": {}, "pnp-no-sot": {"sot": False},
             "pnp-no-motion": {"motion": False},
             "pnp-no-rescore": {"rescore": False},
             "pnp-no-refine": {"refine": False}}
    return replace(cfg.tracker, **flags[cfg.variant])


def cmd_eval(cfg: RunConfig, outdir: str) -> None:
    tracks_dir = cfg.paths["tracks_dir"]
    data_dir = cfg.paths["data_dir"]
    try:
        names = sorted(n for n in os.listdir(tracks_dir)
                       if re.fullmatch(r"tracks_\d+\.jsonl", n))
    except OSError as e:
        raise DataError(f"cannot list {tracks_dir}: {e.strerror}")
    if not names:
        raise DataError(f"no tracks_*.jsonl files in {tracks_dir}")
    runs, gts = [], []
    for name in names:
        gt_name = "gt_" + name[len("tracks_"):-len(".jsonl")] + ".jsonl"
        gt_path = os.path.join(data_dir, gt_name)
        if not os.path.isfile(gt_path):
            raise DataError(f"missing ground truth {gt_path} for {name}")
        runs.append(read_framelogs(os.path.join(tracks_dir, name)))
        gts.append(read_gtlogs(gt_path))
    frames, gtlogs = pool_scenarios(runs, gts)
    has_forecasts = any(log.tracks for log in frames) and all(
        t.forecast is not None for log in frames for t in log.tracks)
    report = evaluate(frames, gtlogs, frame_rate=cfg.sim.frame_rate,
                      with_forecasts=has_forecasts)
    write_report(outdir, report)
    artifacts = ["report.json", "pr_curve.csv", "amota_table.csv"]
    if report.prediction is not None:
        artifacts.append("fde_recall.csv")
    _write_manifest(outdir, cfg, artifacts)
    print(f"evaluated {len(names)} scenario(s) -> {outdir}")
    _print_report(report)


def _print_report(report: Report) -> None:
    d = report_dict(report)
    det, mot = d["detection"], d["mot"]
    print(f"detection   AP {det['ap']:.4f}   max recall {det['max_recall']:.4f}")
    print(f"mot         MOTA {mot['mota']:.4f}   MOTP {mot['motp']:.4f}   "
          f"FP {mot['fp']}   FN {mot['fn']}   IDS {mot['ids']}   "
          f"FRAG {mot['frag']}   MT {mot['mt']}   ML {mot['ml']}")
    print(f"amota       AMOTA {d['amota']['amota']:.4f}   "
          f"AMOTP {d['amota']['amotp']:.4f}")
    print(f"durations   TID {d['durations']['tid_seconds']:.3f}s   "
          f"LGD {d['durations']['lgd_seconds']:.3f}s")
    for key in sorted(d.get("prediction", {})):
        pt = d["prediction"][key]
        print(f"{key:<11} ADE {pt['ade']:.4f}   FDE {pt['fde']:.4f}   "
              f"pairs {pt['n_pairs']}")


# ===== ablation and track-length sweep =====


def _held_out_data(cfg: RunConfig) -> List[Tuple]:
    """Simulate the command's own scenario set once, shared by all variants."""
    data = []
    for i in range(cfg.scenarios):
        scenario, dets = simulate(cfg.sim, cfg.noise, cfg.seed + i)
        data.append((scenario, dets, make_gt_frames(scenario)))
    return data


def _variant_job(args) -> dict:
    scenario, dets, params, noise, forecaster, variants = args
    out = {}
    for key, tracker_cfg in variants.items():
        out[key] = run_tracker(scenario, dets, params, variant="pnp",
                               noise=noise, forecaster=forecaster,
                               tracker_cfg=tracker_cfg)
    return out


def _evaluate_variants(cfg: RunConfig, params: ParamStore,
                       variants: Dict[str, TrackerConfig]) -> Dict[str, Report]:
    data = _held_out_data(cfg)
    jobs = [(scenario, dets, params, cfg.noise, cfg.forecaster, variants)
            for scenario, dets, _ in data]
    per_scenario = _map_jobs(_variant_job, jobs, cfg.jobs)
    gts = [gt for _, _, gt in data]
    reports = {}
    for key in variants:
        frames, gtlogs = pool_scenarios([r[key] for r in per_scenario], gts)
        reports[key] = evaluate(frames, gtlogs,
                                frame_rate=cfg.sim.frame_rate)
    return reports


def _pred_point(report: Report, target: float) -> Tuple[float, float]:
    for pt in report.prediction.points:
        if abs(pt.target_recall - target) < 1e-9:
            return pt.ade, pt.fde
    return math.nan, math.nan


def ablation_rows(cfg: RunConfig, params: ParamStore) -> List[dict]:
    """Full model plus each single-removal variant on the same scenarios."""
    variants = {name: _variant_tracker(replace(cfg, variant=name))
                for name in ABLATION_VARIANTS}
    reports = _evaluate_variants(cfg, params, variants)
    full = reports["pnp"]
    full_ade, full_fde = _pred_point(full, 0.6)
    rows = []
    for name in ABLATION_VARIANTS:
        rep = reports[name]
        ade, fde = _pred_point(rep, 0.6)
        rows.append({
            "variant": name,
            "ap": rep.detection.ap,
            "max_recall": rep.detection.max_recall,
            "ade": ade, "fde": fde,
            "mota": rep.mot.mota, "ids": rep.mot.ids,
            "d_ap": rep.detection.ap - full.detection.ap,
            "d_max_recall": rep.detection.max_recall - full.detection.max_recall,
            "d_ade": ade - full_ade, "d_fde": fde - full_fde,
        })
    return rows


def check_gate(rows: Sequence[dict]) -> List[str]:
    """Expected ablation directions; returns human-readable violations."""
    by = {row["variant"]: row for row in rows}
    problems = []
    if not by["pnp-no-sot"]["d_max_recall"] < 0.0:
        problems.append("removing the occlusion search did not reduce max recall")
    row = by["pnp-no-motion"]
    if not (row["d_ade"] > 0.0 and row["d_fde"] > 0.0):
        problems.append("removing the motion feature did not increase ADE/FDE")
    if not abs(row["d_max_recall"]) <= 0.005:
        problems.append("removing the motion feature moved max recall by more "
                        "than 0.5 points")
    if not by["pnp-no-rescore"]["d_ap"] < 0.0:
        problems.append("removing rescoring did not reduce AP")
    row = by["pnp-no-refine"]
    if not (row["d_ade"] > 0.0 and row["d_fde"] > 0.0):
        problems.append("removing refinement did not increase ADE/FDE")
    return problems


_ABLATION_COLS = ("variant", "ap", "max_recall", "ade", "fde", "mota", "ids",
                  "d_ap", "d_max_recall", "d_ade", "d_fde")


def cmd_ablate(cfg: RunConfig, outdir: str, gate: bool) -> None:
    params = _load_params(cfg)
    rows = ablation_rows(cfg, params)
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "ablation.csv"), "w", newline="") as f:
        f.write(",".join(_ABLATION_COLS) + "\n")
        for row in rows:
            f.write(",".join(_fmt_cell(row[c]) for c in _ABLATION_COLS) + "\n")
    with open(os.path.join(outdir, "ablation.json"), "w") as f:
        json.dump({"rows": rows}, f, indent=2, sort_keys=True)
        f.write("\n")
    _write_manifest(outdir, cfg, ["ablation.csv", "ablation.json"])
    header = (f"{'variant':<16} {'AP':>8} {'maxR':>8} {'ADE':>8} {'FDE':>8}"
              f" {'dAP':>8} {'dmaxR':>8} {'dADE':>8} {'dFDE':>8}")
    print(header)
    for row in rows:
        print(f"{row['variant']:<16} {row['ap']:>8.4f} "
              f"{row['max_recall']:>8.4f} {row['ade']:>8.4f} "
              f"{row['fde']:>8.4f} {row['d_ap']:>+8.4f} "
              f"{row['d_max_recall']:>+8.4f} {row['d_ade']:>+8.4f} "
              f"{row['d_fde']:>+8.4f}")
    if gate:
        problems = check_gate(rows)
        if problems:
            raise GateFailure("; ".join(problems))
        print("gate: all ablation directions as expected")


def _fmt_cell(value) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, int):
        return str(value)
    return f"{value:.6f}"


def sweep_rows(cfg: RunConfig, params: ParamStore) -> List[dict]:
    """Metrics as a function of bounded track history length."""
    variants = {}
    for t in SWEEP_LENGTHS:
        variants[t] = replace(cfg.tracker, history_cap=t,
                              refine_window=min(cfg.tracker.refine_window, t),
                              windowed_memory=True)
    reports = _evaluate_variants(cfg, params, variants)
    rows = []
    for t in SWEEP_LENGTHS:
        rep = reports[t]
        ade60, fde60 = _pred_point(rep, 0.6)
        ade90, fde90 = _pred_point(rep, 0.9)
        rows.append({"track_len": t, "ap": rep.detection.ap,
                     "max_recall": rep.detection.max_recall,
                     "mota": rep.mot.mota, "amota": rep.amota.amota,
                     "ade60": ade60, "fde60": fde60,
                     "ade90": ade90, "fde90": fde90})
    return rows


_SWEEP_COLS = ("track_len", "ap", "max_recall", "mota", "amota",
               "ade60", "fde60", "ade90", "fde90")


def cmd_sweep(cfg: RunConfig, outdir: str) -> None:
    params = _load_params(cfg)
    rows = sweep_rows(cfg, params)
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "tracklen.csv"), "w", newline="") as f:
        f.write(",".join(_SWEEP_COLS) + "\n")
        for row in rows:
            f.write(",".join(_fmt_cell(row[c]) for c in _SWEEP_COLS) + "\n")
    with open(os.path.join(outdir, "tracklen.json"), "w") as f:
        json.dump({"rows": rows}, f, indent=2, sort_keys=True)
        f.write("\n")
    _write_manifest(outdir, cfg, ["tracklen.csv", "tracklen.json"])
    print(f"{'T':>4} {'AP':>8} {'maxR':>8} {'ADE@60':>8} {'FDE@60':>8}")
    for row in rows:
        print(f"{row['track_len']:>4} {row['ap']:>8.4f} "
              f"{row['max_recall']:>8.4f} {row['ade60']:>8.4f} "
              f"{row['fde60']:>8.4f}")


# ===== entry point =====


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trackloop",
        description="Synthetic scenario tracking: generate data, train the "
                    "learned tracker, run trackers, evaluate, ablate.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    specs = [
        ("generate", "simulate scenarios and write detection/GT logs"),
        ("train", "optimize the learned tracker on online rollouts"),
        ("track", "run a tracker over generated scenarios"),
        ("eval", "score track logs against ground truth"),
        ("ablate", "compare the full model against single-removal variants"),
        ("sweep-tracklen", "evaluate bounded track history lengths"),
    ]
    for name, help_text in specs:
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", required=True, metavar="PATH",
                        help="INI config file (docs/config.md)")
        sp.add_argument("--seed", type=int, default=None, metavar="N",
                        help="override the [run] seed")
        sp.add_argument("--out", default=None, metavar="DIR",
                        help="override the command's output directory")
        if name in ("track", "ablate", "sweep-tracklen"):
            sp.add_argument("--jobs", type=int, default=None, metavar="N",
                            help="scenario-level worker processes")
        if name == "track":
            sp.add_argument("--tracker", default=None,
                            choices=list(TRACKER_VARIANTS),
                            help="tracker variant to run")
        if name == "ablate":
            sp.add_argument("--gate", action="store_true",
                            help="exit 4 unless ablation directions match "
                                 "expectations")
    return parser


_OUT_KEY = {"generate": "data_dir", "train": "model_dir", "track": "tracks_dir",
            "eval": "report_dir", "ablate": "report_dir",
            "sweep-tracklen": "report_dir"}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = load_config(args.config, args.command, seed=args.seed,
                          tracker=getattr(args, "tracker", None),
                          jobs=getattr(args, "jobs", None))
        outdir = args.out if args.out is not None \
            else cfg.paths[_OUT_KEY[args.command]]
        if args.command == "generate":
            cmd_generate(cfg, outdir)
        elif args.command == "train":
            cmd_train(cfg, outdir)
        elif args.command == "track":
            cmd_track(cfg, outdir)
        elif args.command == "eval":
            cmd_eval(cfg, outdir)
        elif args.command == "ablate":
            cmd_ablate(cfg, outdir, gate=args.gate)
        else:
            cmd_sweep(cfg, outdir)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except GateFailure as e:
        print(f"gate failure: {e}", file=sys.stderr)
        return 4
    except (DataError, ShapeError, TrainingError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
