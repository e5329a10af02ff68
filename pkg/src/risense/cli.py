"""
Command-line entry point: ``risense {generate,ris-study,detect,evaluate,experiment}``.

Exit codes
----------
0  success
2  usage error (bad arguments)
3  configuration invalid
4  generation failure (one or more captures could not be generated)
5  I/O failure (missing or unreadable/unwritable files)
6  schema mismatch (manifest or detection files of the wrong format)
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from . import channel as chan
from .config import OUTPUT_ROOT_ENV, PROFILES, RisStudyConfig, RunConfig, load_config
from .dataset import DatasetManifest, RisPipeline, generate_dataset, manifest_ground_truth
from .detector import DetectorParams, detect, read_detections, write_detections
from .errors import ConfigError, RisenseError, SchemaMismatch
from .evaluation import (ApReport, MatchConfig, ScoredBox, best_match_iou, delta_table, format_delta_table,
                         map_range)
from .spectrogram import StftParams, matrix_from_image, stft
from .waveform import SignalClass, read_iq

log = logging.getLogger("risense")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_GENERATION = 4
EXIT_IO = 5
EXIT_SCHEMA = 6

RIS_STUDY_SPAWN = 1000  # spawn-key namespace for optimizer-study channels
SIGNAL_CLASSES = (SignalClass.LTE, SignalClass.NR)


class CommandFailed(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _write_json(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def run_generate(cfg: RunConfig, modes=None, out_root: Optional[Path] = None) -> DatasetManifest:
    modes = modes if modes is not None else cfg.ris_pipeline
    return generate_dataset(cfg.scenario, modes, Path(out_root or cfg.output_root), cfg.pipeline_settings(),
                            save_iq=cfg.save_iq, jobs=cfg.jobs, image_format=cfg.image_format)


def _generation_errors(manifest: DatasetManifest) -> list[str]:
    return [f"{r['capture_id']}: {r['error']}" for r in manifest.records if r.get("error")]


# ---------------------------------------------------------------------------
# ris-study
# ---------------------------------------------------------------------------

def study_channel_seed(master_seed: int, trial: int) -> int:
    ss = np.random.SeedSequence(master_seed, spawn_key=(RIS_STUDY_SPAWN, trial))
    return int(ss.generate_state(1)[0])


def run_ris_study(study: RisStudyConfig, master_seed: int, out_dir: Path) -> dict:
    """Monte-Carlo greedy-optimizer study; writes report.json, gains.csv and trace CSVs."""
    out_dir = Path(out_dir)
    rows = []
    for t in range(study.trials):
        params = chan.ChannelModelParams(study.n_elements, study.rician_k, study.direct_gain_db,
                                         seed=study_channel_seed(master_seed, t))
        ch = chan.sample_channel(params)
        ris, trace = chan.optimize_ris_greedy(ch, chan.RisConfig.off(study.n_elements, study.alpha),
                                              study.iterations, study.order, order_seed=params.seed)
        row = {"trial": t, "channel_seed": params.seed, "initial_power": trace.initial_power,
               "final_power": trace.final_power, "gain_db": trace.gain_db, "iterations": trace.iterations,
               "flips_accepted": trace.flips_accepted,
               "upper_bound_power": chan.continuous_phase_upper_bound(ch, study.alpha)}
        if study.exhaustive:
            best, _ = chan.exhaustive_max_power(ch, study.alpha)
            row["exhaustive_power"] = best
            # re-score the final state the same way the exhaustive search does
            final = chan.received_power(ch, ris)
            row["greedy_exhaustive_ratio"] = final / best if best > 0 else 1.0
        rows.append(row)
        if t < study.trace_files:
            trace.write_csv(out_dir / "traces" / f"trial_{t:05d}.csv")

    gains = np.array([r["gain_db"] for r in rows], dtype=float)
    pct = (10, 25, 50, 75, 90)
    report = {"config": {k: (None if isinstance(v, float) and math.isinf(v) else v)
                         for k, v in vars(study).items()},
              "master_seed": master_seed, "trials": len(rows),
              "gain_db": {f"p{p}": float(np.percentile(gains, p)) for p in pct},
              "median_gain_db": float(np.median(gains)), "mean_gain_db": float(np.mean(gains))}
    if study.exhaustive:
        ratios = np.array([r["greedy_exhaustive_ratio"] for r in rows])
        report["greedy_exhaustive_ratio"] = {"min": float(ratios.min()), "median": float(np.median(ratios)),
                                             "mean": float(ratios.mean())}
    _write_json(out_dir / "report.json", report)
    with open(out_dir / "gains.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(v)) if isinstance(v, (float, np.floating)) else v for k, v in r.items()})
    return report


def format_ris_study(report: dict) -> str:
    g = report["gain_db"]
    lines = [f"greedy RIS optimizer: {report['trials']} trials, "
             f"N={report['config']['n_elements']}, {report['config']['iterations']} iterations",
             f"{'percentile':>10} {'gain_dB':>9}"]
    lines += [f"{k:>10} {v:9.2f}" for k, v in g.items()]
    if "greedy_exhaustive_ratio" in report:
        r = report["greedy_exhaustive_ratio"]
        lines.append(f"greedy/exhaustive power ratio: min {r['min']:.4f} median {r['median']:.4f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# detect
# ---------------------------------------------------------------------------

def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        return DatasetManifest.load(path)
    except FileNotFoundError as exc:
        raise CommandFailed(EXIT_IO, f"manifest not found: {path}") from exc
    except (json.JSONDecodeError, KeyError) as exc:
        raise CommandFailed(EXIT_SCHEMA, f"{path}: not a manifest ({exc})") from exc
    except SchemaMismatch as exc:
        raise CommandFailed(EXIT_SCHEMA, str(exc)) from exc


def detect_record(record: dict, root: Path, header: dict, params: DetectorParams):
    """Detections for one manifest record: from IQ when saved, otherwise from its image."""
    size = header["image_size"]
    if record.get("iq_path"):
        iq, _ = read_iq(root / record["iq_path"])
        spec = stft(iq, StftParams(**header["stft"]))
        return detect(spec, iq, params, size)
    with Image.open(root / record["image_path"]) as img:
        rgb = np.asarray(img.convert("RGB"))
    sc = header["scenario_config"]
    n_samples = round(sc["capture_rate_hz"] * sc["capture_duration_s"])
    spec = matrix_from_image(rgb, sc["capture_rate_hz"], n_samples, tuple(header["db_range"]))
    return detect(spec, None, params, size)


def _detect_task(task):
    record, root, header, params, out_dir = task
    try:
        dets = detect_record(record, root, header, params)
    except (OSError, KeyError, ValueError) as exc:
        return record["capture_id"], f"{type(exc).__name__}: {exc}"
    write_detections(out_dir / f"{record['capture_id']}.json", record["capture_id"], dets)
    return record["capture_id"], None


def run_detect(manifest: DatasetManifest, out_dir: Path, params: DetectorParams, jobs: int = 1) -> list[str]:
    """Write one detection file per generated capture; returns per-capture failures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(r, manifest.root, manifest.header, params, out_dir) for r in manifest.select()]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_detect_task, tasks))
    else:
        results = [_detect_task(t) for t in tasks]
    return [f"{cid}: {err}" for cid, err in results if err]


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def load_detections(det_dir: Path, records: Sequence[dict]) -> list[ScoredBox]:
    out = []
    for r in records:
        path = Path(det_dir) / f"{r['capture_id']}.json"
        if not path.is_file():
            continue  # a missing file means no detections for that capture
        try:
            cid, dets = read_detections(path)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CommandFailed(EXIT_SCHEMA, f"{path}: not a detection file ({exc})") from exc
        if cid != r["capture_id"]:
            raise CommandFailed(EXIT_SCHEMA, f"{path}: capture_id {cid!r} does not match {r['capture_id']!r}")
        out.extend(ScoredBox(cid, d.cls, d.box, d.score) for d in dets)
    return out


def mean_signal_iou(dets: Sequence[ScoredBox], gts) -> Optional[float]:
    """Mean best-match IoU over LTE/NR ground-truth boxes."""
    vals = [best_match_iou(dets, g) for g in gts if g.cls in SIGNAL_CLASSES]
    return float(np.mean(vals)) if vals else None


def run_evaluate(manifest: DatasetManifest, det_dir: Path, out_dir: Path, match_cfg: MatchConfig,
                 split: str = "test") -> dict:
    """Per-mode AP reports plus, for paired Off/Optimized manifests, the delta table."""
    out_dir = Path(out_dir)
    split_sel = None if split == "all" else split
    modes = [m for m in manifest.header.get("ris_pipelines", []) if manifest.select(split_sel, m)]
    summary: dict = {"split": split, "modes": {}}
    reports: dict[str, ApReport] = {}
    for mode in modes:
        records = manifest.select(split_sel, mode)
        gts = manifest_ground_truth(records)
        dets = load_detections(det_dir, records)
        rep = map_range(dets, gts, match_cfg)
        reports[mode] = rep
        rep.write(out_dir, f"report_{mode}")
        summary["modes"][mode] = {"n_images": len(records), "mAP_50_95": rep.map_range, "mAP_50": rep.map50,
                                  "ap50": rep.ap50, "ap_50_95": rep.ap_range,
                                  "mean_signal_iou": mean_signal_iou(dets, gts)}
    if RisPipeline.OFF.value in reports and RisPipeline.OPTIMIZED.value in reports:
        rows = delta_table(reports["off"], reports["optimized"])
        summary["delta"] = rows
        _write_json(out_dir / "delta.json", rows)
        (out_dir / "delta.txt").write_text(format_delta_table(rows), encoding="utf-8")
    _write_json(out_dir / "evaluation.json", summary)
    return summary


# ---------------------------------------------------------------------------
# experiment
# ---------------------------------------------------------------------------

def run_experiment(cfg: RunConfig, out_root: Optional[Path] = None) -> dict:
    """Paired Off/Optimized generation (with IQ) -> detection -> evaluation -> summary."""
    root = Path(out_root or cfg.output_root)
    cfg = cfg.with_overrides(save_iq=True)
    manifest = run_generate(cfg, [RisPipeline.OFF, RisPipeline.OPTIMIZED], root / "dataset")
    det_failures = run_detect(manifest, root / "detections", cfg.detector, cfg.jobs)
    evaluation = run_evaluate(manifest, root / "detections", root / "evaluation", cfg.match, split="all")
    gains = [r["ris"]["gain_db"] for r in manifest.select(mode="optimized") if r["ris"].get("gain_db") is not None]
    summary = {
        "master_seed": cfg.master_seed,
        "counts": manifest.counts(),
        "generation_errors": _generation_errors(manifest),
        "detection_errors": det_failures,
        "ris_gain_db": {"median": float(np.median(gains)) if gains else None,
                        "min": min(gains) if gains else None, "max": max(gains) if gains else None},
        "evaluation": evaluation,
    }
    _write_json(root / "summary.json", summary)
    (root / "summary.txt").write_text(format_experiment(summary), encoding="utf-8")
    return summary


def format_experiment(summary: dict) -> str:
    def f(v):
        return "n/a" if v is None else f"{v:.4f}"
    ev = summary["evaluation"]
    lines = [f"master_seed {summary['master_seed']}",
             "captures: " + ", ".join(f"{k}={v}" for k, v in summary["counts"].items()),
             f"median RIS gain (optimized vs off): {f(summary['ris_gain_db']['median'])} dB"]
    for mode, m in ev["modes"].items():
        lines.append(f"{mode:>10}: mAP@0.5 {f(m['mAP_50'])}  mAP@[.5:.95] {f(m['mAP_50_95'])}  "
                     f"mean signal IoU {f(m['mean_signal_iou'])}")
    if "delta" in ev:
        lines.append("")
        lines.append(format_delta_table(ev["delta"]).rstrip("\n"))
    for key in ("generation_errors", "detection_errors"):
        for e in summary[key]:
            lines.append(f"{key[:-1].replace('_', ' ')}: {e}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="default",
                        help=f"YAML config path or built-in profile ({', '.join(PROFILES)}); default: default")
    common.add_argument("--out", help=f"output directory (overrides config and ${OUTPUT_ROOT_ENV})")
    common.add_argument("--jobs", type=int, help="worker processes")
    common.add_argument("--seed", type=int, help="master seed override")
    common.add_argument("--ris", choices=[m.value for m in RisPipeline], help="RIS pipeline for generate")
    common.add_argument("--save-iq", action="store_true", default=None, help="also store received IQ")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="risense", description="RIS-aided spectrum sensing simulator")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="generate a spectrogram dataset")
    sub.add_parser("ris-study", parents=[common], help="Monte-Carlo study of the greedy RIS optimizer")
    d = sub.add_parser("detect", parents=[common], help="run the baseline detector over a dataset")
    d.add_argument("manifest", help="manifest.json or dataset directory")
    e = sub.add_parser("evaluate", parents=[common], help="score detections against a dataset")
    e.add_argument("manifest", help="manifest.json or dataset directory")
    e.add_argument("detections", help="directory of per-capture detection files")
    e.add_argument("--split", choices=["train", "test", "all"], default="test")
    sub.add_parser("experiment", parents=[common],
                   help="paired Off/Optimized generate -> detect -> evaluate with one summary")
    return p


def _dispatch(args) -> int:
    cfg = load_config(args.config).with_overrides(seed=args.seed, out=args.out, jobs=args.jobs, ris=args.ris,
                                                  save_iq=args.save_iq)
    out = Path(cfg.output_root)
    if args.command == "generate":
        manifest = run_generate(cfg)
        print(manifest.root / "manifest.json")
        for k, v in manifest.counts().items():
            print(f"{k}: {v}")
        errors = _generation_errors(manifest)
        for e in errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_GENERATION if errors else EXIT_OK
    if args.command == "ris-study":
        report = run_ris_study(cfg.ris_study, cfg.master_seed, out / "ris_study")
        sys.stdout.write(format_ris_study(report))
        return EXIT_OK
    if args.command == "detect":
        manifest = load_manifest(args.manifest)
        det_dir = Path(args.out) if args.out else manifest.root / "detections"
        failures = run_detect(manifest, det_dir, cfg.detector, cfg.jobs)
        for f in failures:
            print(f"error: {f}", file=sys.stderr)
        print(det_dir)
        return EXIT_IO if failures else EXIT_OK
    if args.command == "evaluate":
        manifest = load_manifest(args.manifest)
        det_dir = Path(args.detections)
        if not det_dir.is_dir():
            raise CommandFailed(EXIT_IO, f"detections directory not found: {det_dir}")
        eval_dir = Path(args.out) if args.out else det_dir.parent / "evaluation"
        summary = run_evaluate(manifest, det_dir, eval_dir, cfg.match, args.split)
        for mode, m in summary["modes"].items():
            print(f"{mode}: mAP@0.5={m['mAP_50']} mAP@[.5:.95]={m['mAP_50_95']}")
        if "delta" in summary:
            sys.stdout.write(format_delta_table(summary["delta"]))
        return EXIT_OK
    if args.command == "experiment":
        summary = run_experiment(cfg)
        sys.stdout.write(format_experiment(summary))
        return EXIT_OK
    raise AssertionError(args.command)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except CommandFailed as exc:
        print(f"risense: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"risense: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SchemaMismatch as exc:
        print(f"risense: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except RisenseError as exc:
        print(f"risense: generation failed: {exc}", file=sys.stderr)
        return EXIT_GENERATION
    except OSError as exc:
        print(f"risense: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
