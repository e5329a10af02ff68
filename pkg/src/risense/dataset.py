"""
Scenario sampling, corpus generation and COCO / YOLO annotation export.

Every capture is a pure function of ``(master_seed, scenario, index)``: the
per-capture seed material comes from ``numpy.random.SeedSequence`` with that
triple as spawn key, so captures can be generated in any order or in
parallel and still produce identical files.

Output layout under the dataset root::

    images/{split}/{capture_id}.png
    labels_yolo/{split}/{capture_id}.txt
    iq/{split}/{capture_id}.cf32 (+ .meta)     only with save_iq
    annotations_{split}.json                    COCO-style
    manifest.json
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import channel as chan
from .errors import InfeasiblePlacement, RisenseError, SchemaMismatch
from .spectrogram import (AXIS_CONVENTION, DEFAULT_DB_RANGE, IMAGE_SIZE, PixelBox, SpectrogramMatrix,
                          StftParams, map_box, save_image, stft, to_image)
from .waveform import (LTE_BANDWIDTHS_HZ, LTE_SCS_HZ, NR_BANDWIDTHS_HZ, NR_SCS_HZ, GroundTruthBox, IqFrame,
                       SignalClass, WaveformSpec, combine_labeled, synthesize, unoccupied_boxes, write_iq)

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "risense.manifest/1"
CLASS_ORDER = (SignalClass.LTE, SignalClass.NR, SignalClass.UNOCCUPIED)
PIXEL_QUANTUM = 1.0 / 1024  # stored pixel boxes are dyadic so x + (x1 - x) == x1 exactly
SUBFRAME_S = 1e-3


class Scenario(str, Enum):
    LTE_ONLY = "LteOnly"
    NR_ONLY = "NrOnly"
    BOTH = "Both"


class RisPipeline(str, Enum):
    OFF = "off"
    OPTIMIZED = "optimized"
    IDEAL = "ideal"


_SCENARIO_CODE = {Scenario.LTE_ONLY: 0, Scenario.NR_ONLY: 1, Scenario.BOTH: 2}


@dataclass(frozen=True)
class ScenarioConfig:
    scenarios: tuple = (Scenario.LTE_ONLY, Scenario.NR_ONLY, Scenario.BOTH)
    lte_bandwidths_hz: tuple = LTE_BANDWIDTHS_HZ
    nr_bandwidths_hz: tuple = NR_BANDWIDTHS_HZ
    nr_scs_hz: tuple = NR_SCS_HZ
    snr_grid_db: tuple = (0.0, 20.0, 50.0)
    doppler_grid_hz: tuple = (0.0, 10.0, 500.0)
    n_train: int = 900
    n_test: int = 300
    capture_rate_hz: float = 60e6
    capture_duration_s: float = 0.040
    master_seed: int = 0
    time_span_mode: str = "full"
    offset_raster_hz: float = 100e3
    unoccupied_min_width_hz: float = 1e6
    placement_retries: int = 64
    enforce_standard_grids: bool = True

    def __post_init__(self):
        object.__setattr__(self, "scenarios", tuple(Scenario(s) for s in self.scenarios))
        for name in ("lte_bandwidths_hz", "nr_bandwidths_hz", "nr_scs_hz", "snr_grid_db", "doppler_grid_hz"):
            vals = tuple(float(v) for v in getattr(self, name))
            if not vals:
                raise ValueError(f"{name} must be non-empty")
            object.__setattr__(self, name, vals)
        if not self.scenarios:
            raise ValueError("at least one scenario is required")
        if self.n_train <= 0 or self.n_test <= 0:
            raise ValueError("n_train and n_test must be positive")
        if self.time_span_mode not in ("full", "random"):
            raise ValueError("time_span_mode must be 'full' or 'random'")
        if self.enforce_standard_grids:
            for name, grid in (("lte_bandwidths_hz", LTE_BANDWIDTHS_HZ), ("nr_bandwidths_hz", NR_BANDWIDTHS_HZ),
                               ("nr_scs_hz", NR_SCS_HZ)):
                extra = set(getattr(self, name)) - set(grid)
                if extra:
                    raise ValueError(f"{name} values {sorted(extra)} are outside the standard grid {grid}")

    @property
    def n_per_scenario(self) -> int:
        return self.n_train + self.n_test

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["scenarios"] = [s.value for s in self.scenarios]
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass(frozen=True)
class CaptureParams:
    """Everything needed to regenerate one capture."""

    scenario: Scenario
    index: int
    split: str
    seed: int
    waveforms: tuple
    snr_db: float
    doppler_hz: float
    channel_seed: int
    noise_seed: int

    @property
    def base_id(self) -> str:
        return f"{self.scenario.value}_{self.split}_{self.index:05d}"

    def to_dict(self) -> dict:
        return {"scenario": self.scenario.value, "index": self.index, "split": self.split, "seed": self.seed,
                "waveforms": [w.to_dict() for w in self.waveforms], "snr_db": self.snr_db,
                "doppler_hz": self.doppler_hz, "channel_seed": self.channel_seed, "noise_seed": self.noise_seed}


def _raster_points(lo: float, hi: float, raster: float) -> tuple[int, int]:
    return math.ceil(lo / raster - 1e-9), math.floor(hi / raster + 1e-9)


def _place(rng: np.random.Generator, lo: float, hi: float, raster: float) -> Optional[float]:
    a, b = _raster_points(lo, hi, raster)
    if a > b:
        return None
    return float(int(rng.integers(a, b + 1)) * raster)


def _time_span(rng: np.random.Generator, cfg: ScenarioConfig):
    if cfg.time_span_mode == "full":
        return None
    n_sub = max(int(round(cfg.capture_duration_s / SUBFRAME_S)), 1)
    start = int(rng.integers(0, n_sub))
    stop = int(rng.integers(start + 1, n_sub + 1))
    return (start * SUBFRAME_S, min(stop * SUBFRAME_S, cfg.capture_duration_s))


def sample_scenario(cfg: ScenarioConfig, scenario: Scenario | str, index: int) -> CaptureParams:
    """Bind all random parameters of capture ``index`` of ``scenario``.

    Bandwidths, SCS, SNR and Doppler are drawn uniformly from the grids.
    Centers sit on ``offset_raster_hz``; in the Both scenario the nominal LTE
    and NR bands are kept disjoint, redrawing bandwidths when they cannot fit.
    """
    scenario = Scenario(scenario)
    if not 0 <= index < cfg.n_per_scenario:
        raise IndexError(f"index {index} outside [0, {cfg.n_per_scenario})")
    ss = np.random.SeedSequence(cfg.master_seed, spawn_key=(_SCENARIO_CODE[scenario], index))
    seed_ss, rng_ss = ss.spawn(2)
    seed, payload_seed, channel_seed, noise_seed = (int(v) for v in seed_ss.generate_state(4))
    rng = np.random.default_rng(rng_ss)
    half = cfg.capture_rate_hz / 2
    raster = cfg.offset_raster_hz

    def draw_lte():
        return WaveformSpec(SignalClass.LTE, float(rng.choice(cfg.lte_bandwidths_hz)), LTE_SCS_HZ)

    def draw_nr():
        return WaveformSpec(SignalClass.NR, float(rng.choice(cfg.nr_bandwidths_hz)), float(rng.choice(cfg.nr_scs_hz)))

    for _ in range(cfg.placement_retries):
        if scenario is Scenario.BOTH:
            pair = [draw_lte(), draw_nr()]
            if rng.random() < 0.5:
                pair.reverse()
            low, high = pair
            c1 = _place(rng, -half + low.bandwidth_hz / 2, half - high.bandwidth_hz - low.bandwidth_hz / 2, raster)
            if c1 is None:
                continue
            c2 = _place(rng, c1 + (low.bandwidth_hz + high.bandwidth_hz) / 2, half - high.bandwidth_hz / 2, raster)
            if c2 is None:
                continue
            placed = [dataclasses.replace(low, center_offset_hz=c1), dataclasses.replace(high, center_offset_hz=c2)]
            placed.sort(key=lambda w: w.kind.value)
        else:
            w = draw_lte() if scenario is Scenario.LTE_ONLY else draw_nr()
            c = _place(rng, -half + w.bandwidth_hz / 2, half - w.bandwidth_hz / 2, raster)
            if c is None:
                continue
            placed = [dataclasses.replace(w, center_offset_hz=c)]
        break
    else:
        raise InfeasiblePlacement(f"{scenario.value} #{index}: no feasible placement after "
                                  f"{cfg.placement_retries} draws")

    waveforms = tuple(dataclasses.replace(w, time_span=_time_span(rng, cfg), payload_seed=payload_seed + i)
                      for i, w in enumerate(placed))
    snr = float(rng.choice(cfg.snr_grid_db))
    doppler = float(rng.choice(cfg.doppler_grid_hz))
    split = "train" if index < cfg.n_train else "test"
    return CaptureParams(scenario, index, split, seed, waveforms, snr, doppler, channel_seed, noise_seed)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PipelineSettings:
    """Shared, non-random settings for rendering captures."""

    stft: StftParams = StftParams()
    channel: chan.ChannelModelParams = chan.ChannelModelParams()
    alpha: float = 1.0
    greedy_iterations: int = 300
    greedy_order: str = "sequential"
    db_range: tuple = DEFAULT_DB_RANGE


@dataclass
class RenderedCapture:
    params: CaptureParams
    mode: RisPipeline
    iq: IqFrame
    spec: SpectrogramMatrix
    boxes: list            # GroundTruthBox, signal boxes first then Unoccupied
    ris_info: dict

    @property
    def capture_id(self) -> str:
        return f"{self.params.base_id}_{self.mode.value}"


def transmit_frame(params: CaptureParams, cfg: ScenarioConfig) -> tuple[IqFrame, list[GroundTruthBox]]:
    parts = [synthesize(w, cfg.capture_rate_hz, cfg.capture_duration_s, params.seed) for w in params.waveforms]
    return combine_labeled(parts)


def render_capture(params: CaptureParams, cfg: ScenarioConfig, mode: RisPipeline | str,
                   settings: PipelineSettings = PipelineSettings()) -> RenderedCapture:
    """Synthesize, propagate and transform one capture in memory.

    ``off`` and ``optimized`` share the channel, fading and noise draws; the
    noise variance is calibrated on the all-off surface in both cases, so the
    optimized surface raises the SNR above the target. ``ideal`` skips the
    RIS channel entirely (unit gain, AWGN at the target SNR).
    """
    mode = RisPipeline(mode)
    x, boxes = transmit_frame(params, cfg)
    info: dict = {}
    if mode is RisPipeline.IDEAL:
        ch = chan.ChannelRealization([], [], 1.0)
        ris = chan.RisConfig.off(0)
        reference = None
    else:
        ch_params = dataclasses.replace(settings.channel, seed=params.channel_seed)
        ch = chan.sample_channel(ch_params)
        off = chan.RisConfig.off(ch.n_elements, settings.alpha)
        reference = off
        ris = off
        if mode is RisPipeline.OPTIMIZED:
            ris, trace = chan.optimize_ris_greedy(ch, off, settings.greedy_iterations, settings.greedy_order,
                                                  params.seed)
            info["iterations"] = trace.iterations
            info["flips_accepted"] = trace.flips_accepted
        p_off = chan.received_power(ch, off)
        p_now = chan.received_power(ch, ris)
        info["n_elements"] = ch.n_elements
        info["power_off_db"] = 10 * math.log10(p_off) if p_off > 0 else None
        info["power_db"] = 10 * math.log10(p_now) if p_now > 0 else None
        info["gain_db"] = (10 * math.log10(p_now / p_off)) if p_off > 0 and p_now > 0 else None
        # scale so that the expected off-state received power is unity
        expected_off = ch.n_elements * settings.alpha ** 2 + 10 ** (settings.channel.direct_gain_db / 10)
        if expected_off > 0:
            x = IqFrame(x.samples / np.float32(math.sqrt(expected_off)), x.sample_rate_hz, x.t0_s)
    rx = chan.apply_channel(x, ch, ris, chan.Hypothesis.H1, params.snr_db, params.doppler_hz,
                            params.noise_seed, reference_ris=reference)
    spec = stft(rx, settings.stft)
    gaps = unoccupied_boxes(boxes, cfg.capture_rate_hz, cfg.capture_duration_s, cfg.unoccupied_min_width_hz)
    return RenderedCapture(params, mode, rx, spec, boxes + gaps, info)


def quantize_pixel_box(pb: PixelBox) -> PixelBox:
    q = PIXEL_QUANTUM
    return PixelBox(*(round(v / q) * q for v in pb.as_tuple()))


def pixel_boxes(rendered: RenderedCapture) -> list[tuple[GroundTruthBox, PixelBox]]:
    return [(b, quantize_pixel_box(map_box(b, rendered.spec, IMAGE_SIZE))) for b in rendered.boxes]


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: Path
    header: dict
    records: list = field(default_factory=list)

    def write(self, path: Optional[Path] = None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.json"
        doc = dict(self.header)
        doc["records"] = self.records
        path.write_text(json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text(encoding="utf-8"))
        if doc.get("schema") != MANIFEST_SCHEMA:
            raise SchemaMismatch(f"{path}: expected schema {MANIFEST_SCHEMA}, got {doc.get('schema')}")
        records = doc.pop("records")
        return cls(path.parent, doc, records)

    def select(self, split: Optional[str] = None, mode: Optional[str] = None) -> list[dict]:
        return [r for r in self.records
                if r.get("error") is None
                and (split is None or r["split"] == split)
                and (mode is None or r["ris_mode"] == mode)]

    def counts(self) -> dict:
        out: dict = {}
        for r in self.records:
            key = f"{r['ris_mode']}/{r['scenario']}/{r['split']}"
            out[key] = out.get(key, 0) + 1
        return dict(sorted(out.items()))


def _box_record(gt: GroundTruthBox, pb: PixelBox) -> dict:
    return {"class": gt.cls.value, "physical": gt.to_dict(), "pixel": list(pb.as_tuple())}


def _generate_one(task) -> dict:
    params, cfg, mode, settings, root, save_iq, image_ext = task
    mode = RisPipeline(mode)
    capture_id = f"{params.base_id}_{mode.value}"
    record = {"capture_id": capture_id, "scenario": params.scenario.value, "split": params.split,
              "index": params.index, "seed": params.seed, "ris_mode": mode.value, "params": params.to_dict(),
              "image_path": None, "iq_path": None, "boxes": [], "ris": {}, "error": None}
    try:
        rendered = render_capture(params, cfg, mode, settings)
    except RisenseError as exc:
        record["error"] = f"{type(exc).__name__}: {exc}"
        return record
    image_rel = f"images/{params.split}/{capture_id}.{image_ext}"
    save_image(to_image(rendered.spec, IMAGE_SIZE, settings.db_range), root / image_rel)
    record["image_path"] = image_rel
    record["image_sha256"] = hashlib.sha256((root / image_rel).read_bytes()).hexdigest()
    if save_iq:
        iq_rel = f"iq/{params.split}/{capture_id}.cf32"
        write_iq(root / iq_rel, rendered.iq, seed=params.seed, extra={"capture_id": capture_id})
        record["iq_path"] = iq_rel
    record["boxes"] = [_box_record(gt, pb) for gt, pb in pixel_boxes(rendered)]
    record["ris"] = rendered.ris_info
    return record


def generate_dataset(cfg: ScenarioConfig, ris_pipeline, out_root,
                     settings: PipelineSettings = PipelineSettings(), save_iq: bool = False, jobs: int = 1,
                     image_format: str = "png") -> DatasetManifest:
    """Generate every capture of every scenario for one or more RIS pipelines.

    ``ris_pipeline`` is a single mode or a sequence of modes; with several
    modes each capture is rendered once per mode from identical seeds.
    Per-capture generation errors are recorded in the manifest; I/O errors
    abort the run.
    """
    modes = [RisPipeline(ris_pipeline)] if isinstance(ris_pipeline, (str, RisPipeline)) \
        else [RisPipeline(m) for m in ris_pipeline]
    if image_format not in ("png", "jpg"):
        raise ValueError("image_format must be png or jpg")
    root = Path(out_root)
    root.mkdir(parents=True, exist_ok=True)

    tasks = []
    for scenario in cfg.scenarios:
        for index in range(cfg.n_per_scenario):
            try:
                params = sample_scenario(cfg, scenario, index)
            except InfeasiblePlacement as exc:
                for mode in modes:
                    tasks.append(("error", scenario, index, mode, str(exc)))
                continue
            for mode in modes:
                tasks.append((params, cfg, mode.value, settings, root, save_iq, image_format))

    def run(task_list):
        real = [t for t in task_list if t[0] != "error"]
        if jobs > 1 and len(real) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                done = list(pool.map(_generate_one, real, chunksize=max(1, len(real) // (4 * jobs))))
        else:
            done = [_generate_one(t) for t in real]
        it = iter(done)
        out = []
        for t in task_list:
            if t[0] == "error":
                _, scenario, index, mode, msg = t
                split = "train" if index < cfg.n_train else "test"
                out.append({"capture_id": f"{scenario.value}_{split}_{index:05d}_{mode.value}",
                            "scenario": scenario.value, "split": split, "index": index, "seed": None,
                            "ris_mode": mode.value, "params": None, "image_path": None, "iq_path": None,
                            "boxes": [], "ris": {}, "error": f"InfeasiblePlacement: {msg}"})
            else:
                out.append(next(it))
        return out

    records = sorted(run(tasks), key=lambda r: r["capture_id"])
    header = {
        "schema": MANIFEST_SCHEMA,
        "axis_convention": AXIS_CONVENTION,
        "image_size": IMAGE_SIZE,
        "image_format": image_format,
        "class_order": [c.value for c in CLASS_ORDER],
        "pixel_quantum": PIXEL_QUANTUM,
        "ris_pipelines": [m.value for m in modes],
        "scenario_config": cfg.to_dict(),
        "stft": dataclasses.asdict(settings.stft),
        "channel": dataclasses.asdict(settings.channel),
        "alpha": settings.alpha,
        "greedy_iterations": settings.greedy_iterations,
        "greedy_order": settings.greedy_order,
        "db_range": list(settings.db_range),
    }
    manifest = DatasetManifest(root, header, records)
    manifest.header["counts"] = manifest.counts()
    for split in ("train", "test"):
        export_coco(manifest, split, root / f"annotations_{split}.json")
        export_yolo(manifest, split, root / "labels_yolo" / split)
    manifest.write()
    return manifest


# ---------------------------------------------------------------------------
# Annotation exports
# ---------------------------------------------------------------------------

def export_coco(manifest: DatasetManifest, split: str, path) -> Path:
    """COCO-style detection annotations; bbox = [x, y, width, height] in pixels."""
    path = Path(path)
    images, annotations = [], []
    categories = [{"id": i + 1, "name": c.value} for i, c in enumerate(CLASS_ORDER)]
    cat_id = {c.value: i + 1 for i, c in enumerate(CLASS_ORDER)}
    ann_id = 1
    size = manifest.header.get("image_size", IMAGE_SIZE)
    for img_id, rec in enumerate(manifest.select(split=split), start=1):
        images.append({"id": img_id, "file_name": rec["image_path"], "width": size, "height": size,
                       "capture_id": rec["capture_id"]})
        for b in rec["boxes"]:
            x0, y0, x1, y1 = b["pixel"]
            w, h = x1 - x0, y1 - y0
            annotations.append({"id": ann_id, "image_id": img_id, "category_id": cat_id[b["class"]],
                                "bbox": [x0, y0, w, h], "area": w * h, "iscrowd": 0})
            ann_id += 1
    doc = {"images": images, "annotations": annotations, "categories": categories}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def import_coco(path) -> dict:
    """capture_id -> list of (class, (x0, y0, x1, y1))."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    names = {c["id"]: c["name"] for c in doc["categories"]}
    by_image = {im["id"]: im.get("capture_id", im["file_name"]) for im in doc["images"]}
    out: dict = {cid: [] for cid in by_image.values()}
    for a in doc["annotations"]:
        x, y, w, h = a["bbox"]
        out[by_image[a["image_id"]]].append((names[a["category_id"]], (x, y, x + w, y + h)))
    return out


def export_yolo(manifest: DatasetManifest, split: str, out_dir) -> Path:
    """One ``{capture_id}.txt`` per image: ``class_index cx cy w h`` normalized to [0, 1]."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    size = float(manifest.header.get("image_size", IMAGE_SIZE))
    index = {c.value: i for i, c in enumerate(CLASS_ORDER)}
    for rec in manifest.select(split=split):
        lines = []
        for b in rec["boxes"]:
            x0, y0, x1, y1 = b["pixel"]
            vals = ((x0 + x1) / 2 / size, (y0 + y1) / 2 / size, (x1 - x0) / size, (y1 - y0) / size)
            lines.append(" ".join([str(index[b["class"]])] + [repr(v) for v in vals]))
        (out_dir / f"{rec['capture_id']}.txt").write_text("".join(l + "\n" for l in lines))
    return out_dir


def import_yolo(path, size: float = IMAGE_SIZE) -> list[tuple[str, tuple]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        k, cx, cy, w, h = line.split()
        cx, cy, w, h = (float(v) * size for v in (cx, cy, w, h))
        out.append((CLASS_ORDER[int(k)].value, (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)))
    return out


def manifest_ground_truth(records: Iterable[dict]):
    """Evaluation ground truth (``LabeledBox`` list) from manifest records."""
    from .evaluation import LabeledBox
    return [LabeledBox(r["capture_id"], b["class"], PixelBox(*b["pixel"]))
            for r in records for b in r["boxes"]]
