"""
Classical baseline spectrum sensing on spectrograms.

Signal boxes come from thresholding the native-resolution spectrogram above
an estimated noise floor, one open-then-close morphology pass and
4-connected component labeling. Each box is then classified from the IQ by
its cyclic-prefix autocorrelation lag (subcarrier spacing) and its measured
occupancy ratio. Unoccupied bands are the frequency complement of the
detected signals.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np
import scipy.fft as sfft
from scipy import ndimage

from .errors import BandTooNarrow
from .spectrogram import IMAGE_SIZE, PixelBox, SpectrogramMatrix, map_box, unmap_box
from .waveform import (DEFAULT_CP_RATIO, LTE_BANDWIDTHS_HZ, NR_BANDWIDTHS_HZ, GroundTruthBox, IqFrame,
                       SignalClass, unoccupied_boxes)

CANDIDATE_SCS_HZ = (15e3, 30e3)
GRID_BANDWIDTHS_HZ = tuple(sorted(set(LTE_BANDWIDTHS_HZ) | set(NR_BANDWIDTHS_HZ)))
MIN_SUBCARRIERS = 64
LOW_CONFIDENCE_SCORE = 0.2


@dataclass(frozen=True)
class DetectorParams:
    threshold_offset_db: float = 8.0
    min_box_area_px: int = 16
    morphology_kernel_px: int = 3
    occupancy_split: float = 0.935
    floor_method: str = "profile"
    floor_quantile: float = 0.10
    min_unoccupied_width_hz: float = 1e6
    max_classify_samples: int = 600_000

    def __post_init__(self):
        if self.threshold_offset_db <= 0:
            raise ValueError("threshold_offset_db must be positive")
        if self.morphology_kernel_px < 1 or self.morphology_kernel_px % 2 == 0:
            raise ValueError("morphology_kernel_px must be a positive odd integer")
        if self.floor_method not in ("median", "profile"):
            raise ValueError(f"unknown floor_method {self.floor_method!r}")
        if not 0 < self.floor_quantile < 1:
            raise ValueError("floor_quantile must be in (0, 1)")


@dataclass(frozen=True)
class DetectionBox:
    box: PixelBox
    cls: SignalClass
    score: float
    low_confidence: bool = False

    def __post_init__(self):
        object.__setattr__(self, "cls", SignalClass(self.cls))
        object.__setattr__(self, "score", float(self.score))
        object.__setattr__(self, "low_confidence", bool(self.low_confidence))
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"class": self.cls.value, "score": self.score, "bbox": list(self.box.as_tuple()),
                "low_confidence": self.low_confidence}

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionBox":
        return cls(PixelBox(*d["bbox"]), d["class"], float(d["score"]), bool(d.get("low_confidence", False)))


class BandClassification(NamedTuple):
    cls: SignalClass
    score: float
    lag: Optional[int]
    occupancy: float
    low_confidence: bool


def estimate_noise_floor(spec: SpectrogramMatrix, method: str = "median", quantile: float = 0.10) -> float:
    """Noise level in dB.

    ``"median"``: lower median of all cells (of the two central order
    statistics the smaller wins). ``"profile"``: per-bin median over time,
    then the ``quantile`` of that frequency profile; robust when signals
    occupy most of the band.
    """
    values = spec.values_db
    if values.size == 0:
        raise ValueError("empty spectrogram")
    if method == "median":
        flat = values.ravel()
        k = (flat.size - 1) // 2
        return float(np.partition(flat, k)[k])
    if method == "profile":
        profile = np.median(values, axis=0)
        return float(np.quantile(profile, quantile))
    raise ValueError(f"unknown method {method!r}")


def _clean_mask(mask: np.ndarray, kernel: int) -> np.ndarray:
    if kernel == 1:
        return mask
    r = kernel // 2
    st = np.ones((kernel, kernel), dtype=bool)
    padded = np.pad(mask, r, mode="edge")
    padded = ndimage.binary_opening(padded, structure=st)
    padded = ndimage.binary_closing(padded, structure=st)
    return padded[r:-r, r:-r]


class _Extraction(NamedTuple):
    boxes: list  # (PixelBox, score)
    mask: np.ndarray
    threshold_db: float


def _extract(spec: SpectrogramMatrix, params: DetectorParams, size: int = IMAGE_SIZE) -> _Extraction:
    floor = estimate_noise_floor(spec, params.floor_method, params.floor_quantile)
    threshold = floor + params.threshold_offset_db
    mask = _clean_mask(spec.values_db > threshold, params.morphology_kernel_px)
    labels, n = ndimage.label(mask)
    out = []
    for i, sl in enumerate(ndimage.find_objects(labels), start=1):
        if sl is None:
            continue
        m0, m1 = sl[0].start, sl[0].stop - 1
        k0, k1 = sl[1].start, sl[1].stop - 1
        t0, t1, f0, f1 = spec.cell_extent(m0, m1, k0, k1)
        pb = map_box(GroundTruthBox(SignalClass.NR, t0, t1, f0, f1), spec, size)
        if pb.area < params.min_box_area_px:
            continue
        cells = labels[sl] == i
        excess = np.clip(spec.values_db[sl][cells] - threshold, 0, None)
        score = 1.0 - math.exp(-float(np.mean(excess)) / 10.0)
        out.append((pb, score))
    out.sort(key=lambda item: (item[0].y0, item[0].x0, item[0].y1, item[0].x1))
    return _Extraction(out, mask, threshold)


def extract_boxes(spec: SpectrogramMatrix, params: DetectorParams = DetectorParams(),
                  size: int = IMAGE_SIZE) -> list[tuple[PixelBox, float]]:
    """Signal rectangles in pixel space with scores, ordered by frequency."""
    return _extract(spec, params, size).boxes


def measure_occupancy(spec: SpectrogramMatrix, box: PixelBox, size: int = IMAGE_SIZE) -> tuple[float, float]:
    """(half-power bandwidth in Hz, ratio to the nearest grid bandwidth) inside ``box``."""
    t0, t1, f0, f1 = unmap_box(box, spec, size)
    frames = np.nonzero((spec.frame_center_s(np.arange(spec.n_frames)) >= t0)
                        & (spec.frame_center_s(np.arange(spec.n_frames)) <= t1))[0]
    bins = np.nonzero((spec.bin_center_hz(np.arange(spec.n_bins)) >= f0)
                      & (spec.bin_center_hz(np.arange(spec.n_bins)) <= f1))[0]
    if frames.size == 0 or bins.size == 0:
        return 0.0, 0.0
    profile = np.mean(10 ** (spec.values_db[np.ix_(frames, bins)] / 10), axis=0)
    ref = np.median(profile)
    above = np.nonzero(profile >= ref / 2)[0]
    bandwidth = (above[-1] - above[0] + 1) * spec.bin_width_hz
    nearest = min(GRID_BANDWIDTHS_HZ, key=lambda b: abs(b - bandwidth))
    return float(bandwidth), float(bandwidth / nearest)


def cp_autocorrelation(x: np.ndarray, lag: int) -> float:
    """|sum x[n] conj(x[n+lag])| / sum |x|^2."""
    x = x.astype(np.complex128)
    energy = float(np.sum(np.abs(x) ** 2))
    if energy == 0 or lag >= x.size:
        return 0.0
    return abs(np.vdot(x[lag:], x[:-lag])) / energy


def classify_band(iq: IqFrame, box: PixelBox, spec: SpectrogramMatrix,
                  params: DetectorParams = DetectorParams(), size: int = IMAGE_SIZE) -> BandClassification:
    """Numerology of the signal inside ``box`` from its CP lag and occupancy."""
    t0, t1, f0, f1 = unmap_box(box, spec, size)
    if f1 - f0 < MIN_SUBCARRIERS * min(CANDIDATE_SCS_HZ):
        raise BandTooNarrow(f"{(f1 - f0) / 1e3:.1f} kHz holds fewer than {MIN_SUBCARRIERS} subcarriers")
    rate = iq.sample_rate_hz
    s0 = max(int(math.floor((t0 - iq.t0_s) * rate)), 0)
    s1 = min(int(math.ceil((t1 - iq.t0_s) * rate)), len(iq))
    s1 = min(s1, s0 + params.max_classify_samples)
    seg = iq.samples[s0:s1]
    spectrum = sfft.fft(seg)
    freqs = sfft.fftfreq(seg.size, 1.0 / rate)
    spectrum[(freqs < f0) | (freqs > f1)] = 0
    band = sfft.ifft(spectrum)

    expected = DEFAULT_CP_RATIO / (1 + DEFAULT_CP_RATIO)
    lags = [round(rate / scs) for scs in CANDIDATE_SCS_HZ]
    corr = [cp_autocorrelation(band, lag) for lag in lags]
    best = int(np.argmax(corr))
    score = min(corr[best] / expected, 1.0)
    _, occupancy = measure_occupancy(spec, box, size)
    if CANDIDATE_SCS_HZ[best] == 30e3:
        cls = SignalClass.NR
    else:
        cls = SignalClass.LTE if occupancy < params.occupancy_split else SignalClass.NR
    return BandClassification(cls, float(score), lags[best], occupancy, score < LOW_CONFIDENCE_SCORE)


def _unoccupied_detections(signal: Sequence[PixelBox], mask: np.ndarray, spec: SpectrogramMatrix,
                           params: DetectorParams, size: int) -> list[DetectionBox]:
    fake = []
    for pb in signal:
        _, _, f0, f1 = unmap_box(pb, spec, size)
        fake.append(GroundTruthBox(SignalClass.NR, 0.0, 1.0, f0, f1))
    gaps = unoccupied_boxes(fake, spec.sample_rate_hz, spec.duration_s, params.min_unoccupied_width_hz)
    centers = spec.bin_center_hz(np.arange(spec.n_bins))
    column_fill = mask.mean(axis=0)
    out = []
    for gap in gaps:
        inside = (centers >= gap.f0_hz) & (centers <= gap.f1_hz)
        overlap = float(column_fill[inside].max()) if inside.any() else 0.0
        pb = map_box(GroundTruthBox(SignalClass.UNOCCUPIED, spec.t0_s, spec.t0_s + spec.duration_s,
                                    gap.f0_hz, gap.f1_hz), spec, size)
        out.append(DetectionBox(pb, SignalClass.UNOCCUPIED, 1.0 - overlap))
    return out


def detect(spec: SpectrogramMatrix, iq: Optional[IqFrame] = None, params: DetectorParams = DetectorParams(),
           size: int = IMAGE_SIZE) -> list[DetectionBox]:
    """Signal and unoccupied-band detections for one capture.

    With IQ the signal score is the geometric mean of the extraction score and
    the CP-correlation score; without IQ the class comes from the occupancy
    ratio alone and the extraction score is halved.
    """
    ext = _extract(spec, params, size)
    dets = []
    for pb, ext_score in ext.boxes:
        result = None
        if iq is not None:
            try:
                result = classify_band(iq, pb, spec, params, size)
            except BandTooNarrow:
                result = None
        if result is not None:
            score = math.sqrt(ext_score * result.score)
            dets.append(DetectionBox(pb, result.cls, score, result.low_confidence))
        else:
            _, occupancy = measure_occupancy(spec, pb, size)
            cls = SignalClass.LTE if occupancy < params.occupancy_split else SignalClass.NR
            dets.append(DetectionBox(pb, cls, 0.5 * ext_score, iq is not None))
    dets.extend(_unoccupied_detections([d.box for d in dets], ext.mask, spec, params, size))
    return dets


def write_detections(path, capture_id: str, detections: Sequence[DetectionBox]) -> Path:
    """Per-capture detection file: JSON with class, score and [x0, y0, x1, y1] pixel bbox."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"capture_id": capture_id, "detections": [d.to_dict() for d in detections]}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def read_detections(path) -> tuple[str, list[DetectionBox]]:
    doc = json.loads(Path(path).read_text())
    return doc["capture_id"], [DetectionBox.from_dict(d) for d in doc["detections"]]
