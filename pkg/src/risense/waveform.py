"""
CP-OFDM waveform synthesis for LTE-like and NR-like primary signals.

Signals are synthesized directly at the capture sample rate. Each OFDM
symbol carries unit-power QPSK on ``n_subcarriers`` subcarriers placed
symmetrically around the (unused) DC subcarrier, gets a cyclic prefix, and
is frequency shifted to ``center_offset_hz``. The shifted burst is then
band-limited with an ideal mask over its own span so that the spectrogram
shows a clean rectangle even at 50 dB SNR.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.fft as sfft

from .errors import BandExceedsCapture, LengthMismatch, NonIntegerSymbolLength, RateMismatch

LTE_BANDWIDTHS_HZ = (5e6, 10e6, 15e6, 20e6)
NR_BANDWIDTHS_HZ = (10e6, 15e6, 20e6, 25e6, 30e6, 40e6, 50e6)
NR_SCS_HZ = (15e3, 30e3)
LTE_SCS_HZ = 15e3

DEFAULT_OCCUPANCY = {"LTE": 0.90, "NR": 0.97}
DEFAULT_CP_RATIO = 0.0703

_QPSK = (np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j]) / np.sqrt(2)).astype(np.complex64)


class SignalClass(str, Enum):
    LTE = "LTE"
    NR = "NR"
    UNOCCUPIED = "Unoccupied"


@dataclass(frozen=True)
class WaveformSpec:
    """Parameters of one primary-transmitter signal.

    ``time_span`` is ``(start_s, stop_s)`` relative to the capture start; ``None``
    means the whole capture. ``occupancy_ratio`` defaults per kind
    (0.90 LTE, 0.97 NR).
    """

    kind: SignalClass
    bandwidth_hz: float
    scs_hz: float = LTE_SCS_HZ
    center_offset_hz: float = 0.0
    occupancy_ratio: Optional[float] = None
    cp_ratio: float = DEFAULT_CP_RATIO
    time_span: Optional[tuple[float, float]] = None
    payload_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", SignalClass(self.kind))
        if self.kind is SignalClass.UNOCCUPIED:
            raise ValueError("a waveform must be LTE or NR")
        if self.occupancy_ratio is None:
            object.__setattr__(self, "occupancy_ratio", DEFAULT_OCCUPANCY[self.kind.value])
        if not 0.0 < self.occupancy_ratio <= 1.0:
            raise ValueError(f"occupancy_ratio must be in (0, 1], got {self.occupancy_ratio}")
        if self.bandwidth_hz <= 0 or self.scs_hz <= 0:
            raise ValueError("bandwidth_hz and scs_hz must be positive")
        if self.cp_ratio < 0:
            raise ValueError("cp_ratio must be non-negative")
        if self.time_span is not None:
            start, stop = (float(v) for v in self.time_span)
            if start < 0 or stop < start:
                raise ValueError(f"invalid time_span {self.time_span}")
            object.__setattr__(self, "time_span", (start, stop))

    @property
    def occupied_bandwidth_hz(self) -> float:
        return 2 * math.floor(self.bandwidth_hz * self.occupancy_ratio / (2 * self.scs_hz) + 1e-9) * self.scs_hz

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["time_span"] = list(self.time_span) if self.time_span is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WaveformSpec":
        d = dict(d)
        if d.get("time_span") is not None:
            d["time_span"] = tuple(d["time_span"])
        return cls(**d)


@dataclass(frozen=True)
class Numerology:
    symbol_len: int
    cp_len: int
    n_subcarriers: int


@dataclass
class IqFrame:
    """Complex baseband samples (stored as complex64) with timing metadata."""

    samples: np.ndarray
    sample_rate_hz: float
    t0_s: float = 0.0

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.complex64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("IqFrame needs a non-empty 1-D sample array")
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz

    def energy(self) -> float:
        return float(np.sum(np.abs(self.samples.astype(np.complex128)) ** 2))


@dataclass(frozen=True)
class GroundTruthBox:
    """Labeled time-frequency rectangle; frequencies relative to capture center."""

    cls: SignalClass
    t0_s: float
    t1_s: float
    f0_hz: float
    f1_hz: float

    def __post_init__(self):
        object.__setattr__(self, "cls", SignalClass(self.cls))
        if not (self.t0_s < self.t1_s and self.f0_hz < self.f1_hz):
            raise ValueError(f"degenerate box {self}")

    def to_dict(self) -> dict:
        return {"class": self.cls.value, "t0_s": self.t0_s, "t1_s": self.t1_s,
                "f0_hz": self.f0_hz, "f1_hz": self.f1_hz}

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthBox":
        return cls(d["class"], d["t0_s"], d["t1_s"], d["f0_hz"], d["f1_hz"])


def derive_numerology(spec: WaveformSpec, capture_rate_hz: float) -> Numerology:
    ratio = capture_rate_hz / spec.scs_hz
    symbol_len = round(ratio)
    if symbol_len < 1 or abs(ratio - symbol_len) > 1e-9 * ratio:
        raise NonIntegerSymbolLength(
            f"capture rate {capture_rate_hz} Hz is not an integer multiple of SCS {spec.scs_hz} Hz")
    if abs(spec.center_offset_hz) + spec.bandwidth_hz / 2 > capture_rate_hz / 2 * (1 + 1e-12):
        raise BandExceedsCapture(
            f"{spec.bandwidth_hz / 1e6:g} MHz at offset {spec.center_offset_hz / 1e6:g} MHz "
            f"does not fit in +/-{capture_rate_hz / 2e6:g} MHz")
    n_sc = 2 * math.floor(spec.bandwidth_hz * spec.occupancy_ratio / (2 * spec.scs_hz) + 1e-9)
    return Numerology(symbol_len=symbol_len, cp_len=round(spec.cp_ratio * symbol_len), n_subcarriers=n_sc)


def tone(freq_hz: float, n: int, sample_rate_hz: float, start: int = 0) -> np.ndarray:
    """exp(j*2*pi*f*(start+i)/fs) for i in [0, n), built from two short exp tables."""
    block = 4096
    n_blocks = -(-n // block)
    inner = np.exp(2j * np.pi * freq_hz * np.arange(block) / sample_rate_hz)
    outer = np.exp(2j * np.pi * freq_hz * (start + block * np.arange(n_blocks)) / sample_rate_hz)
    return (outer[:, None] * inner[None, :]).ravel()[:n]


def _span_samples(spec: WaveformSpec, rate: float, n_total: int) -> tuple[int, int]:
    if spec.time_span is None:
        return 0, n_total
    start = min(round(spec.time_span[0] * rate), n_total)
    stop = min(round(spec.time_span[1] * rate), n_total)
    return start, stop


def _band_limit(x: np.ndarray, rate: float, f_lo: float, f_hi: float) -> np.ndarray:
    spectrum = sfft.fft(x)
    freqs = sfft.fftfreq(x.size, 1.0 / rate)
    spectrum[(freqs < f_lo) | (freqs > f_hi)] = 0
    return sfft.ifft(spectrum)


def synthesize(spec: WaveformSpec, capture_rate_hz: float, capture_duration_s: float,
               rng_seed: int = 0) -> tuple[IqFrame, list[GroundTruthBox]]:
    """Render one CP-OFDM burst into an otherwise empty capture.

    Returns the frame and its single ground-truth box (empty list when the
    time span is degenerate).
    """
    num = derive_numerology(spec, capture_rate_hz)
    n_total = round(capture_rate_hz * capture_duration_s)
    start, stop = _span_samples(spec, capture_rate_hz, n_total)
    samples = np.zeros(n_total, dtype=np.complex64)
    if stop <= start or num.n_subcarriers == 0:
        return IqFrame(samples, capture_rate_hz), []

    rng = np.random.default_rng([spec.payload_seed, rng_seed])
    L, cp, n_sc = num.symbol_len, num.cp_len, num.n_subcarriers
    span = stop - start
    n_sym = -(-span // (L + cp))

    half = n_sc // 2
    sc_bins = np.concatenate([np.arange(-half, 0), np.arange(1, half + 1)]) % L
    symbols = _QPSK[rng.integers(0, 4, size=(n_sym, n_sc), dtype=np.uint8)]
    grid = np.zeros((n_sym, L), dtype=np.complex64)
    grid[:, sc_bins] = symbols
    body = sfft.ifft(grid, axis=1)
    body *= np.float32(L / np.sqrt(n_sc))
    burst = np.concatenate([body[:, L - cp:], body], axis=1).ravel()[:span]
    burst *= tone(spec.center_offset_hz, span, capture_rate_hz, start).astype(np.complex64)

    edge = (half + 0.5) * spec.scs_hz
    burst = _band_limit(burst, capture_rate_hz,
                        spec.center_offset_hz - edge, spec.center_offset_hz + edge)
    # circular filtering leaves a wrap seam; taper it when the burst sits inside silence
    ramp_len = min(max(cp, 1), span // 2)
    ramp = 0.5 - 0.5 * np.cos(np.pi * (np.arange(ramp_len) + 0.5) / ramp_len)
    if start > 0:
        burst[:ramp_len] *= ramp
    if stop < n_total:
        burst[span - ramp_len:] *= ramp[::-1]

    rms = math.sqrt(float(np.mean(np.abs(burst.astype(np.complex128)) ** 2)))
    samples[start:stop] = burst / rms

    occ = n_sc * spec.scs_hz / 2
    box = GroundTruthBox(spec.kind, start / capture_rate_hz, stop / capture_rate_hz,
                         spec.center_offset_hz - occ, spec.center_offset_hz + occ)
    return IqFrame(samples, capture_rate_hz), [box]


def combine(frames: Sequence[IqFrame]) -> IqFrame:
    """Element-wise sum of equally sized frames sharing one sample rate."""
    if not frames:
        raise ValueError("combine needs at least one frame")
    first = frames[0]
    for f in frames[1:]:
        if f.sample_rate_hz != first.sample_rate_hz:
            raise RateMismatch(f"{f.sample_rate_hz} != {first.sample_rate_hz}")
        if len(f) != len(first):
            raise LengthMismatch(f"{len(f)} != {len(first)}")
    if len(frames) == 1:
        return IqFrame(first.samples.copy(), first.sample_rate_hz, first.t0_s)
    total = np.sum([f.samples.astype(np.complex128) for f in frames], axis=0)
    return IqFrame(total, first.sample_rate_hz, first.t0_s)


def combine_labeled(parts: Iterable[tuple[IqFrame, list[GroundTruthBox]]]) -> tuple[IqFrame, list[GroundTruthBox]]:
    parts = list(parts)
    frame = combine([p[0] for p in parts])
    return frame, [b for p in parts for b in p[1]]


def unoccupied_boxes(signal_boxes: Iterable[GroundTruthBox], capture_rate_hz: float, duration_s: float,
                     min_width_hz: float = 0.0) -> list[GroundTruthBox]:
    """Frequency complement of the signal boxes over the full capture duration."""
    lo_edge, hi_edge = -capture_rate_hz / 2, capture_rate_hz / 2
    spans = sorted((max(b.f0_hz, lo_edge), min(b.f1_hz, hi_edge))
                   for b in signal_boxes if b.cls is not SignalClass.UNOCCUPIED)
    out = []
    cursor = lo_edge
    for f0, f1 in spans + [(hi_edge, hi_edge)]:
        if f0 > cursor and f0 - cursor >= min_width_hz:
            out.append(GroundTruthBox(SignalClass.UNOCCUPIED, 0.0, duration_s, cursor, f0))
        cursor = max(cursor, f1)
    return out


# ---------------------------------------------------------------------------
# IQ file export: interleaved little-endian float32 I/Q plus a key=value sidecar
# ---------------------------------------------------------------------------

def write_iq(path, frame: IqFrame, seed: Optional[int] = None, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    interleaved = np.empty(2 * len(frame), dtype="<f4")
    interleaved[0::2] = frame.samples.real
    interleaved[1::2] = frame.samples.imag
    interleaved.tofile(path)
    meta = {
        "format": "cf32_le",
        "sample_rate_hz": repr(float(frame.sample_rate_hz)),
        "duration_s": repr(frame.duration_s),
        "t0_s": repr(float(frame.t0_s)),
        "n_samples": str(len(frame)),
        "seed": "" if seed is None else str(seed),
    }
    for k, v in (extra or {}).items():
        meta[k] = str(v)
    sidecar = path.with_name(path.name + ".meta")
    sidecar.write_text("".join(f"{k}={v}\n" for k, v in meta.items()), encoding="utf-8")
    return path


def read_iq(path) -> tuple[IqFrame, dict]:
    path = Path(path)
    meta = {}
    for line in path.with_name(path.name + ".meta").read_text(encoding="utf-8").splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            meta[k.strip()] = v.strip()
    raw = np.fromfile(path, dtype="<f4")
    samples = raw[0::2] + 1j * raw[1::2]
    return IqFrame(samples, float(meta["sample_rate_hz"]), float(meta["t0_s"])), meta
