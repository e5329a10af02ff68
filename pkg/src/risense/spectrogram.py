"""
STFT spectrograms, 256x256 colormapped images and time-frequency <-> pixel mapping.

Pixel convention: x is time (capture start at x=0) and y is frequency with the
lowest frequency (-fs/2) at y=0, which is also image row 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft as sfft
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image
from scipy.signal import get_window

from .colormap import LUT
from .errors import DegenerateRange, FrameTooShort
from .waveform import GroundTruthBox, IqFrame

DB_EPS = 1e-12  # -120 dB floor guard on linear power
IMAGE_SIZE = 256
DEFAULT_DB_RANGE = (-110.0, -10.0)
AXIS_CONVENTION = "x=time,y=frequency,y0=lowest"


@dataclass(frozen=True)
class StftParams:
    window_len: int = 4096
    fft_size: int = 4096
    overlap_ratio: float = 0.10
    window_kind: str = "hann"

    def __post_init__(self):
        if not 0 <= self.overlap_ratio < 1:
            raise ValueError("overlap_ratio must be in [0, 1)")
        if self.window_len > self.fft_size:
            raise ValueError("window_len must not exceed fft_size")
        if self.window_kind != "hann":
            raise ValueError("only the Hann window is supported")

    @property
    def hop(self) -> int:
        return round((1 - self.overlap_ratio) * self.window_len)

    def window(self) -> np.ndarray:
        return get_window("hann", self.window_len)


@dataclass
class SpectrogramMatrix:
    """dB time-frequency grid ``values_db[frame, bin]`` plus its geometry.

    Frame ``m`` is centred at ``t0 + (m*hop + window_len/2)/fs``; bin ``k`` at
    ``f_first_hz + k*fs/n_bins``. ``reference_db`` is the level that a
    unit-power signal would reach if all its power fell in one bin.
    """

    values_db: np.ndarray
    frame_hop: float
    window_len: float
    sample_rate_hz: float
    n_samples: int
    t0_s: float = 0.0
    f_first_hz: float | None = None
    reference_db: float = 0.0
    window_power: float = 1.0

    def __post_init__(self):
        if self.f_first_hz is None:
            self.f_first_hz = -self.sample_rate_hz / 2

    @property
    def n_frames(self) -> int:
        return self.values_db.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values_db.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate_hz

    @property
    def bin_width_hz(self) -> float:
        return self.sample_rate_hz / self.n_bins

    def frame_center_s(self, m) -> np.ndarray:
        return self.t0_s + (np.asarray(m) * self.frame_hop + self.window_len / 2) / self.sample_rate_hz

    def bin_center_hz(self, k) -> np.ndarray:
        return self.f_first_hz + np.asarray(k) * self.bin_width_hz

    def cell_extent(self, m0: int, m1: int, k0: int, k1: int) -> tuple[float, float, float, float]:
        """Physical (t0, t1, f0, f1) covered by frames m0..m1 and bins k0..k1 inclusive."""
        half_t = self.frame_hop / (2 * self.sample_rate_hz)
        half_f = self.bin_width_hz / 2
        t0 = max(float(self.frame_center_s(m0)) - half_t, self.t0_s)
        t1 = min(float(self.frame_center_s(m1)) + half_t, self.t0_s + self.duration_s)
        f0 = max(float(self.bin_center_hz(k0)) - half_f, -self.sample_rate_hz / 2)
        f1 = min(float(self.bin_center_hz(k1)) + half_f, self.sample_rate_hz / 2)
        return t0, t1, f0, f1

    def relative_db(self) -> np.ndarray:
        return self.values_db - self.reference_db

    def write(self, path) -> Path:
        """Flat little-endian float32 dump plus a key=value text sidecar."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.values_db.astype("<f4").tofile(path)
        meta = {
            "n_frames": self.n_frames, "n_bins": self.n_bins, "frame_hop": repr(float(self.frame_hop)),
            "window_len": repr(float(self.window_len)), "sample_rate_hz": repr(float(self.sample_rate_hz)),
            "n_samples": self.n_samples, "t0_s": repr(float(self.t0_s)),
            "f_first_hz": repr(float(self.f_first_hz)), "reference_db": repr(float(self.reference_db)),
            "window_power": repr(float(self.window_power)),
        }
        path.with_name(path.name + ".meta").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
        return path

    @classmethod
    def read(cls, path) -> "SpectrogramMatrix":
        path = Path(path)
        meta = dict(line.split("=", 1) for line in path.with_name(path.name + ".meta").read_text().splitlines()
                    if line)
        values = np.fromfile(path, dtype="<f4").astype(np.float64).reshape(int(meta["n_frames"]),
                                                                           int(meta["n_bins"]))
        return cls(values, float(meta["frame_hop"]), float(meta["window_len"]), float(meta["sample_rate_hz"]),
                   int(meta["n_samples"]), float(meta["t0_s"]), float(meta["f_first_hz"]),
                   float(meta["reference_db"]), float(meta["window_power"]))


@dataclass(frozen=True)
class PixelBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate pixel box {self}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


def power_frames(iq: IqFrame, params: StftParams = StftParams()) -> np.ndarray:
    """Linear |centered DFT(window * segment)|^2, shape (n_frames, fft_size)."""
    x = iq.samples
    if x.size < params.window_len:
        raise FrameTooShort(f"{x.size} samples < window length {params.window_len}")
    segments = sliding_window_view(x, params.window_len)[::params.hop]
    spectra = sfft.fft(segments * params.window(), n=params.fft_size, axis=1)
    return np.abs(sfft.fftshift(spectra, axes=1)) ** 2


def stft(iq: IqFrame, params: StftParams = StftParams()) -> SpectrogramMatrix:
    power = power_frames(iq, params)
    win = params.window()
    window_power = float(np.sum(win ** 2))
    return SpectrogramMatrix(
        values_db=10 * np.log10(power + DB_EPS),
        frame_hop=params.hop,
        window_len=params.window_len,
        sample_rate_hz=iq.sample_rate_hz,
        n_samples=len(iq),
        t0_s=iq.t0_s,
        f_first_hz=-iq.sample_rate_hz / 2,
        reference_db=10 * math.log10(params.fft_size * window_power),
        window_power=window_power,
    )


def _area_weights(n_src: int, n_dst: int) -> np.ndarray:
    """(n_dst, n_src) matrix averaging source cells by overlap length."""
    edges_src = np.arange(n_src + 1) / n_src
    edges_dst = np.arange(n_dst + 1) / n_dst
    lo = np.maximum(edges_dst[:-1, None], edges_src[None, :-1])
    hi = np.minimum(edges_dst[1:, None], edges_src[None, 1:])
    w = np.clip(hi - lo, 0, None)
    return w / w.sum(axis=1, keepdims=True)


def normalized_levels(spec: SpectrogramMatrix, size: int = IMAGE_SIZE,
                      db_range: tuple[float, float] = DEFAULT_DB_RANGE) -> np.ndarray:
    """Clipped, [0, 1]-normalized, area-resampled grid with rows = frequency."""
    lo, hi = db_range
    if lo >= hi:
        raise DegenerateRange(f"db_range {db_range} is empty")
    if spec.values_db.size == 0:
        raise ValueError("empty spectrogram")
    norm = (np.clip(spec.relative_db(), lo, hi) - lo) / (hi - lo)
    rows = _area_weights(spec.n_bins, size)
    cols = _area_weights(spec.n_frames, size)
    return rows @ norm.T @ cols.T


def to_image(spec: SpectrogramMatrix, size: int = IMAGE_SIZE,
             db_range: tuple[float, float] = DEFAULT_DB_RANGE) -> np.ndarray:
    """uint8 RGB array of shape (size, size, 3); row index = y = frequency."""
    levels = normalized_levels(spec, size, db_range)
    idx = np.clip(np.round(levels * (len(LUT) - 1)), 0, len(LUT) - 1).astype(np.intp)
    return LUT[idx]


def save_image(rgb: np.ndarray, path, quality: int = 95) -> Path:
    """PNG (canonical, lossless) or JPG depending on the suffix."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(rgb, mode="RGB")
    if path.suffix.lower() in (".jpg", ".jpeg"):
        img.save(path, format="JPEG", quality=quality)
    else:
        img.save(path, format="PNG", optimize=False)
    return path


def _colormap_indices(pixels: np.ndarray) -> np.ndarray:
    """LUT index of each RGB pixel: exact match when possible, else nearest colour."""
    lut = LUT.astype(np.int32)
    key = (pixels[:, 0] << 16) | (pixels[:, 1] << 8) | pixels[:, 2]
    lut_key = (lut[:, 0] << 16) | (lut[:, 1] << 8) | lut[:, 2]
    order = np.argsort(lut_key, kind="stable")
    pos = np.clip(np.searchsorted(lut_key[order], key), 0, len(lut) - 1)
    idx = order[pos]
    miss = np.flatnonzero(lut_key[idx] != key)
    for chunk in np.array_split(miss, max(1, miss.size // 4096)):
        if chunk.size:
            d = ((pixels[chunk, None, :] - lut[None, :, :]) ** 2).sum(axis=-1)
            idx[chunk] = d.argmin(axis=-1)
    return idx


def matrix_from_image(rgb: np.ndarray, sample_rate_hz: float, n_samples: int,
                      db_range: tuple[float, float] = DEFAULT_DB_RANGE) -> SpectrogramMatrix:
    """Invert the colormap of a rendered image back to a coarse dB grid.

    The result has one frame per image column and one bin per image row, in
    dB relative to unit signal power.
    """
    rgb = np.asarray(rgb, dtype=np.int32)
    h, w, _ = rgb.shape
    idx = _colormap_indices(rgb.reshape(-1, 3)).reshape(h, w)
    levels = idx / (len(LUT) - 1)
    lo, hi = db_range
    values = (lo + levels * (hi - lo)).T  # -> [frames=columns, bins=rows]
    hop = n_samples / w
    return SpectrogramMatrix(values, frame_hop=hop, window_len=hop, sample_rate_hz=sample_rate_hz,
                             n_samples=n_samples, f_first_hz=-sample_rate_hz / 2 + sample_rate_hz / (2 * h))


def map_box(box: GroundTruthBox, spec: SpectrogramMatrix, size: int = IMAGE_SIZE, clamp: bool = True) -> PixelBox:
    duration = spec.duration_s
    rate = spec.sample_rate_hz
    x0 = (box.t0_s - spec.t0_s) / duration * size
    x1 = (box.t1_s - spec.t0_s) / duration * size
    y0 = (box.f0_hz + rate / 2) / rate * size
    y1 = (box.f1_hz + rate / 2) / rate * size
    if clamp:
        x0, x1, y0, y1 = (min(max(v, 0.0), float(size)) for v in (x0, x1, y0, y1))
    return PixelBox(x0, y0, x1, y1)


def unmap_box(pb: PixelBox, spec: SpectrogramMatrix, size: int = IMAGE_SIZE) -> tuple[float, float, float, float]:
    """Inverse of :func:`map_box`: pixel box -> (t0, t1, f0, f1)."""
    duration = spec.duration_s
    rate = spec.sample_rate_hz
    return (spec.t0_s + pb.x0 / size * duration, spec.t0_s + pb.x1 / size * duration,
            pb.y0 / size * rate - rate / 2, pb.y1 / size * rate - rate / 2)
