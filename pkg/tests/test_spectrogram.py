import hashlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from oracles import direct_dft_centered, hann_periodic
from risense.colormap import LUT
from risense.errors import DegenerateRange, FrameTooShort
from risense.spectrogram import (IMAGE_SIZE, PixelBox, SpectrogramMatrix, StftParams, map_box, matrix_from_image,
                                 power_frames, save_image, stft, to_image, unmap_box)
from risense.waveform import GroundTruthBox, IqFrame, WaveformSpec, synthesize, tone

RATE = 60e6
N_TOTAL = 2_400_000


@pytest.fixture(scope="module")
def noisy_capture():
    rng = np.random.default_rng(0)
    x = (rng.standard_normal(N_TOTAL) + 1j * rng.standard_normal(N_TOTAL)).astype(np.complex64)
    return IqFrame(x, RATE)


def test_default_geometry(noisy_capture):
    params = StftParams()
    assert params.hop == 3686
    spec = stft(noisy_capture, params)
    assert spec.n_frames == (N_TOTAL - 4096) // 3686 + 1 == 651
    assert spec.n_bins == 4096


def test_frames_match_direct_dft(noisy_capture):
    params = StftParams()
    power = power_frames(noisy_capture, params)
    w = hann_periodic(4096)
    assert np.allclose(params.window(), w, rtol=0, atol=1e-15)
    for m in (0, 325, 650):
        seg = noisy_capture.samples[m * 3686:m * 3686 + 4096].astype(np.complex128) * w
        ref = np.abs(direct_dft_centered(seg, 4096)) ** 2
        assert np.max(np.abs(power[m] - ref)) / np.max(ref) <= 1e-6
        assert np.linalg.norm(power[m] - ref) / np.linalg.norm(ref) <= 1e-6


def test_parseval_per_frame(noisy_capture):
    params = StftParams()
    power = power_frames(noisy_capture, params)
    w = params.window()
    segs = np.lib.stride_tricks.sliding_window_view(noisy_capture.samples, 4096)[::3686].astype(np.complex128)
    energy = np.sum(np.abs(segs * w) ** 2, axis=1) * 4096
    assert np.max(np.abs(power.sum(axis=1) - energy) / energy) <= 1e-9


def test_tone_lands_in_bin_3072():
    x = IqFrame(tone(15e6, N_TOTAL, RATE), RATE)
    spec = stft(x)
    assert np.all(np.argmax(spec.values_db, axis=1) == 3072)
    assert spec.bin_center_hz(3072) == pytest.approx(15e6)
    rgb = to_image(spec)
    brightness = rgb.astype(float).sum(axis=2).mean(axis=1)
    assert int(np.argmax(brightness)) == round(256 * 3072 / 4096) == 192


def test_frame_too_short():
    with pytest.raises(FrameTooShort):
        stft(IqFrame(np.ones(100), RATE))


def _matrix(values, n_samples=N_TOTAL):
    return SpectrogramMatrix(np.asarray(values, dtype=float), 3686, 4096, RATE, n_samples)


def test_constant_matrix_uniform_image():
    rgb = to_image(_matrix(np.full((651, 4096), -60.0)))
    assert rgb.shape == (256, 256, 3) and rgb.dtype == np.uint8
    assert len(np.unique(rgb.reshape(-1, 3), axis=0)) == 1


def test_degenerate_range():
    with pytest.raises(DegenerateRange):
        to_image(_matrix(np.zeros((10, 10))), db_range=(-10, -10))


def test_signal_power_monotonicity():
    frame, (box,) = synthesize(WaveformSpec("LTE", 10e6, center_offset_hz=5e6), RATE, 0.004, rng_seed=2)
    lo_spec = stft(frame)
    hi = stft(IqFrame(frame.samples * np.float32(3.0), RATE)).values_db
    centers = lo_spec.bin_center_hz(np.arange(lo_spec.n_bins))
    in_band = (centers >= box.f0_hz) & (centers <= box.f1_hz)
    assert np.all(hi[:, in_band] >= lo_spec.values_db[:, in_band])


def test_image_determinism(tmp_path):
    rng = np.random.default_rng(1)
    spec = _matrix(rng.uniform(-120, 0, (651, 4096)))
    a = save_image(to_image(spec), tmp_path / "a.png")
    b = save_image(to_image(spec), tmp_path / "b.png")
    assert hashlib.sha256(a.read_bytes()).digest() == hashlib.sha256(b.read_bytes()).digest()
    with Image.open(a) as img:
        assert img.size == (256, 256)
    jpg = save_image(to_image(spec), tmp_path / "c.jpg")
    with Image.open(jpg) as img:
        assert img.format == "JPEG" and img.size == (256, 256)


def test_image_inversion_recovers_levels():
    levels = np.random.default_rng(4).uniform(-110, -10, (256, 256))  # 256 frames x 256 bins: no resampling
    rgb = to_image(SpectrogramMatrix(levels, 100, 100, RATE, 256 * 100))
    back = matrix_from_image(rgb, RATE, 256 * 100)
    assert back.values_db.shape == (256, 256)
    # one colormap level is 100/255 dB; duplicated colours in the table cost at most one more level
    assert np.max(np.abs(back.values_db - levels)) <= 2 * 100 / 255 + 1e-9


def test_matrix_file_roundtrip(tmp_path):
    spec = _matrix(np.random.default_rng(2).uniform(-100, 0, (20, 64)))
    back = SpectrogramMatrix.read(spec.write(tmp_path / "s.f32"))
    assert np.array_equal(back.values_db, spec.values_db.astype(np.float32))
    assert (back.frame_hop, back.n_samples, back.sample_rate_hz) == (3686, N_TOTAL, RATE)


# --- box mapping ------------------------------------------------------------

def test_map_box_examples():
    spec = _matrix(np.zeros((651, 4096)))
    full = map_box(GroundTruthBox("NR", 0, 0.040, -30e6, 30e6), spec)
    assert full.as_tuple() == (0, 0, 256, 256)
    half = map_box(GroundTruthBox("NR", 0, 0.020, 0, 30e6), spec)
    assert half.as_tuple() == (0, 128, 128, 256)
    # 5 MHz LTE, 0.9 occupancy -> 300 subcarriers -> 4.5 MHz occupied, centred at -10 MHz
    _, (box,) = synthesize(WaveformSpec("LTE", 5e6, center_offset_hz=-10e6), RATE, 0.001)
    lte = map_box(GroundTruthBox("LTE", 0, 0.040, box.f0_hz, box.f1_hz), spec)
    assert lte.y0 == pytest.approx(256 * (-12.25 + 30) / 60, rel=1e-12)
    assert lte.y1 == pytest.approx(256 * (-7.75 + 30) / 60, rel=1e-12)
    assert (lte.x0, lte.x1) == (0, 256)


def test_map_box_clamps():
    spec = _matrix(np.zeros((651, 4096)))
    pb = map_box(GroundTruthBox("NR", 0, 0.080, -40e6, 10e6), spec)
    assert pb.as_tuple() == (0, 0, 256, 256 * 40 / 60)


@given(t0=st.floats(0, 0.039), dt=st.floats(1e-5, 0.04), f0=st.floats(-30e6, 29e6), df=st.floats(1e3, 60e6))
def test_map_unmap_roundtrip(t0, dt, f0, df):
    spec = _matrix(np.zeros((651, 4096)))
    box = GroundTruthBox("LTE", t0, t0 + dt, f0, f0 + df)
    back = unmap_box(map_box(box, spec, clamp=False), spec)
    # relative to the coordinate range (40 ms, 60 MHz): values near 0 Hz carry the offset's rounding
    for got, want, span in zip(back, (box.t0_s, box.t1_s, box.f0_hz, box.f1_hz), (0.04, 0.04, RATE, RATE)):
        assert abs(got - want) <= 1e-9 * max(abs(want), span)


def test_colormap_endpoints():
    assert len(LUT) == 256
    dark, bright = LUT[0].astype(int), LUT[-1].astype(int)
    assert dark[2] > dark[0]  # low power is blue-ish
    assert bright[0] > bright[2] and bright[1] > bright[2]  # high power is yellow


def test_pixel_box_validation():
    with pytest.raises(ValueError):
        PixelBox(10, 0, 10, 5)
    assert PixelBox(0, 0, 2, 3).area == 6
    assert IMAGE_SIZE == 256
