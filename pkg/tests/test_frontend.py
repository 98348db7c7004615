import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.io import wavfile
from scipy.optimize import brentq

from aegan_ad.frontend import (
    FrontendConfig,
    FrontendError,
    LogMelMatrix,
    Scaler,
    SegmentSet,
    extract,
    fit_scaler,
    load_audio,
    log_mel,
    mel_filterbank,
    scale_affine,
    segment_offsets,
    slice_windows,
)

CFG = FrontendConfig()


# ---------------------------------------------------------------- oracles

def slaney_mel(f):
    """Slaney scale: 3 mels per 200 Hz up to 1 kHz, logarithmic (27 mels per factor 6.4) above."""
    return 3 * f / 200 if f < 1000 else 15 + 27 * math.log(f / 1000) / math.log(6.4)


def oracle_band_centers(sr=16000, n_mels=128):
    top = slaney_mel(sr / 2)
    mels = [top * (i + 1) / (n_mels + 1) for i in range(n_mels)]
    return np.array([brentq(lambda f, m=m: slaney_mel(f) - m, 0.0, sr) for m in mels])


def brute_frame_count(n_samples, n_fft, hop):
    # centered framing pads n_fft // 2 on both sides
    padded = n_samples + 2 * (n_fft // 2)
    count, start = 0, 0
    while start + n_fft <= padded:
        count += 1
        start += hop
    return count


def brute_offsets(n_frames, size, hop):
    if n_frames < size:
        return [0]
    return [o for o in range(n_frames - size + 1) if o % hop == 0 or o == n_frames - size]


def write_wav(path, x, sr=16000):
    wavfile.write(path, sr, np.asarray(x, dtype=np.float32))
    return path


# ---------------------------------------------------------------- load_audio

def test_load_sine(tmp_path):
    t = np.arange(16000) / 16000
    x = np.sin(2 * np.pi * 440 * t)
    x[4000] = 1.0  # sin peaks land between samples; pin an exact 1.0
    y, sr = load_audio(write_wav(tmp_path / "a.wav", x), CFG)
    assert sr == 16000 and len(y) == 16000
    assert np.max(np.abs(y)) == 1.0


def test_load_silence(tmp_path):
    y, _ = load_audio(write_wav(tmp_path / "z.wav", np.zeros(8000)), CFG)
    assert np.all(y == 0)


def test_load_resamples_and_reads_int16(tmp_path):
    x = (np.sin(np.arange(32000) / 10) * 10000).astype(np.int16)
    wavfile.write(tmp_path / "b.wav", 32000, x)
    y, sr = load_audio(tmp_path / "b.wav", CFG)
    assert sr == 16000 and len(y) == 16000
    _, raw = wavfile.read(tmp_path / "b.wav")
    assert len(raw) == 32000  # header checked independently of load_audio


def test_load_errors(tmp_path):
    with pytest.raises(OSError):
        load_audio(tmp_path / "missing.wav", CFG)
    wavfile.write(tmp_path / "empty.wav", 16000, np.zeros(0, dtype=np.int16))
    with pytest.raises(FrontendError):
        load_audio(tmp_path / "empty.wav", CFG)


# ---------------------------------------------------------------- log_mel

def test_silence_is_log_floor():
    m = log_mel(np.zeros(16000), CFG)
    assert m.scale_state == "raw_log"
    np.testing.assert_array_equal(m.values, np.log(CFG.log_floor))


def test_tone_peaks_in_nearest_band():
    t = np.arange(32000) / 16000
    m = log_mel(np.sin(2 * np.pi * 1000 * t), CFG)
    centers = oracle_band_centers()
    assert np.argmax(m.values.mean(axis=1)) == np.argmin(np.abs(centers - 1000))


def test_filterbank_centers_match_oracle():
    _, edges = mel_filterbank(16000, 2048, 128)
    np.testing.assert_allclose(edges[1:-1], oracle_band_centers(), rtol=1e-9)


def test_filterbank_rows():
    fb, _ = mel_filterbank(16000, 2048, 128)
    assert fb.shape == (128, 1025)
    assert np.all(fb >= 0)
    assert np.all((fb > 0).any(axis=1))


def test_white_noise_shape():
    x = np.random.default_rng(0).standard_normal(160000)
    m = log_mel(x, CFG)
    assert m.values.shape == (128, brute_frame_count(160000, 2048, 512)) == (128, 313)


def test_short_waveform_rejected():
    with pytest.raises(FrontendError):
        log_mel(np.zeros(100), CFG)


@pytest.mark.parametrize("n", [2048, 2049, 5000, 16000, 33333])
def test_frame_count_formula(n):
    assert log_mel(np.ones(n), CFG).n_frames == brute_frame_count(n, 2048, 512)


# ---------------------------------------------------------------- scaling

def test_fit_scaler_two_point():
    s = fit_scaler([LogMelMatrix(np.array([[-10.0, 0.0], [2.0, 1.0]]))])
    assert s.a == pytest.approx(1 / 6) and s.b == pytest.approx(2 / 3)
    s = fit_scaler([LogMelMatrix(np.array([[-1.0, 1.0]]))])
    assert s.a == pytest.approx(1) and s.b == pytest.approx(0)


def test_fit_scaler_random_corpus():
    rng = np.random.default_rng(1)
    mats = [LogMelMatrix(rng.normal(-5, 3, (128, rng.integers(130, 300)))) for _ in range(5)]
    s = fit_scaler(mats)
    scaled = [scale_affine(m, s).values for m in mats]
    assert min(v.min() for v in scaled) == pytest.approx(-1, abs=1e-9)
    assert max(v.max() for v in scaled) == pytest.approx(1, abs=1e-9)


def test_fit_scaler_errors():
    with pytest.raises(FrontendError):
        fit_scaler([LogMelMatrix(np.full((4, 4), 3.0))])
    with pytest.raises(FrontendError):
        fit_scaler([])


def test_scale_clamps_and_rejects_rescaling():
    s = Scaler(1 / 6, 2 / 3)  # training range [-10, 2]
    out = scale_affine(LogMelMatrix(np.array([[4.0, -30.0]])), s)
    assert out.values.tolist() == [[1.0, -1.0]]
    with pytest.raises(FrontendError):
        scale_affine(out, s)


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=50))
def test_scaling_idempotent_on_unit_range(vals):
    m = LogMelMatrix(np.array([vals]))
    np.testing.assert_array_equal(scale_affine(m, Scaler(1.0, 0.0)).values, m.values)


# ---------------------------------------------------------------- segmentation

def test_offsets_examples():
    assert segment_offsets(128, 128, 64) == [0]
    assert segment_offsets(313, 128, 64) == brute_offsets(313, 128, 64) == [0, 64, 128, 185]


def test_offsets_random_lengths():
    rng = np.random.default_rng(3)
    for n in rng.integers(1, 2000, size=50):
        for hop in (32, 64, 128):
            offs = segment_offsets(int(n), 128, hop)
            assert offs == brute_offsets(int(n), 128, hop)
            if n >= 128:
                exact = (n - 128) % hop == 0
                assert len(offs) == (n - 128) // hop + 1 + (0 if exact else 1)


def test_slice_windows_segments():
    rng = np.random.default_rng(4)
    m = LogMelMatrix(rng.uniform(-1, 1, (128, 313)), "scaled")
    segs = slice_windows(m, CFG, "clip")
    assert [s.frame_offset for s in segs] == [0, 64, 128, 185]
    for s in segs:
        assert s.values.shape == (128, 128)
        np.testing.assert_array_equal(s.values, m.values[:, s.frame_offset : s.frame_offset + 128])


def test_short_clip_reflect_padded():
    m = LogMelMatrix(np.random.default_rng(5).uniform(-1, 1, (128, 127)), "scaled")
    segs = slice_windows(m, CFG)
    assert len(segs) == 1 and segs[0].values.shape == (128, 128)
    with pytest.raises(FrontendError):
        slice_windows(m, FrontendConfig(pad_short=False))


def test_config_invariants():
    with pytest.raises(FrontendError):
        FrontendConfig(segment_hop_frames=200)
    with pytest.raises(FrontendError):
        FrontendConfig(log_floor=0)


@settings(max_examples=10, deadline=None)
@given(st.integers(2048, 40000))
def test_every_segment_in_range(n):
    rng = np.random.default_rng(n)
    x = rng.standard_normal(n)
    m = log_mel(x, CFG)
    s = fit_scaler([m])
    for seg in slice_windows(scale_affine(m, s), CFG):
        assert seg.values.shape == (128, 128)
        assert seg.values.min() >= -1 and seg.values.max() <= 1


def test_segment_set_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    paths = [write_wav(tmp_path / f"{i}.wav", rng.standard_normal(40000) * 0.1) for i in range(3)]
    segs = extract(paths, ["a", "b", "c"], CFG)
    segs.save(tmp_path / "cache.npz")
    back = SegmentSet.load(tmp_path / "cache.npz", expect=CFG)
    np.testing.assert_array_equal(back.segments, segs.segments)
    assert back.scaler == segs.scaler and back.clip_ids == ["a", "b", "c"]
    with pytest.raises(FrontendError):
        SegmentSet.load(tmp_path / "cache.npz", expect=FrontendConfig(hop_length=256))
