"""Log-mel frontend: WAV -> log-mel -> affine scaling to [-1, 1] -> 128x128 segments."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from math import gcd
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

SEGMENT_SIZE = 128


class FrontendError(ValueError):
    pass


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate_hz: int = 16000
    n_fft: int = 2048
    hop_length: int = 512
    n_mels: int = 128
    window: str = "hann"
    log_floor: float = 1e-10
    segment_frames: int = SEGMENT_SIZE
    segment_hop_frames: int = 64
    pad_short: bool = True

    def __post_init__(self):
        if self.segment_hop_frames > self.segment_frames or self.segment_hop_frames < 1:
            raise FrontendError("segment_hop_frames must lie in [1, segment_frames]")
        if self.log_floor <= 0:
            raise FrontendError("log_floor must be positive")
        if min(self.sample_rate_hz, self.n_fft, self.hop_length, self.n_mels) <= 0:
            raise FrontendError("frontend sizes must be positive")

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class LogMelMatrix:
    values: np.ndarray  # (n_mels, n_frames)
    scale_state: str = "raw_log"

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass
class SpectrogramSegment:
    values: np.ndarray  # (128, 128)
    clip_id: str
    frame_offset: int


@dataclass(frozen=True)
class Scaler:
    """Affine map ``a * x + b`` sending the training range onto [-1, 1]."""

    a: float
    b: float

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b}


# --------------------------------------------------------------------------
# audio I/O
# --------------------------------------------------------------------------

def load_audio(path, cfg: FrontendConfig) -> tuple[np.ndarray, int]:
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read audio file {path}: {exc}") from exc

    if data.ndim > 1:
        data = data.mean(axis=1)
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)

    if x.size == 0:
        raise FrontendError(f"{path}: zero-length audio")
    if rate != cfg.sample_rate_hz:
        g = gcd(rate, cfg.sample_rate_hz)
        x = signal.resample_poly(x, cfg.sample_rate_hz // g, rate // g)
    if not np.all(np.isfinite(x)):
        raise FrontendError(f"{path}: non-finite samples")
    return x, cfg.sample_rate_hz


# --------------------------------------------------------------------------
# mel filterbank (Slaney mel scale, area-normalized triangles)
# --------------------------------------------------------------------------

_F_SP = 200.0 / 3
_MIN_LOG_HZ = 1000.0
_MIN_LOG_MEL = _MIN_LOG_HZ / _F_SP
_LOGSTEP = np.log(6.4) / 27.0


def hz_to_mel(f):
    f = np.asarray(f, dtype=np.float64)
    lin = f / _F_SP
    log = _MIN_LOG_MEL + np.log(np.maximum(f, 1e-12) / _MIN_LOG_HZ) / _LOGSTEP
    return np.where(f >= _MIN_LOG_HZ, log, lin)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    lin = _F_SP * m
    log = _MIN_LOG_HZ * np.exp(_LOGSTEP * (m - _MIN_LOG_MEL))
    return np.where(m >= _MIN_LOG_MEL, log, lin)


def mel_filterbank(sr: int, n_fft: int, n_mels: int, fmin: float = 0.0, fmax: float | None = None):
    """Return the (n_mels, n_fft//2 + 1) filterbank and the band edge frequencies (Hz)."""
    fmax = sr / 2 if fmax is None else fmax
    fft_freqs = np.linspace(0.0, sr / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))

    fdiff = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1, None]
    upper = ramps[2:] / fdiff[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return weights, edges


# --------------------------------------------------------------------------
# log-mel
# --------------------------------------------------------------------------

def n_frames_for(n_samples: int, hop_length: int) -> int:
    """Frame count of a centered STFT."""
    return 1 + n_samples // hop_length


def _stft_power(x: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    pad = cfg.n_fft // 2
    xp = np.pad(x, pad, mode="constant")
    n_frames = n_frames_for(len(x), cfg.hop_length)
    frames = np.lib.stride_tricks.sliding_window_view(xp, cfg.n_fft)[:: cfg.hop_length][:n_frames]
    win = signal.get_window(cfg.window, cfg.n_fft, fftbins=True)
    spec = np.fft.rfft(frames * win, axis=1)
    return (spec.real**2 + spec.imag**2).T  # (n_freq, n_frames)


def log_mel(waveform: np.ndarray, cfg: FrontendConfig) -> LogMelMatrix:
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1 or len(x) < cfg.n_fft:
        raise FrontendError(f"waveform needs at least n_fft={cfg.n_fft} samples, got {x.shape}")
    fb, _ = mel_filterbank(cfg.sample_rate_hz, cfg.n_fft, cfg.n_mels)
    mel = fb @ _stft_power(x, cfg)
    return LogMelMatrix(np.log(np.maximum(mel, cfg.log_floor)), "raw_log")


# --------------------------------------------------------------------------
# scaling
# --------------------------------------------------------------------------

def fit_scaler(matrices) -> Scaler:
    matrices = list(matrices)
    if not matrices:
        raise FrontendError("fit_scaler needs at least one matrix")
    lo = min(float(np.min(m.values)) for m in matrices)
    hi = max(float(np.max(m.values)) for m in matrices)
    if not hi > lo:
        raise FrontendError(f"degenerate scale: corpus is constant ({lo})")
    a = 2.0 / (hi - lo)
    return Scaler(a=a, b=-1.0 - a * lo)


def scale_affine(m: LogMelMatrix, params: Scaler) -> LogMelMatrix:
    if m.scale_state != "raw_log":
        raise FrontendError("matrix is already scaled")
    return LogMelMatrix(np.clip(params.a * m.values + params.b, -1.0, 1.0), "scaled")


# --------------------------------------------------------------------------
# segmentation
# --------------------------------------------------------------------------

def segment_offsets(n_frames: int, size: int, hop: int) -> list[int]:
    if n_frames < size:
        return [0]
    offsets = list(range(0, n_frames - size + 1, hop))
    if offsets[-1] != n_frames - size:
        offsets.append(n_frames - size)
    return offsets


def slice_windows(m: LogMelMatrix, cfg: FrontendConfig, clip_id: str = "") -> list[SpectrogramSegment]:
    if m.scale_state != "scaled":
        raise FrontendError("slice_windows expects a scaled matrix")
    size = cfg.segment_frames
    values = m.values
    if values.shape[1] < size:
        if not cfg.pad_short:
            raise FrontendError(f"clip {clip_id!r} has {values.shape[1]} frames < {size}")
        values = np.pad(values, ((0, 0), (0, size - values.shape[1])), mode="reflect")
    return [
        SpectrogramSegment(values[:, o : o + size].copy(), clip_id, o)
        for o in segment_offsets(values.shape[1], size, cfg.segment_hop_frames)
    ]


# --------------------------------------------------------------------------
# corpus-level extraction and cache container
# --------------------------------------------------------------------------

@dataclass
class SegmentSet:
    """Segments of many clips stacked into one array, with per-segment clip index."""

    segments: np.ndarray  # (N, 128, 128) float32
    clip_index: np.ndarray  # (N,) int, index into clip_ids
    frame_offsets: np.ndarray  # (N,) int
    clip_ids: list[str]
    scaler: Scaler
    frontend: FrontendConfig
    n_frames: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.segments)

    def clip_segments(self, i: int) -> np.ndarray:
        return self.segments[self.clip_index == i]

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, segments=self.segments, clip_index=self.clip_index,
                     frame_offsets=self.frame_offsets)
        meta = {
            "config_hash": self.frontend.config_hash(),
            "frontend": asdict(self.frontend),
            "scaler": self.scaler.to_dict(),
            "clip_ids": self.clip_ids,
            "n_frames": self.n_frames,
        }
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=1))

    @classmethod
    def load(cls, path, expect: FrontendConfig | None = None) -> "SegmentSet":
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        cfg = FrontendConfig(**meta["frontend"])
        if cfg.config_hash() != meta["config_hash"]:
            raise FrontendError(f"{path}: sidecar hash does not match its own frontend config")
        if expect is not None and expect.config_hash() != meta["config_hash"]:
            raise FrontendError(f"{path}: cached with frontend {meta['config_hash']}, "
                                f"expected {expect.config_hash()}")
        with np.load(path) as z:
            return cls(z["segments"], z["clip_index"], z["frame_offsets"], list(meta["clip_ids"]),
                       Scaler(**meta["scaler"]), cfg, list(meta["n_frames"]))


def compute_log_mels(paths, cfg: FrontendConfig) -> list[LogMelMatrix]:
    return [log_mel(load_audio(p, cfg)[0], cfg) for p in paths]


def build_segment_set(log_mels, clip_ids, cfg: FrontendConfig, scaler: Scaler) -> SegmentSet:
    segs, idx, offs = [], [], []
    for i, (m, cid) in enumerate(zip(log_mels, clip_ids)):
        for s in slice_windows(scale_affine(m, scaler), cfg, cid):
            segs.append(s.values)
            idx.append(i)
            offs.append(s.frame_offset)
    return SegmentSet(
        np.asarray(segs, dtype=np.float32).reshape(-1, cfg.n_mels, cfg.segment_frames),
        np.asarray(idx, dtype=np.int64),
        np.asarray(offs, dtype=np.int64),
        list(clip_ids),
        scaler,
        cfg,
        [m.n_frames for m in log_mels],
    )


def extract(paths, clip_ids, cfg: FrontendConfig, scaler: Scaler | None = None) -> SegmentSet:
    """Featurize clips; fits the scaler on these clips when none is given."""
    mels = compute_log_mels(paths, cfg)
    if scaler is None:
        scaler = fit_scaler(mels)
    return build_segment_set(mels, clip_ids, cfg, scaler)
