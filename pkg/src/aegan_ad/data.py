"""DCASE-style corpus scanning and a synthetic machine-hum corpus with planted anomalies.

Expected layout::

    <root>/<machine>/train/section_00_source_train_normal_0000_<attrs>.wav
    <root>/<machine>/test/section_00_target_test_anomaly_0012_<attrs>.wav

Evaluation-set files without domain or label tokens (``section_03_0007.wav``)
are accepted with ``domain``/``label`` set to ``unknown``.
"""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("clip_id", "label", "anomaly_type", "t_start", "t_end", "f_low", "f_high")
ANOMALY_TYPES = ("impulse_train", "tone_shift", "band_dropout")

_NAME = re.compile(
    r"^section_(?P<section>\d+)"
    r"(?:_(?P<domain>source|target))?"
    r"(?:_(?P<split>train|test))?"
    r"(?:_(?P<label>normal|anomaly))?"
    r"_(?P<index>\d+)"
    r"(?:_.*)?$"
)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ClipRecord:
    path: Path
    machine_type: str
    section: int
    domain: str
    split: str
    label: str

    @property
    def clip_id(self) -> str:
        return f"{self.machine_type}/{self.split}/{self.path.stem}"


@dataclass
class ScanResult:
    records: list[ClipRecord]
    skipped: list[tuple[Path, str]] = field(default_factory=list)

    def select(self, machine=None, split=None) -> list[ClipRecord]:
        return [r for r in self.records
                if (machine is None or r.machine_type == machine) and (split is None or r.split == split)]

    def machines(self) -> list[str]:
        return sorted({r.machine_type for r in self.records})


def parse_clip_path(path: Path, root: Path) -> ClipRecord:
    rel = path.relative_to(root)
    if len(rel.parts) < 3:
        raise DatasetError(f"expected <machine>/<split>/<file>, got {rel}")
    machine, split_dir = rel.parts[-3], rel.parts[-2]
    m = _NAME.match(path.stem)
    if m is None:
        raise DatasetError(f"unrecognised file name {path.name}")
    split = m["split"] or split_dir
    if split not in ("train", "test") or split != split_dir:
        raise DatasetError(f"split token {m['split']!r} disagrees with directory {split_dir!r}")
    label = m["label"] or ("normal" if split == "train" else "unknown")
    if split == "train" and label != "normal":
        raise DatasetError(f"{rel}: training clips must be normal")
    return ClipRecord(path, machine, int(m["section"]), m["domain"] or "unknown", split, label)


def scan_dataset(root) -> ScanResult:
    """Parse every WAV under ``root``; unparseable names go to ``skipped`` with a reason.

    A labelled anomaly in a training directory is a hard error.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    files = sorted(root.rglob("*.wav"))
    if not files:
        raise DatasetError(f"no .wav files under {root}")
    result = ScanResult([])
    for f in files:
        try:
            result.records.append(parse_clip_path(f, root))
        except DatasetError as exc:
            if "training clips must be normal" in str(exc):
                raise
            result.skipped.append((f, str(exc)))
    for f, why in result.skipped:
        log.warning("skipped %s: %s", f, why)
    return result


# --------------------------------------------------------------------------
# synthetic corpus
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    n_normal: int = 200
    n_anomaly: int = 50
    seed: int = 0
    anomaly_types: tuple[str, ...] = ANOMALY_TYPES
    domain_shift: float = 2.0  # spectral tilt of target clips, dB per octave around 1 kHz
    machine_type: str = "fan"
    n_sections: int = 1
    sample_rate: int = 16000
    duration_s: float = 10.0
    target_train_fraction: float = 0.1
    anomaly_gain: float = 1.0

    def __post_init__(self):
        bad = set(self.anomaly_types) - set(ANOMALY_TYPES)
        if bad:
            raise DatasetError(f"unknown anomaly types {sorted(bad)}")
        if self.duration_s < 2.0:
            raise DatasetError("clips must last at least 2 s")
        if self.n_normal < self.n_anomaly + 2:
            raise DatasetError("n_normal must exceed n_anomaly by at least 2 (test normals mirror test anomalies)")


def _tilt(x, sr, db_per_octave):
    spec = np.fft.rfft(x)
    f = np.fft.rfftfreq(len(x), 1 / sr)
    gain = 10 ** (db_per_octave * np.log2(np.maximum(f, 20.0) / 1000.0) / 20)
    return np.fft.irfft(spec * gain, n=len(x))


def machine_hum(rng, cfg: SynthConfig, section: int, domain: str) -> np.ndarray:
    sr = cfg.sample_rate
    n = int(cfg.duration_s * sr)
    t = np.arange(n) / sr
    f0 = (90.0 + 25.0 * section) * rng.uniform(0.98, 1.02)
    wobble = 1 + 0.1 * np.sin(2 * np.pi * rng.uniform(2, 5) * t + rng.uniform(0, 2 * np.pi))
    x = np.zeros(n)
    for h in range(1, 16):
        x += rng.uniform(0.8, 1.2) / h * np.sin(2 * np.pi * h * f0 * t + rng.uniform(0, 2 * np.pi))
    x *= wobble
    b, a = signal.butter(2, 3000, fs=sr)
    x += 0.5 * signal.lfilter(b, a, rng.standard_normal(n))
    x += 0.02 * rng.standard_normal(n)
    if domain == "target":
        x = _tilt(x, sr, cfg.domain_shift)
    return 0.08 * x / np.sqrt(np.mean(x**2))


def plant_anomaly(x, rng, kind: str, cfg: SynthConfig):
    """Add one anomaly to ``x`` in place; returns (t_start, t_end, f_low, f_high)."""
    sr = cfg.sample_rate
    longest = min(5.0, cfg.duration_s - 1.0)
    dur = rng.uniform(min(2.0, longest / 2), longest)
    t0 = rng.uniform(0.5, cfg.duration_s - dur - 0.5)
    i0, i1 = int(t0 * sr), int((t0 + dur) * sr)
    g = cfg.anomaly_gain
    if kind == "impulse_train":
        period = int(sr / rng.uniform(4, 10))
        click = rng.standard_normal(int(0.002 * sr)) * np.exp(-np.arange(int(0.002 * sr)) / (0.0005 * sr))
        for k in range(i0, i1 - len(click), period):
            x[k : k + len(click)] += 0.35 * g * click
        return t0, t0 + dur, 0.0, sr / 2
    if kind == "tone_shift":
        fa = rng.uniform(1500, 4000)
        tt = np.arange(i1 - i0) / sr
        ramp = np.minimum(1, np.minimum(tt, tt[::-1]) / 0.05)
        x[i0:i1] += 0.05 * g * ramp * np.sin(2 * np.pi * fa * tt)
        return t0, t0 + dur, fa - 50, fa + 50
    if kind == "band_dropout":
        lo = rng.uniform(200, 500)
        hi = lo * 2.5
        sos = signal.butter(4, [lo, hi], btype="bandstop", fs=sr, output="sos")
        seg = x[i0:i1]
        mix = min(1.0, 0.9 * g)
        x[i0:i1] = (1 - mix) * seg + mix * signal.sosfiltfilt(sos, seg)
        return t0, t0 + dur, lo, hi
    raise DatasetError(f"unknown anomaly type {kind!r}")


def _plan(cfg: SynthConfig):
    """(split, label, section, domain, index) per clip, in generation order."""
    n_test = cfg.n_anomaly
    n_train = cfg.n_normal - n_test
    plan = []
    for i in range(n_train):
        sec = i % cfg.n_sections
        dom = "target" if (i // cfg.n_sections) < round(cfg.target_train_fraction * n_train / cfg.n_sections) else "source"
        plan.append(("train", "normal", sec, dom, i))
    for label, count in (("normal", n_test), ("anomaly", n_test)):
        for i in range(count):
            plan.append(("test", label, i % cfg.n_sections, "source" if (i // cfg.n_sections) % 2 == 0 else "target", i))
    return plan


def synth_corpus(cfg: SynthConfig, out_root) -> Path:
    """Write the synthetic corpus and its manifest; returns the manifest path."""
    out_root = Path(out_root)
    mdir = out_root / cfg.machine_type
    rows = []
    for n, (split, label, sec, dom, idx) in enumerate(_plan(cfg)):
        rng = np.random.default_rng([cfg.seed, n])
        x = machine_hum(rng, cfg, sec, dom)
        kind, extent = "", ("", "", "", "")
        if label == "anomaly":
            kind = cfg.anomaly_types[idx % len(cfg.anomaly_types)]
            extent = plant_anomaly(x, rng, kind, cfg)
        name = f"section_{sec:02d}_{dom}_{split}_{label}_{idx:04d}_synth.wav"
        path = mdir / split / name
        path.parent.mkdir(parents=True, exist_ok=True)
        wavfile.write(path, cfg.sample_rate, (np.clip(x, -1, 1 - 2**-15) * 32768).astype(np.int16))
        rows.append([f"{cfg.machine_type}/{split}/{path.stem}", label, kind,
                     *[(f"{v:.6f}" if v != "" else "") for v in extent]])
    manifest = out_root / f"{cfg.machine_type}_manifest.csv"
    with open(manifest, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        w.writerows(rows)
    return manifest


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
