"""Glue between the data, frontend, training and detection stages."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import plotting
from .checkpoint import Checkpoint, CheckpointError, config_hash
from .config import RunConfig
from .detection import (
    DetectionConfig,
    ScoreTable,
    build_reference,
    clip_scores,
    fit_threshold,
    segment_scores,
    select_best_score,
)
from .frontend import FrontendConfig, Scaler, SegmentSet, extract
from .localization import MeanSpectrogram, mean_spectrogram
from .training import epoch_summary, train, write_loss_csv

log = logging.getLogger(__name__)

SPLIT_DIRS = {"train": "train", "dev": "test", "eval": "test", "test": "test"}


def featurize(records, cfg: FrontendConfig, scaler: Scaler | None = None, cache=None) -> SegmentSet:
    """Segments for ``records``; reuses ``cache`` when it holds the same clips under the same frontend."""
    ids = [r.clip_id for r in records]
    if not records:
        raise data_mod.DatasetError("no clips to featurize")
    if cache is not None and Path(cache).exists():
        cached = SegmentSet.load(cache, expect=cfg)
        if cached.clip_ids == ids and (scaler is None or cached.scaler == scaler):
            return cached
        log.info("cache %s is stale; re-extracting", cache)
    segs = extract([r.path for r in records], ids, cfg, scaler)
    if cache is not None:
        segs.save(cache)
    return segs


def train_machine(data_root, machine: str, cfg: RunConfig, out_ckpt, cache_dir=None) -> Checkpoint:
    scan = data_mod.scan_dataset(data_root)
    records = scan.select(machine, "train")
    if not records:
        raise data_mod.DatasetError(f"no training clips for machine {machine!r} under {data_root}")
    out_ckpt = Path(out_ckpt)
    cache = Path(cache_dir) / f"{machine}_train.npz" if cache_dir else None
    segs = featurize(records, cfg.frontend, cache=cache)
    log.info("training %s on %d segments from %d clips", machine, len(segs), len(records))
    ckpt = train(segs, machine, cfg.train, cfg.model)
    ckpt.save(out_ckpt)
    write_loss_csv(ckpt.loss_log, out_ckpt.with_name(out_ckpt.stem + "_loss.csv"))
    plotting.loss_curves(epoch_summary(ckpt.loss_log), out_ckpt.with_name(out_ckpt.stem + "_loss.png"))
    save_mean(mean_spectrogram(segs.segments, source=machine), ckpt, out_ckpt.with_name(out_ckpt.stem + "_mean.npz"))
    cfg.dump(out_ckpt.with_name(out_ckpt.stem + "_config.yaml"))
    return ckpt


def save_mean(mean: MeanSpectrogram, ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    np.savez(path, values=mean.values)
    path.with_suffix(".json").write_text(json.dumps(
        {"config_hash": ckpt.config_hash, "source": mean.source, "sample_count": mean.sample_count}))
    return path


def load_mean(path, ckpt: Checkpoint) -> MeanSpectrogram:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if meta["config_hash"] != ckpt.config_hash:
        raise CheckpointError(f"{path} was produced by config {meta['config_hash']}, checkpoint is {ckpt.config_hash}")
    with np.load(path) as z:
        return MeanSpectrogram(z["values"], meta["source"], meta["sample_count"])


def score_split(ckpt: Checkpoint, data_root, split: str, det_cfg: DetectionConfig, cache_dir=None) -> ScoreTable:
    """Per-clip scores of all 12 variants for one split of the checkpoint's machine type.

    The training split is scored with self-exclusion in neighbour searches.
    """
    if split not in SPLIT_DIRS:
        raise ValueError(f"split must be one of {sorted(SPLIT_DIRS)}")
    scan = data_mod.scan_dataset(data_root)
    machine = ckpt.machine_type
    train_recs = scan.select(machine, "train")
    cache = (lambda name: Path(cache_dir) / f"{machine}_{name}_{ckpt.config_hash}.npz") if cache_dir else (lambda name: None)
    train_segs = featurize(train_recs, ckpt.frontend_cfg, ckpt.scaler, cache("train"))
    ref = build_reference(ckpt, train_segs.segments, det_cfg)

    if SPLIT_DIRS[split] == "train":
        recs, segs, exclude = train_recs, train_segs, True
    else:
        recs = scan.select(machine, "test")
        if not recs:
            raise data_mod.DatasetError(f"no test clips for machine {machine!r}")
        segs, exclude = featurize(recs, ckpt.frontend_cfg, ckpt.scaler, cache("test")), False
    seg = segment_scores(ckpt, ref, segs.segments, exclude_self=exclude)
    # scores depend on the checkpoint and on the detection settings
    table = ScoreTable(config_hash=config_hash(ckpt.config_hash, det_cfg))
    table.add_clips(recs, clip_scores(seg, segs.clip_index, len(recs), det_cfg.aggregation))
    return table


def select_and_threshold(test_table: ScoreTable, train_table: ScoreTable, det_cfg: DetectionConfig):
    selected = select_best_score(test_table)
    thresholds = {}
    for machine, name in selected.items():
        s = [r["score"] for r in train_table.filter(machine=machine, score_name=name)]
        thresholds[machine] = {"score_name": name, **fit_threshold(s, det_cfg.threshold_quantile).to_dict()}
    return selected, thresholds


def write_table(table: ScoreTable, path) -> Path:
    path = table.write_csv(path)
    Path(path).with_suffix(".json").write_text(json.dumps(
        {"config_hash": table.config_hash, "rows": len(table.rows), "machines": table.machines()}))
    return path


def read_table(path) -> ScoreTable:
    table = ScoreTable.read_csv(path)
    side = Path(path).with_suffix(".json")
    if side.exists():
        table.config_hash = json.loads(side.read_text())["config_hash"]
    return table
