"""Command-line entry point: ``aegan-ad <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import plotting
from .checkpoint import Checkpoint, CheckpointError
from .config import load_config
from .detection import write_selection
from .evaluation import evaluate, roc_vertices, write_json
from .frontend import SegmentSet, load_audio, log_mel, scale_affine, slice_windows
from .localization import localize, render, render_figure, stitch
from .model import ConfigurationError, export_ln_stats, reconstruct
from .pipeline import (
    featurize,
    load_mean,
    read_table,
    score_split,
    select_and_threshold,
    train_machine,
    write_table,
)

log = logging.getLogger("aegan_ad")


class CLIError(RuntimeError):
    pass


def _run_config(args):
    overrides = dict(kv.split("=", 1) for kv in (args.set or []))
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = str(args.seed)
    return load_config(args.config, overrides)


def _summary(path, payload):
    path = Path(path)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True, default=str))
    return path


def _require(*paths):
    missing = [str(p) for p in paths if not Path(p).exists()]
    if missing:
        raise CLIError(f"expected outputs not written: {missing}")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args):
    cfg = data_mod.SynthConfig(
        n_normal=args.n_normal, n_anomaly=args.n_anomaly, seed=args.seed or 0,
        machine_type=args.machine, n_sections=args.sections, domain_shift=args.domain_shift,
        anomaly_gain=args.anomaly_gain,
    )
    manifest = data_mod.synth_corpus(cfg, args.out)
    _require(manifest)
    print(f"wrote synthetic corpus to {args.out} (manifest {manifest})")


def cmd_extract(args):
    cfg = _run_config(args)
    scan = data_mod.scan_dataset(args.data)
    recs = scan.select(args.machine, args.split)
    scaler = SegmentSet.load(args.scaler_from, expect=cfg.frontend).scaler if args.scaler_from else None
    if args.split == "test" and scaler is None:
        raise CLIError("test-split extraction needs --scaler-from <train cache>")
    segs = featurize(recs, cfg.frontend, scaler)
    segs.save(args.out)
    _require(args.out)
    print(f"{len(recs)} clips -> {len(segs)} segments, scaler a={segs.scaler.a:.6g} b={segs.scaler.b:.6g}")


def cmd_train(args):
    cfg = _run_config(args)
    if args.stats_net == "generator" and cfg.model.norm_scheme != "LN_both":
        raise ConfigurationError("LN statistics requested from a batch-normalized generator")
    ckpt = train_machine(args.data, args.machine, cfg, args.out, cache_dir=args.cache_dir)
    out = Path(args.out)
    _require(out, out.with_suffix(out.suffix + ".json"), out.with_name(out.stem + "_loss.csv"))
    last = ckpt.loss_log[-1]
    print(f"trained {args.machine}: {ckpt.step} steps, final mse={last['mse']:.5g} fm={last['fm']:.5g}")


def cmd_score(args):
    ckpt = Checkpoint.load(args.ckpt)
    cfg = _run_config(args)
    table = score_split(ckpt, args.data, args.split, cfg.detection, cache_dir=args.cache_dir)
    write_table(table, args.out)
    _require(args.out)
    print(f"scored {len(table.rows) // 12} clips ({args.split}) -> {args.out}")


def cmd_select(args):
    cfg = _run_config(args)
    test, train = read_table(args.scores), read_table(args.train_scores)
    if test.config_hash != train.config_hash:
        raise CheckpointError(f"score tables come from different configs ({test.config_hash} vs {train.config_hash})")
    selected, thresholds = select_and_threshold(test, train, cfg.detection)
    write_selection(args.out, selected, thresholds, test.config_hash)
    _require(args.out)
    for m, name in selected.items():
        t = thresholds[m]
        print(f"{m}: {name} threshold={t['threshold']:.6g}{' (fallback)' if t['fallback'] else ''}")


def cmd_evaluate(args):
    cfg = _run_config(args)
    table = read_table(args.scores)
    selected = None
    if args.selection:
        sel = json.loads(Path(args.selection).read_text())
        if table.config_hash and sel["config_hash"] != table.config_hash:
            raise CheckpointError("selection and scores come from different configs")
        selected = sel["selected"]
    p = args.p if args.p is not None else cfg.evaluation.p
    report = evaluate(table, selected, p)
    out = Path(args.out)
    report.write_csv(out)
    write_json(report, out.with_suffix(".json"))
    plotting.report_bars(report, out.with_suffix(".png"))
    curves = {}
    for m in report.machines:
        rows = [r for r in table.filter(machine=m.machine, score_name=m.score_name) if r["label"] in ("normal", "anomaly")]
        curves[f"{m.machine} {m.score_name}"] = roc_vertices([r["score"] for r in rows], [r["label"] == "anomaly" for r in rows])
    plotting.roc_figure(curves, out.with_name(out.stem + "_roc.png"))
    _require(out, out.with_suffix(".json"), out.with_suffix(".png"))
    print(report.table())


def cmd_localize(args):
    ckpt = Checkpoint.load(args.ckpt)
    ck = Path(args.ckpt)
    mean = load_mean(args.mean or ck.with_name(ck.stem + "_mean.npz"), ckpt)
    fcfg = ckpt.frontend_cfg
    m = scale_affine(log_mel(load_audio(args.clip, fcfg)[0], fcfg), ckpt.scaler)
    segs = slice_windows(m, fcfg, Path(args.clip).stem)
    stack = np.stack([s.values for s in segs])
    heat = localize(ckpt.generator, mean, stack, residual=args.residual)
    recon = reconstruct(ckpt.generator, stack.astype(np.float32))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for s, h, r in zip(segs, heat, recon):
        written += render(h, r, mean, out / f"segment_{s.frame_offset:05d}")
    offsets = [s.frame_offset for s in segs]
    clip_heat = stitch(heat, offsets, m.n_frames)
    clip_recon = stitch([type(h)(r) for h, r in zip(heat, recon)], offsets, m.n_frames).values
    clip_mean = np.tile(mean.values, (1, -(-m.n_frames // mean.values.shape[1])))[:, : m.n_frames]
    written += render(clip_heat, clip_recon, clip_mean, out / "clip")
    written.append(render_figure(clip_heat, clip_recon, clip_mean, out / "clip_figure.png", Path(args.clip).stem))
    _summary(out / "summary.json", {"clip": args.clip, "segments": offsets, "n_frames": m.n_frames,
                                    "residual": args.residual, "config_hash": ckpt.config_hash,
                                    "peak": float(clip_heat.values.max())})
    _require(*written)
    print(f"wrote {len(written)} files to {out}")


def cmd_stats(args):
    ckpt = Checkpoint.load(args.ckpt)
    net = ckpt.generator if args.net == "generator" else ckpt.critic
    if args.net == "generator" and ckpt.model_cfg.norm_scheme != "LN_both":
        raise ConfigurationError("LN statistics requested from a batch-normalized generator")
    scan = data_mod.scan_dataset(args.data)
    recs = scan.select(ckpt.machine_type, "train" if args.split == "train" else "test")
    segs = featurize(recs, ckpt.frontend_cfg, ckpt.scaler)
    feats = np.concatenate([export_ln_stats(net, segs.segments[i : i + 64]) for i in range(0, len(segs), 64)])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta_cols = ["clip_id", "frame_offset", "section", "domain", "label"]
    with open(out, "w") as fh:
        fh.write(",".join(meta_cols + [f"f{j}" for j in range(feats.shape[1])]) + "\n")
        for k, row in enumerate(feats):
            r = recs[segs.clip_index[k]]
            head = [r.clip_id, str(segs.frame_offsets[k]), str(r.section), r.domain, r.label]
            fh.write(",".join(head + [f"{v:.7g}" for v in row]) + "\n")
    _summary(out.with_suffix(".json"), {"net": args.net, "rows": len(feats), "dim": feats.shape[1],
                                        "config_hash": ckpt.config_hash})
    _require(out)
    print(f"{len(feats)} x {feats.shape[1]} LN statistics -> {out}")


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aegan-ad", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("synth", help="write a synthetic DCASE-layout corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-normal", type=int, default=200)
    sp.add_argument("--n-anomaly", type=int, default=50)
    sp.add_argument("--machine", default="fan")
    sp.add_argument("--sections", type=int, default=1)
    sp.add_argument("--domain-shift", type=float, default=2.0)
    sp.add_argument("--anomaly-gain", type=float, default=1.0)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("extract", help="log-mel segments for one machine/split")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--machine", required=True)
    sp.add_argument("--split", choices=["train", "test"], default="train")
    sp.add_argument("--scaler-from")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("train", help="train one machine type")
    common(sp)
    sp.add_argument("--machine", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--cache-dir")
    sp.add_argument("--stats-net", choices=["generator", "critic"], help="fail early if LN stats cannot be exported")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("score", help="all 12 anomaly scores per clip")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=["train", "dev", "eval"], required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--cache-dir")
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("select", help="best score per machine and its decision threshold")
    common(sp)
    sp.add_argument("--scores", required=True, help="labelled dev scores")
    sp.add_argument("--train-scores", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_select)

    sp = sub.add_parser("evaluate", help="AUC/pAUC/hmean report")
    common(sp)
    sp.add_argument("--scores", required=True)
    sp.add_argument("--selection")
    sp.add_argument("--p", type=float)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("localize", help="anomaly heatmaps for one clip")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--clip", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--mean")
    sp.add_argument("--residual", action="store_true", help="query-vs-reconstruction map instead")
    sp.set_defaults(func=cmd_localize)

    sp = sub.add_parser("stats", help="export LN-layer statistics")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=["train", "test"], default="train")
    sp.add_argument("--net", choices=["generator", "critic"], default="generator")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CLIError, ConfigurationError, CheckpointError, data_mod.DatasetError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
