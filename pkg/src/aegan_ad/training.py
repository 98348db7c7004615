"""Adversarial training: WGAN-GP critic updates, feature-matching + MSE generator updates."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint
from .frontend import FrontendConfig, Scaler
from .model import ConfigurationError, Critic, Generator, ModelConfig, init_models

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("epoch", "critic_loss", "gp", "fm", "mse")


class NumericalError(FloatingPointError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    adam_betas: tuple[float, float] = (0.5, 0.9)
    lambda_gp: float = 10.0
    n_critic: int = 1
    epochs: int = 60
    batch_size: int = 512
    alpha_fm: float = 1.0
    beta_mse: float = 1.0
    # "segment_sum": squared error summed over the pixels of a segment, averaged over the batch.
    # "pixel_mean" averages over pixels too, which leaves the reconstruction gradient 2-3 orders of
    # magnitude below the feature-matching gradient, so the generator never learns to reconstruct.
    mse_reduction: str = "segment_sum"
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2: embedding std is undefined for one sample")
        if self.n_critic < 1 or self.epochs < 1:
            raise ConfigurationError("n_critic and epochs must be positive")
        if self.alpha_fm < 0 or self.beta_mse < 0:
            raise ConfigurationError("loss weights must be nonnegative")
        if self.mse_reduction not in ("segment_sum", "pixel_mean"):
            raise ConfigurationError("mse_reduction must be 'segment_sum' or 'pixel_mean'")


def _critic_value(d, x):
    out = d(x)
    return out[0] if isinstance(out, tuple) else out


def _embed(d, x):
    return d.embed(x) if hasattr(d, "embed") else d(x)[1]


def gradient_penalty(d, real_batch, fake_batch, lambda_gp=10.0, eps=None, generator=None):
    """``lambda * mean_i (||grad D(x_hat_i)||_2 - 1)^2`` along random interpolates.

    ``eps`` (one mixing weight per sample) may be passed explicitly; otherwise
    it is drawn uniformly from ``generator``.
    """
    if real_batch.shape != fake_batch.shape:
        raise ValueError(f"real {tuple(real_batch.shape)} and fake {tuple(fake_batch.shape)} differ")
    n = real_batch.shape[0]
    if eps is None:
        eps = torch.rand(n, generator=generator)
    eps = eps.reshape(n, *([1] * (real_batch.dim() - 1))).to(real_batch.dtype)
    x_hat = (eps * real_batch + (1 - eps) * fake_batch).detach().requires_grad_(True)
    value = _critic_value(d, x_hat)
    (grad,) = torch.autograd.grad(value.sum(), x_hat, create_graph=True)
    norms = grad.flatten(1).norm(2, dim=1)
    if not torch.all(torch.isfinite(norms)):
        raise NumericalError(f"non-finite critic gradient norms: {norms.detach().tolist()}")
    return lambda_gp * ((norms - 1) ** 2).mean()


def embedding_stats(emb):
    """Per-channel mean and population standard deviation over the batch."""
    mu = emb.mean(dim=0)
    var = ((emb - mu) ** 2).mean(dim=0)
    return mu, torch.sqrt(var + 1e-12)


def feature_matching(emb_real, emb_fake):
    mu_r, sd_r = embedding_stats(emb_real)
    mu_f, sd_f = embedding_stats(emb_fake)
    return ((mu_r - mu_f) ** 2).sum() + ((sd_r - sd_f) ** 2).sum()


def critic_step(d, g, real_batch, cfg: TrainConfig, opt_d=None, generator=None) -> dict:
    with torch.no_grad():
        fake = g(real_batch).detach()
    if fake.shape != real_batch.shape:
        fake = fake.reshape(real_batch.shape)
    d_real = _critic_value(d, real_batch).mean()
    d_fake = _critic_value(d, fake).mean()
    gp = gradient_penalty(d, real_batch, fake, cfg.lambda_gp, generator=generator)
    loss = d_fake - d_real + gp
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite critic loss (real={d_real.item()}, fake={d_fake.item()}, gp={gp.item()})")
    if opt_d is not None:
        opt_d.zero_grad(set_to_none=True)
        loss.backward()
        opt_d.step()
    return {"critic_loss": loss.item(), "d_real": d_real.item(), "d_fake": d_fake.item(), "gp": gp.item()}


def generator_step(g, d, real_batch, cfg: TrainConfig, opt_g=None) -> dict:
    if real_batch.shape[0] < 2:
        raise ConfigurationError("generator_step needs at least 2 samples per batch")
    frozen = [p for p in d.parameters() if p.requires_grad] if isinstance(d, torch.nn.Module) else []
    for p in frozen:
        p.requires_grad_(False)
    try:
        fake = g(real_batch).reshape(real_batch.shape)
        fm = feature_matching(_embed(d, real_batch), _embed(d, fake))
        sq = (fake - real_batch) ** 2
        mse = sq.mean()
        rec = sq.flatten(1).sum(dim=1).mean() if cfg.mse_reduction == "segment_sum" else mse
        loss = cfg.alpha_fm * fm + cfg.beta_mse * rec
        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite generator loss (fm={fm.item()}, mse={mse.item()})")
        if opt_g is not None:
            opt_g.zero_grad(set_to_none=True)
            loss.backward()
            opt_g.step()
    finally:
        for p in frozen:
            p.requires_grad_(True)
    # "mse" is always the per-pixel mean for logging; "rec" is the term entering the loss
    return {"g_loss": loss.item(), "fm": fm.item(), "mse": mse.item(), "rec": rec.item()}


def epoch_batches(n: int, batch_size: int, generator: torch.Generator) -> list[torch.Tensor]:
    """Shuffled index batches; a trailing singleton batch is merged into its predecessor."""
    perm = torch.randperm(n, generator=generator)
    batches = list(perm.split(batch_size))
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = torch.cat([batches[-1], tail])
    return batches


def make_optimizers(g, d, cfg: TrainConfig):
    opt_g = torch.optim.Adam(g.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas)
    opt_d = torch.optim.Adam(d.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas)
    return opt_g, opt_d


def train(
    segments,
    machine_type: str,
    cfg: TrainConfig,
    model_cfg: ModelConfig | None = None,
    frontend_cfg: FrontendConfig | None = None,
    scaler: Scaler | None = None,
    abort_path=None,
    on_step=None,
) -> Checkpoint:
    """Train one generator/critic pair on the normal segments of a machine type.

    ``segments`` is an (N, 128, 128) array or a ``SegmentSet``; in the latter
    case its frontend config and scaler are carried into the checkpoint.
    """
    model_cfg = model_cfg or ModelConfig()
    if hasattr(segments, "segments"):
        frontend_cfg = frontend_cfg or segments.frontend
        scaler = scaler or segments.scaler
        segments = segments.segments
    frontend_cfg = frontend_cfg or FrontendConfig()
    scaler = scaler or Scaler(1.0, 0.0)

    data = torch.as_tensor(np.asarray(segments, dtype=np.float32))
    if data.dim() == 3:
        data = data[:, None]
    if len(data) == 0:
        raise ValueError("empty training set")
    if len(data) < 2:
        raise ConfigurationError("need at least 2 training segments")

    g, d = init_models(model_cfg, cfg.seed)
    g.train()
    d.train()
    opt_g, opt_d = make_optimizers(g, d, cfg)
    gp_rng = torch.Generator().manual_seed(cfg.seed + 1)
    ckpt = Checkpoint(g, d, model_cfg, frontend_cfg, scaler, cfg, machine_type)

    step = 0
    for epoch in range(cfg.epochs):
        perm_rng = torch.Generator().manual_seed(cfg.seed * 100003 + epoch)
        sums = dict.fromkeys(LOSS_COLUMNS[1:], 0.0)
        batches = epoch_batches(len(data), cfg.batch_size, perm_rng)
        for idx in batches:
            real = data[idx]
            try:
                for _ in range(cfg.n_critic):
                    c = critic_step(d, g, real, cfg, opt_d, gp_rng)
                gl = generator_step(g, d, real, cfg, opt_g)
            except NumericalError as exc:
                ckpt.step, ckpt.epoch = step, epoch
                if abort_path is not None:
                    ckpt.save(abort_path)
                raise TrainingAborted(f"step {step}: {exc}", ckpt) from exc
            step += 1
            row = {"step": step, "epoch": epoch + 1, **c, **gl}
            ckpt.loss_log.append(row)
            for k in sums:
                sums[k] += row[k]
            if on_step is not None:
                on_step(row)
        means = {k: v / len(batches) for k, v in sums.items()}
        log.info("epoch %d/%d %s", epoch + 1, cfg.epochs, " ".join(f"{k}={v:.5g}" for k, v in means.items()))

    ckpt.step, ckpt.epoch = step, cfg.epochs
    g.eval()
    d.eval()
    return ckpt


def iterations_per_epoch(n_segments: int, batch_size: int) -> int:
    n = math.ceil(n_segments / batch_size)
    if n > 1 and n_segments % batch_size == 1:
        n -= 1
    return n


def epoch_summary(loss_log: list[dict]) -> list[dict]:
    out = {}
    for row in loss_log:
        acc = out.setdefault(row["epoch"], {k: [] for k in LOSS_COLUMNS[1:]})
        for k in acc:
            acc[k].append(row[k])
    return [{"epoch": e, **{k: float(np.mean(v)) for k, v in acc.items()}} for e, acc in sorted(out.items())]


def write_loss_csv(loss_log: list[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
        w.writeheader()
        for row in epoch_summary(loss_log):
            w.writerow({k: (row[k] if k == "epoch" else repr(row[k])) for k in LOSS_COLUMNS})
    return path
