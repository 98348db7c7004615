import math

import numpy as np
import pytest
import torch
from torch import nn

from aegan_ad.checkpoint import Checkpoint, CheckpointError
from aegan_ad.frontend import FrontendConfig, Scaler
from aegan_ad.model import ConfigurationError, ModelConfig, init_models
from aegan_ad.training import (
    TrainConfig,
    TrainingAborted,
    critic_step,
    epoch_batches,
    feature_matching,
    generator_step,
    gradient_penalty,
    iterations_per_epoch,
    make_optimizers,
    train,
    write_loss_csv,
)

TINY = ModelConfig(base_channels=4, latent_dim=16)
CFG = TrainConfig(batch_size=8, epochs=2)


def sum_critic(x):
    return x.flatten(1).sum(dim=1)


def scaled_sum_critic(x):
    return x.flatten(1).sum(dim=1) / 128


class SmallCritic(nn.Module):
    """8x8-input critic used with the finite-difference oracle."""

    def __init__(self, seed=0):
        super().__init__()
        torch.manual_seed(seed)
        self.net = nn.Sequential(nn.Conv2d(1, 4, 3, padding=1), nn.Tanh(), nn.Flatten(), nn.Linear(256, 1))
        self.double()

    def forward(self, x):
        return self.net(x).squeeze(1)


def fd_grad_norm(f, x, h=1e-5):
    x = x.clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = f(x[None]).item()
        flat[i] = old - h
        down = f(x[None]).item()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g.norm().item()


def segments(n, seed=0):
    return torch.rand(n, 1, 128, 128, generator=torch.Generator().manual_seed(seed)) * 2 - 1


# ---------------------------------------------------------------- gradient penalty

def test_penalty_linear_stub():
    real, fake = segments(4), segments(4, 1)
    gp = gradient_penalty(sum_critic, real, fake, 10.0)
    assert gp.item() == pytest.approx(10 * (128 - 1) ** 2, rel=1e-6)
    assert gp.item() == pytest.approx(161290, rel=1e-6)


def test_penalty_unit_gradient_stub():
    gp = gradient_penalty(scaled_sum_critic, segments(4), segments(4, 1), 10.0)
    assert gp.item() == pytest.approx(0.0, abs=1e-6)


def test_penalty_matches_finite_differences():
    d = SmallCritic()
    rng = torch.Generator().manual_seed(0)
    real = torch.rand(5, 1, 8, 8, generator=rng, dtype=torch.float64)
    fake = torch.rand(5, 1, 8, 8, generator=rng, dtype=torch.float64)
    eps = torch.rand(5, generator=rng, dtype=torch.float64)
    gp = gradient_penalty(d, real, fake, 10.0, eps=eps).item()
    x_hat = eps[:, None, None, None] * real + (1 - eps[:, None, None, None]) * fake
    with torch.no_grad():
        norms = [fd_grad_norm(d, x_hat[i]) for i in range(5)]
    oracle = 10 * np.mean([(n - 1) ** 2 for n in norms])
    assert gp == pytest.approx(oracle, rel=1e-3)


def test_penalty_nonnegative_random():
    _, d = init_models(TINY, 0)
    for seed in range(5):
        assert gradient_penalty(d, segments(3, seed), segments(3, seed + 10), 10.0).item() >= 0


def test_penalty_shape_mismatch():
    with pytest.raises(ValueError):
        gradient_penalty(sum_critic, segments(2), segments(3), 10.0)


# ---------------------------------------------------------------- critic / generator steps

def test_critic_step_composition_and_isolation():
    g, d = init_models(TINY, 0)
    real = segments(6)
    before = {k: v.clone() for k, v in g.state_dict().items()}
    out = critic_step(d, g, real, CFG, generator=torch.Generator().manual_seed(3))
    with torch.no_grad():
        fake = g(real)
        d_real, d_fake = d(real)[0].mean().item(), d(fake)[0].mean().item()
    gp = gradient_penalty(d, real, fake, CFG.lambda_gp, generator=torch.Generator().manual_seed(3)).item()
    assert out["critic_loss"] == pytest.approx(d_fake - d_real + gp, abs=1e-6)
    assert out["critic_loss"] == pytest.approx(out["d_fake"] - out["d_real"] + out["gp"], abs=1e-6)

    opt_g, opt_d = make_optimizers(g, d, CFG)
    d_before = [p.clone() for p in d.parameters()]
    critic_step(d, g, real, CFG, opt_d)
    for k, v in g.state_dict().items():
        assert torch.equal(v, before[k])
    assert any(not torch.equal(a, b) for a, b in zip(d_before, d.parameters()))


def test_generator_step_isolation():
    g, d = init_models(TINY, 0)
    opt_g, _ = make_optimizers(g, d, CFG)
    d_before = {k: v.clone() for k, v in d.state_dict().items()}
    g_before = [p.clone() for p in g.parameters()]
    out = generator_step(g, d, segments(6), CFG, opt_g)
    for k, v in d.state_dict().items():
        assert torch.equal(v, d_before[k])
    assert all(p.requires_grad for p in d.parameters())
    assert any(not torch.equal(a, b) for a, b in zip(g_before, g.parameters()))
    assert out["g_loss"] == pytest.approx(CFG.alpha_fm * out["fm"] + CFG.beta_mse * out["rec"], rel=1e-6)
    assert out["rec"] == pytest.approx(128 * 128 * out["mse"], rel=1e-5)


def test_pixel_mean_reduction():
    g, d = init_models(TINY, 0)
    cfg = TrainConfig(mse_reduction="pixel_mean")
    out = generator_step(g, d, segments(4), cfg)
    assert out["rec"] == out["mse"]
    assert out["g_loss"] == pytest.approx(out["fm"] + out["mse"], rel=1e-6)
    with pytest.raises(ConfigurationError):
        TrainConfig(mse_reduction="median")


def test_generator_loss_zero_for_identity():
    _, d = init_models(TINY, 0)
    out = generator_step(nn.Identity(), d, segments(4), CFG)
    assert out["g_loss"] == 0.0


def test_generator_loss_zero_for_constant_embedding():
    g, _ = init_models(TINY, 0)

    class Constant(nn.Module):
        def forward(self, x):
            emb = torch.ones(x.shape[0], 8)
            return emb.mean(1), emb

    out = generator_step(g, Constant(), segments(4), TrainConfig(beta_mse=0.0))
    assert out["g_loss"] == 0.0


def test_feature_matching_two_pass_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(16, 10)), rng.normal(1, 2, size=(16, 10))

    def two_pass(e):
        n = len(e)
        mu = [sum(e[i, j] for i in range(n)) / n for j in range(e.shape[1])]
        sd = [math.sqrt(sum((e[i, j] - mu[j]) ** 2 for i in range(n)) / n) for j in range(e.shape[1])]
        return np.array(mu), np.array(sd)

    (ma, sa), (mb, sb) = two_pass(a), two_pass(b)
    oracle = np.sum((ma - mb) ** 2) + np.sum((sa - sb) ** 2)
    got = feature_matching(torch.as_tensor(a), torch.as_tensor(b)).item()
    assert got == pytest.approx(oracle, abs=1e-6)


def test_batch_of_one_rejected():
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=1)
    g, d = init_models(TINY, 0)
    with pytest.raises(ConfigurationError):
        generator_step(g, d, segments(1), CFG)


# ---------------------------------------------------------------- batching / loop

@pytest.mark.parametrize("n,bs", [(64, 8), (65, 8), (70, 8), (8, 8), (3, 8), (513, 512)])
def test_epoch_batches(n, bs):
    batches = epoch_batches(n, bs, torch.Generator().manual_seed(0))
    assert sorted(torch.cat(batches).tolist()) == list(range(n))
    assert all(len(b) >= 2 for b in batches)
    assert len(batches) == iterations_per_epoch(n, bs)
    if n % bs != 1:
        assert len(batches) == math.ceil(n / bs)


def test_train_deterministic_and_logged(tmp_path):
    data = segments(64).numpy()[:, 0]
    a = train(data, "toy", CFG, TINY)
    b = train(data, "toy", CFG, TINY)
    assert a.loss_log == b.loss_log
    assert a.step == 2 * math.ceil(64 / 8)
    for row in a.loss_log:
        assert all(math.isfinite(row[k]) for k in ("critic_loss", "gp", "fm", "mse"))
    text = write_loss_csv(a.loss_log, tmp_path / "loss.csv").read_text().splitlines()
    assert text[0] == "epoch,critic_loss,gp,fm,mse" and len(text) == 3


def test_train_bn_variant_runs():
    cfg = ModelConfig(base_channels=4, latent_dim=16, norm_scheme="BN_generator_LN_critic")
    ckpt = train(segments(16).numpy()[:, 0], "toy", TrainConfig(batch_size=8, epochs=1), cfg)
    assert ckpt.step == 2


def test_train_empty_and_nonfinite(tmp_path):
    with pytest.raises(ValueError):
        train(np.zeros((0, 128, 128)), "toy", CFG, TINY)
    bad = segments(8).numpy()[:, 0]
    bad[0, 0, 0] = np.nan
    with pytest.raises(TrainingAborted) as exc:
        train(bad, "toy", CFG, TINY, abort_path=tmp_path / "abort.pt")
    assert (tmp_path / "abort.pt").exists() and exc.value.checkpoint is not None


def test_checkpoint_roundtrip(tmp_path):
    ckpt = train(segments(8).numpy()[:, 0], "toy", TrainConfig(batch_size=4, epochs=1), TINY,
                 FrontendConfig(), Scaler(0.1, 2.0))
    path = ckpt.save(tmp_path / "c.pt")
    back = Checkpoint.load(path)
    assert back.machine_type == "toy" and back.scaler == Scaler(0.1, 2.0)
    assert back.config_hash == ckpt.config_hash and back.train_cfg == ckpt.train_cfg
    for a, b in zip(ckpt.generator.state_dict().values(), back.generator.state_dict().values()):
        assert torch.equal(a, b)
    meta = path.with_suffix(".pt.json")
    meta.write_text(meta.read_text().replace('"epochs": 1', '"epochs": 2'))
    with pytest.raises(CheckpointError):
        Checkpoint.load(path)
