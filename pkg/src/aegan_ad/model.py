"""Generator (convolutional autoencoder) and critic networks.

The encoder is a DCGAN discriminator stack, the decoder a DCGAN generator
stack, and the critic repeats the encoder stack but ends in a depth-wise
convolution whose output is the embedding used for scoring.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

INPUT_SIZE = (128, 128)
NORM_SCHEMES = ("LN_both", "BN_generator_LN_critic")


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 256
    base_channels: int = 64
    n_stages: int = 5
    norm_scheme: str = "LN_both"
    leaky_slope: float = 0.2
    embedding_dim: int | None = None  # defaults to the final stage width

    def __post_init__(self):
        if self.norm_scheme not in NORM_SCHEMES:
            raise ConfigurationError(f"norm_scheme must be one of {NORM_SCHEMES}")
        if INPUT_SIZE[0] // 2**self.n_stages != 4:
            raise ConfigurationError("n_stages must reduce 128 to 4")
        if not 0 < self.leaky_slope < 1:
            raise ConfigurationError("leaky_slope must lie in (0, 1)")
        if self.emb_dim % self.channels[-1]:
            raise ConfigurationError("embedding_dim must be a multiple of the final stage width")

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.n_stages)]

    @property
    def emb_dim(self) -> int:
        return self.embedding_dim or self.channels[-1]


class LayerNorm2d(nn.Module):
    """Per-sample normalization over (C, H, W) with a per-channel gain and bias."""

    def __init__(self, channels: int, eps: float = 1e-8):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        # small eps: the normalized output must stay invariant to input affine maps down to ~1e-5
        xc = x - x.mean(dim=(1, 2, 3), keepdim=True)
        y = xc * torch.rsqrt(xc.pow(2).mean(dim=(1, 2, 3), keepdim=True) + self.eps)
        return y * self.weight[:, None, None] + self.bias[:, None, None]


def _norm(kind: str, channels: int) -> nn.Module:
    return LayerNorm2d(channels) if kind == "LN" else nn.BatchNorm2d(channels)


def _down_stack(cfg: ModelConfig, norm: str) -> nn.Sequential:
    layers, c_in = [], 1
    for i, c in enumerate(cfg.channels):
        layers.append(nn.Conv2d(c_in, c, 4, 2, 1, bias=False))
        if i > 0:
            layers.append(_norm(norm, c))
        layers.append(nn.LeakyReLU(cfg.leaky_slope))
        c_in = c
    return nn.Sequential(*layers)


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[:, None]
    if x.dim() != 4 or x.shape[1] != 1 or tuple(x.shape[2:]) != INPUT_SIZE:
        raise ValueError(f"expected (..., 128, 128) segments, got {tuple(x.shape)}")
    return x


class Generator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.norm_kind = "LN" if cfg.norm_scheme == "LN_both" else "BN"
        chans = cfg.channels
        self.encoder = nn.Sequential(
            _down_stack(cfg, self.norm_kind),
            nn.Conv2d(chans[-1], cfg.latent_dim, 4, 1, 0, bias=False),
        )
        dec = [
            nn.ConvTranspose2d(cfg.latent_dim, chans[-1], 4, 1, 0, bias=False),
            _norm(self.norm_kind, chans[-1]),
            nn.LeakyReLU(cfg.leaky_slope),
        ]
        for c_in, c_out in zip(chans[::-1], chans[::-1][1:]):
            dec += [nn.ConvTranspose2d(c_in, c_out, 4, 2, 1, bias=False), _norm(self.norm_kind, c_out), nn.LeakyReLU(cfg.leaky_slope)]
        dec += [nn.ConvTranspose2d(chans[0], 1, 4, 2, 1, bias=False), nn.Tanh()]
        self.decoder = nn.Sequential(*dec)

    def encode(self, x):
        return self.encoder(_as_batch(x)).flatten(1)

    def decode(self, z):
        return self.decoder(z.reshape(z.shape[0], -1, 1, 1))

    def forward(self, x):
        return self.decode(self.encode(x))


class Critic(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.channels[-1]
        self.features = _down_stack(cfg, "LN")
        self.head = nn.Conv2d(c, cfg.emb_dim, 4, 1, 0, groups=c, bias=False)

    def embed(self, x):
        return self.head(self.features(_as_batch(x))).flatten(1)

    def forward(self, x):
        emb = self.embed(x)
        return emb.mean(dim=1), emb


def init_models(cfg: ModelConfig, seed: int = 0) -> tuple[Generator, Critic]:
    gen = torch.Generator().manual_seed(seed)
    g, d = Generator(cfg), Critic(cfg)
    for net in (g, d):
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.normal_(m.weight, 0.0, 0.02, generator=gen)
            elif isinstance(m, (LayerNorm2d, nn.BatchNorm2d)):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
    return g, d


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def _to_tensor(s) -> torch.Tensor:
    if isinstance(s, torch.Tensor):
        return s.float()
    return torch.as_tensor(np.asarray(s), dtype=torch.float32)


@torch.no_grad()
def encode(g: Generator, s) -> np.ndarray:
    g.eval()
    return g.encode(_to_tensor(s)).numpy()


@torch.no_grad()
def reconstruct(g: Generator, s) -> np.ndarray:
    g.eval()
    return g(_to_tensor(s))[:, 0].numpy()


@torch.no_grad()
def discriminate(d: Critic, s) -> tuple[np.ndarray, np.ndarray]:
    d.eval()
    value, emb = d(_to_tensor(s))
    return value.numpy(), emb.numpy()


def ln_layers(net: nn.Module) -> list[LayerNorm2d]:
    return [m for m in net.modules() if isinstance(m, LayerNorm2d)]


@torch.no_grad()
def export_ln_stats(net: nn.Module, s) -> np.ndarray:
    """Per-channel mean and standard deviation of every LN layer's input.

    Returns an (N, sum_layers 2 * channels) array laid out per layer as
    ``[mu_0..mu_C, sigma_0..sigma_C]``. The LN layer's own scalar moments are
    recoverable from these channel moments.
    """
    if isinstance(net, Generator) and net.norm_kind != "LN":
        raise ConfigurationError("generator is configured with batch normalization; no LN statistics")
    layers = ln_layers(net)
    if not layers:
        raise ConfigurationError("network has no LN layers")
    captured = []
    hooks = [m.register_forward_hook(lambda mod, inp, out: captured.append(inp[0])) for m in layers]
    try:
        net.eval()
        x = _to_tensor(s)
        if isinstance(net, Generator):
            net(x)
        else:
            net.embed(x)
    finally:
        for h in hooks:
            h.remove()
    parts = []
    for a in captured:
        flat = a.flatten(2)
        parts += [flat.mean(dim=2), flat.std(dim=2, unbiased=False)]
    return torch.cat(parts, dim=1).numpy()
