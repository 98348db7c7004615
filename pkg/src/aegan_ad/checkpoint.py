"""One checkpoint per machine type: network weights plus everything needed to rescore."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .frontend import FrontendConfig, Scaler
from .model import Critic, Generator, ModelConfig


class CheckpointError(RuntimeError):
    pass


def config_hash(*parts) -> str:
    blob = json.dumps([asdict(p) if hasattr(p, "__dataclass_fields__") else p for p in parts],
                      sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    generator: Generator
    critic: Critic
    model_cfg: ModelConfig
    frontend_cfg: FrontendConfig
    scaler: Scaler
    train_cfg: object  # TrainConfig; kept loose to avoid an import cycle
    machine_type: str
    step: int = 0
    epoch: int = 0
    loss_log: list[dict] = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        return config_hash(self.frontend_cfg, self.model_cfg, self.train_cfg)

    def metadata(self) -> dict:
        return {
            "machine_type": self.machine_type,
            "config_hash": self.config_hash,
            "frontend_hash": self.frontend_cfg.config_hash(),
            "model": asdict(self.model_cfg),
            "frontend": asdict(self.frontend_cfg),
            "train": asdict(self.train_cfg),
            "scaler": self.scaler.to_dict(),
            "step": self.step,
            "epoch": self.epoch,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"generator": self.generator.state_dict(), "critic": self.critic.state_dict(),
                    "config_hash": self.config_hash}, path)
        meta_path = path.with_suffix(path.suffix + ".json")
        meta_path.write_text(json.dumps(self.metadata(), indent=1))
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        from .training import TrainConfig

        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        weights = torch.load(path, map_location="cpu", weights_only=True)
        mcfg = ModelConfig(**meta["model"])
        fcfg = FrontendConfig(**meta["frontend"])
        tcfg = TrainConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["train"].items()})
        g, d = Generator(mcfg), Critic(mcfg)
        g.load_state_dict(weights["generator"])
        d.load_state_dict(weights["critic"])
        ckpt = cls(g, d, mcfg, fcfg, Scaler(**meta["scaler"]), tcfg, meta["machine_type"],
                   meta["step"], meta["epoch"])
        if not (ckpt.config_hash == meta["config_hash"] == weights["config_hash"]):
            raise CheckpointError(f"{path}: config hash mismatch between weights, sidecar and configs")
        g.eval()
        d.eval()
        return ckpt
