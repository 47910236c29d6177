"""Run configuration: one JSON document with sections mirroring the model,
schedule, loss-weight and skeleton types field for field. Unknown or missing
keys are errors, so typos cannot silently fall back to defaults."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .data import Skeleton
from .losses import LossWeights
from .model import ModelConfig
from .trainer import TrainSchedule

SECTIONS = ("model", "schedule", "weights", "skeleton")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig
    schedule: TrainSchedule
    weights: LossWeights
    skeleton: Skeleton

    def validate(self) -> None:
        if self.schedule.w_window != self.model.seq_latent_window:
            raise ConfigError(
                f"schedule.w_window ({self.schedule.w_window}) must equal "
                f"model.seq_latent_window ({self.model.seq_latent_window})")
        if self.model.joints != self.skeleton.joints:
            raise ConfigError(
                f"model.joints ({self.model.joints}) must equal the skeleton's "
                f"joint count ({self.skeleton.joints})")

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "schedule": self.schedule.to_dict(),
                "weights": self.weights.to_dict(), "skeleton": self.skeleton.to_dict()}

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        unknown = sorted(set(d) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections: {unknown}")
        missing = sorted(set(SECTIONS) - set(d))
        if missing:
            raise ConfigError(f"missing config sections: {missing}")
        try:
            cfg = RunConfig(model=ModelConfig.from_dict(d["model"]),
                            schedule=TrainSchedule.from_dict(d["schedule"]),
                            weights=LossWeights.from_dict(d["weights"]),
                            skeleton=Skeleton.from_dict(d["skeleton"]))
        except ValueError as e:
            raise ConfigError(str(e)) from None
        cfg.validate()
        return cfg


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: config must be a JSON object")
    return RunConfig.from_dict(doc)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1) + "\n",
                          encoding="utf-8")


def smoke_config() -> RunConfig:
    """Desk-scale configuration: 40-frame clips with a 10-frame observation,
    reduced latent widths, K=10 samples, 100 epochs."""
    skeleton = Skeleton.default9()
    model = ModelConfig(joints=9, frame_latent_dim=8, seq_latent_dim=16,
                        seq_latent_window=10, encoder_dim=32, encoder_heads=4,
                        encoder_ff=64, decoder_dim=64, decoder_heads=4,
                        decoder_ff=128, sgcn_blocks=1, sgcn_hidden=4,
                        tgcn_blocks=2, tgcn_hidden=16, flow_layers=4,
                        flow_hidden=16)
    schedule = TrainSchedule(epochs=100, samples_per_epoch=16, batch_size=8,
                             learning_rate=1e-3, kl_anneal_epochs=20,
                             ss_ramp_epochs=80, k_samples=10, seq_len=40,
                             obs_len=10, w_window=10, checkpoint_every=50)
    return RunConfig(model=model, schedule=schedule,
                     weights=LossWeights.humaneva(), skeleton=skeleton)


def full_config() -> RunConfig:
    """Reference-scale configuration (latent widths 16/32, 75-frame clips,
    K=50, 500 epochs) on the default synthetic skeleton."""
    skeleton = Skeleton.default9()
    model = ModelConfig(joints=9, seq_latent_window=15)
    schedule = TrainSchedule()
    return RunConfig(model=model, schedule=schedule,
                     weights=LossWeights.humaneva(), skeleton=skeleton)
