"""JSON run configuration with strict key checking.

Top-level sections: ``network``, ``miim``, ``loss``, ``sampler``, ``augment``,
``eval``, ``optimizer``, ``data``; scalars ``epochs``, ``seed``,
``output_dir``, ``checkpoint_every``, ``precision``, ``log_every``.
Unknown keys anywhere raise ``ValueError``. Relative paths are resolved
against the config file's directory at load time.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

from .backbone import NetworkConfig
from .data import AugmentConfig, SamplerConfig
from .evaluation import EvalProtocol
from .losses import LossConfig

__all__ = ["OptimizerConfig", "DataConfig", "RunConfig", "load_config", "dump_config"]

_MIIM_KEYS = ("r_s", "r_c", "k_s", "heads")


def _strict(cls, d, section):
    if not isinstance(d, dict):
        raise ValueError(f"section {section!r} must be an object")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown keys in {section!r}: {sorted(unknown)}")
    return cls(**d)


@dataclass
class OptimizerConfig:
    kind: str = "sgd"
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    warmup_epochs: int = 5
    milestones: list = field(default_factory=list)
    gamma: float = 0.1
    trunk_lr_scale: float = 0.1  # applied only when pretrained trunk weights are loaded

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError("optimizer.kind must be 'sgd' or 'adam'")
        if self.base_lr <= 0:
            raise ValueError("optimizer.base_lr must be positive")
        if self.warmup_epochs < 0:
            raise ValueError("optimizer.warmup_epochs must be non-negative")
        self.milestones = [int(m) for m in self.milestones]

    def lr_factor(self, epoch: int) -> float:
        f = 1.0
        if self.warmup_epochs and epoch < self.warmup_epochs:
            f = (epoch + 1) / self.warmup_epochs
        return f * self.gamma ** sum(epoch >= m for m in self.milestones)


@dataclass
class DataConfig:
    train_manifest: str = ""
    test_manifest: str = ""
    batch_size_eval: int = 32


@dataclass
class RunConfig:
    network: NetworkConfig
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval: EvalProtocol = field(default_factory=EvalProtocol)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    epochs: int = 60
    seed: int = 0
    output_dir: str = "runs/default"
    checkpoint_every: int = 10
    precision: str = "float32"
    log_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be 'float32' or 'float64'")
        if self.sampler.k_per_modality < self.loss.top_k and self.loss.lambda1 > 0:
            raise ValueError("sampler.k_per_modality must be >= loss.top_k")

    @classmethod
    def from_dict(cls, d, base_dir="."):
        d = dict(d)
        allowed = {f.name for f in fields(cls)} | {"miim"}
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown top-level config keys: {sorted(unknown)}")
        net = dict(d.pop("network", {}))
        miim = d.pop("miim", {})
        bad = set(miim) - set(_MIIM_KEYS)
        if bad:
            raise ValueError(f"unknown keys in 'miim': {sorted(bad)}")
        overlap = set(miim) & set(net)
        if overlap:
            raise ValueError(f"keys {sorted(overlap)} belong in 'miim', not 'network'")
        net.update(miim)
        net.setdefault("num_classes", 2)  # replaced by the training manifest's identity count
        kwargs = {"network": _strict(NetworkConfig, net, "network")}
        for name, sub in (("loss", LossConfig), ("sampler", SamplerConfig), ("augment", AugmentConfig),
                          ("eval", EvalProtocol), ("optimizer", OptimizerConfig), ("data", DataConfig)):
            if name in d:
                kwargs[name] = _strict(sub, d.pop(name), name)
        kwargs.update(d)
        cfg = cls(**kwargs)
        cfg._resolve_paths(base_dir)
        return cfg

    def _resolve_paths(self, base_dir):
        def res(p):
            return p if not p or os.path.isabs(p) else os.path.normpath(os.path.join(base_dir, p))

        self.data.train_manifest = res(self.data.train_manifest)
        self.data.test_manifest = res(self.data.test_manifest)
        self.output_dir = res(self.output_dir)
        if self.network.pretrained_weights_path:
            self.network.pretrained_weights_path = res(self.network.pretrained_weights_path)

    def to_dict(self):
        net = self.network.to_dict()
        miim = {k: net.pop(k) for k in _MIIM_KEYS}
        return {
            "network": net,
            "miim": miim,
            "loss": self.loss.to_dict(),
            "sampler": self.sampler.to_dict(),
            "augment": self.augment.to_dict(),
            "eval": self.eval.to_dict(),
            "optimizer": asdict(self.optimizer),
            "data": asdict(self.data),
            "epochs": self.epochs,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "checkpoint_every": self.checkpoint_every,
            "precision": self.precision,
            "log_every": self.log_every,
        }


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return RunConfig.from_dict(raw, base_dir=os.path.dirname(os.path.abspath(path)))


def dump_config(cfg: RunConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path

