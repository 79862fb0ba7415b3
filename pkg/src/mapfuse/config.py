"""Flat JSON run configuration.

Keys are either bare (``epochs``, ``batch_size``, ``seed``, ``deterministic``)
or prefixed with the section they configure: ``model.``, ``gen.``, ``loss.``,
``eval.`` and ``optim.``. Unknown keys are an error.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ContractError
from .evaluation import EvalConfig
from .loss import LossWeights
from .model import ModelConfig
from .optim import AdamWConfig
from .synthworld import GenConfig
from .train import TrainConfig

_SECTIONS = {
    "model": ModelConfig,
    "gen": GenConfig,
    "loss": LossWeights,
    "eval": EvalConfig,
    "optim": AdamWConfig,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    eval: EvalConfig = field(default_factory=EvalConfig)
    optim: AdamWConfig = field(default_factory=AdamWConfig)
    epochs: int = 20
    batch_size: int = 1
    seed: int = 0
    deterministic: bool = True
    train_scenarios: int = 64
    eval_scenarios: int = 16

    def validate(self) -> None:
        self.model.validate()
        self.gen.validate()
        self.eval.validate()
        self.optim.validate()
        if self.epochs < 0 or self.batch_size < 1:
            raise ContractError("epochs >= 0 and batch_size >= 1 required")
        if (self.model.H, self.model.W, self.model.x_max, self.model.y_max) != \
                (self.gen.H, self.gen.W, self.gen.x_max, self.gen.y_max):
            raise ContractError("model and generator grids disagree")
        if self.model.P != self.gen.points:
            raise ContractError("model.P must equal gen.points")

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
                           weights=self.loss, optim=self.optim)

    def to_flat(self) -> dict:
        out = {}
        for sec in _SECTIONS:
            for k, v in asdict(getattr(self, sec)).items():
                out[f"{sec}.{k}"] = list(v) if isinstance(v, tuple) else v
        for f in fields(self):
            if f.name not in _SECTIONS:
                out[f.name] = getattr(self, f.name)
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        sections: dict[str, dict] = {s: {} for s in _SECTIONS}
        top = {}
        top_names = {f.name for f in fields(cls)} - set(_SECTIONS)
        for key, value in flat.items():
            sec, dot, name = key.partition(".")
            if dot and sec in _SECTIONS:
                allowed = {f.name for f in fields(_SECTIONS[sec])}
                if name not in allowed:
                    raise ContractError(f"unknown config key {key!r}")
                sections[sec][name] = tuple(value) if isinstance(value, list) else value
            elif not dot and key in top_names:
                top[key] = value
            else:
                raise ContractError(f"unknown config key {key!r}")
        try:
            built = {s: _SECTIONS[s](**kw) for s, kw in sections.items()}
        except (TypeError, ValueError) as exc:
            raise ContractError(f"invalid configuration: {exc}") from exc
        cfg = cls(**built, **top)
        cfg.validate()
        return cfg

    def with_model(self, **kw) -> "RunConfig":
        return replace(self, model=replace(self.model, **kw))


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        flat = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(flat, dict):
        raise ContractError(f"{path}: top level must be an object")
    return RunConfig.from_flat(flat)


def desk_config() -> RunConfig:
    """The fixed-seed benchmark used by the trend checks (coarser grid for a single core)."""
    gen = GenConfig(H=25, W=50)
    model = ModelConfig(H=25, W=50)
    return RunConfig(model=model, gen=gen, optim=AdamWConfig(lr=1e-3), epochs=16)
