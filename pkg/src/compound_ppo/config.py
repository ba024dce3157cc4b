"""Training configuration, presets and the JSON config snapshot."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LOSS_NAMES, LossVariant, parse_eps

CONFIG_FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    env: str = "gridharvest"
    env_params: dict = field(default_factory=dict)
    loss: str = "compound"
    w: float = 0.5
    gamma: float = 0.99
    lam: float = 0.95
    clip_eps: float | None = 0.2  # None disables clipping
    c1: float = 0.5
    c2: float = 0.01
    lr: float = 2.5e-4
    adam_eps: float = 1e-8
    rollout_len: int = 256
    num_envs: int = 8
    minibatch: int = 128
    epochs: int = 10
    total_steps: int = 200_000
    seed: int = 0
    mode: str = "serial"
    samplers: int = 4
    trainers: int = 1
    queue_capacity: int = 8
    sync_handshake: bool = False
    max_updates: int | None = None
    adv_norm: bool = True
    grad_clip: bool = True
    max_grad_norm: float = 0.5
    value_clip: bool = False
    value_clip_range: float = 0.2
    obs_norm: bool = False
    reward_scale: bool = False
    sub_agg: str = "mean"
    mix_mode: str = "reduce"
    log_std_init: float = 0.0
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.loss not in LOSS_NAMES:
            raise ValueError(f"unknown loss {self.loss!r}; choose one of {', '.join(LOSS_NAMES)}")
        if not 0.0 <= self.w <= 1.0:
            raise ValueError("w must be in [0, 1]")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ValueError("gamma and lam must be in [0, 1]")
        if self.clip_eps is not None:
            self.clip_eps = float(self.clip_eps)
            if math.isinf(self.clip_eps):
                self.clip_eps = None
            elif not self.clip_eps > 0:
                raise ValueError("clip_eps must be positive (or null for no clipping)")
        if self.c1 < 0 or self.c2 < 0 or not self.lr > 0:
            raise ValueError("c1, c2 must be >= 0 and lr > 0")
        for name in ("rollout_len", "num_envs", "minibatch", "epochs", "total_steps", "samplers", "trainers", "queue_capacity"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.mode not in ("serial", "async"):
            raise ValueError(f"mode must be 'serial' or 'async', got {self.mode!r}")
        if self.sub_agg not in ("mean", "sum") or self.mix_mode not in ("reduce", "broadcast"):
            raise ValueError("sub_agg must be mean|sum and mix_mode reduce|broadcast")
        if not self.max_grad_norm > 0:
            raise ValueError("max_grad_norm must be positive")

    @property
    def variant(self) -> LossVariant:
        return LossVariant.parse(self.loss, self.w)

    @property
    def eps(self) -> float:
        return parse_eps(self.clip_eps)

    @property
    def steps_per_update(self) -> int:
        return self.rollout_len * self.num_envs

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps({"format_version": CONFIG_FORMAT_VERSION, "config": self.to_dict()}, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> TrainConfig:
        doc = json.loads(text)
        if doc.get("format_version") != CONFIG_FORMAT_VERSION:
            raise ValueError(f"unsupported config format version {doc.get('format_version')!r}")
        return cls.from_dict(doc["config"])

    @classmethod
    def load(cls, path: str | Path) -> TrainConfig:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)


# Continuous-control regime: gamma 0.99, GAE lambda 0.95, eps 0.2,
# entropy 0.001, value coef 1, lr 2.5e-4, serial stabilisers on.
MUJOCO_ANALOGUE = dict(
    env="chainreach",
    gamma=0.99,
    lam=0.95,
    clip_eps=0.2,
    c1=1.0,
    c2=0.001,
    lr=2.5e-4,
    adv_norm=True,
    grad_clip=True,
    value_clip=True,
    obs_norm=True,
    reward_scale=True,
)

# Discrete RTS regime: entropy 0.01, value coef 0.5, 512-step experiences,
# 32 envs scaled to 8, 3 trainers, one pass per batch, asynchronous.
MURTS_ANALOGUE = dict(
    env="gridharvest",
    gamma=0.99,
    lam=0.95,
    clip_eps=0.2,
    c1=0.5,
    c2=0.01,
    lr=2.5e-4,
    rollout_len=512,
    num_envs=8,
    trainers=3,
    samplers=4,
    epochs=1,
    mode="async",
    adv_norm=False,
)

PRESETS = {"mujoco-analogue": MUJOCO_ANALOGUE, "murts-analogue": MURTS_ANALOGUE}


def preset(name: str, **overrides) -> TrainConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose one of {', '.join(PRESETS)}") from None
    return TrainConfig(**{**base, **overrides})
