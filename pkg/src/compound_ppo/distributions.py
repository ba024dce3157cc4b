"""Compound action distributions built from network outputs.

Every head is independent given the state, so the joint log-probability of
a compound action is the sum of the per-sub-action log-probabilities. All
classes here are batched: the leading axis is the sample index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ActionSpaceSpec:
    """Shape of a compound action space.

    ``discrete``: one categorical head per entry of ``sub_action_dims``
    (entry = class count). ``continuous``: one scalar Gaussian per entry,
    every entry is 1.
    """

    kind: str
    sub_action_dims: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.kind not in ("discrete", "continuous"):
            raise ValueError(f"unknown action kind {self.kind!r}")
        dims = tuple(int(d) for d in self.sub_action_dims)
        object.__setattr__(self, "sub_action_dims", dims)
        if not dims:
            raise ValueError("need at least one sub-action")
        if self.kind == "discrete" and min(dims) < 1:
            raise ValueError("categorical heads need at least one class")
        if self.kind == "continuous" and any(d != 1 for d in dims):
            raise ValueError("continuous sub-actions are scalar (dim 1 each)")

    @classmethod
    def discrete(cls, *class_counts: int) -> ActionSpaceSpec:
        return cls("discrete", tuple(class_counts))

    @classmethod
    def continuous(cls, n_dims: int) -> ActionSpaceSpec:
        return cls("continuous", (1,) * int(n_dims))

    @property
    def n_sub(self) -> int:
        return len(self.sub_action_dims)

    @property
    def head_size(self) -> int:
        """Number of network outputs feeding the heads."""
        return sum(self.sub_action_dims)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sub_action_dims": list(self.sub_action_dims)}

    @classmethod
    def from_dict(cls, d: dict) -> ActionSpaceSpec:
        return cls(d["kind"], tuple(d["sub_action_dims"]))


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


class CategoricalHeads:
    """Independent categorical heads over concatenated logits ``(B, sum(dims))``."""

    def __init__(self, logits: np.ndarray, dims: tuple[int, ...]):
        logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
        if logits.shape[-1] != sum(dims):
            raise ValueError(f"logits width {logits.shape[-1]} != sum of class counts {sum(dims)}")
        self.dims = tuple(dims)
        self.logits = logits
        bounds = np.cumsum((0,) + self.dims)
        self._splits = [(int(bounds[i]), int(bounds[i + 1])) for i in range(len(self.dims))]
        self.log_p = [log_softmax(logits[:, lo:hi]) for lo, hi in self._splits]
        self.probs = [np.exp(lp) for lp in self.log_p]

    @property
    def batch_size(self) -> int:
        return self.logits.shape[0]

    @property
    def n_sub(self) -> int:
        return len(self.dims)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        out = np.empty((self.batch_size, self.n_sub), dtype=np.int64)
        for i, p in enumerate(self.probs):
            cdf = np.cumsum(p, axis=1)
            u = rng.random((self.batch_size, 1)) * cdf[:, -1:]
            out[:, i] = np.minimum((u >= cdf).sum(axis=1), self.dims[i] - 1)
        return out

    def mode(self) -> np.ndarray:
        return np.stack([p.argmax(axis=1) for p in self.probs], axis=1).astype(np.int64)

    def _check(self, actions: np.ndarray) -> np.ndarray:
        a = np.atleast_2d(np.asarray(actions))
        if a.shape != (self.batch_size, self.n_sub):
            raise ValueError(f"actions shape {a.shape} != {(self.batch_size, self.n_sub)}")
        if not np.issubdtype(a.dtype, np.integer):
            if not np.all(a == np.round(a)):
                raise ValueError("discrete actions must be integers")
            a = a.astype(np.int64)
        for i, d in enumerate(self.dims):
            if a[:, i].min() < 0 or a[:, i].max() >= d:
                raise IndexError(f"sub-action {i} index out of range [0, {d})")
        return a

    def log_probs(self, actions: np.ndarray) -> np.ndarray:
        a = self._check(actions)
        rows = np.arange(self.batch_size)
        return np.stack([lp[rows, a[:, i]] for i, lp in enumerate(self.log_p)], axis=1)

    def entropy(self) -> np.ndarray:
        return np.stack([-(p * lp).sum(axis=1) for p, lp in zip(self.probs, self.log_p)], axis=1)

    def log_probs_grad(self, actions: np.ndarray, upstream: np.ndarray) -> tuple[np.ndarray, None]:
        """Pull ``upstream`` (B, n_sub) through log_probs back to the logits."""
        a = self._check(actions)
        g = np.zeros_like(self.logits)
        rows = np.arange(self.batch_size)
        for i, (lo, hi) in enumerate(self._splits):
            gi = -self.probs[i] * upstream[:, i : i + 1]
            gi[rows, a[:, i]] += upstream[:, i]
            g[:, lo:hi] = gi
        return g, None

    def entropy_grad(self, upstream: np.ndarray) -> tuple[np.ndarray, None]:
        # dH/dz_k = -p_k (log p_k + H)
        g = np.zeros_like(self.logits)
        ent = self.entropy()
        for i, (lo, hi) in enumerate(self._splits):
            p, lp = self.probs[i], self.log_p[i]
            g[:, lo:hi] = -p * (lp + ent[:, i : i + 1]) * upstream[:, i : i + 1]
        return g, None


class GaussianHeads:
    """Diagonal Gaussian: state-dependent means ``(B, k)``, shared log-std ``(k,)``.

    The raw log-std parameter is clamped to ``[LOG_STD_MIN, LOG_STD_MAX]``;
    gradients through the clamp are zero outside the band.
    """

    def __init__(self, mean: np.ndarray, log_std: np.ndarray):
        self.mean = np.atleast_2d(np.asarray(mean, dtype=np.float64))
        raw = np.asarray(log_std, dtype=np.float64)
        if raw.shape != (self.mean.shape[1],):
            raise ValueError(f"log_std shape {raw.shape} does not match {self.mean.shape[1]} action dims")
        self.raw_log_std = raw
        self.log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        self._pass = (raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)
        self.std = np.exp(self.log_std)

    @property
    def batch_size(self) -> int:
        return self.mean.shape[0]

    @property
    def n_sub(self) -> int:
        return self.mean.shape[1]

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal(self.mean.shape)

    def mode(self) -> np.ndarray:
        return self.mean.copy()

    def _check(self, actions: np.ndarray) -> np.ndarray:
        a = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        if a.shape != self.mean.shape:
            raise ValueError(f"actions shape {a.shape} != {self.mean.shape}")
        return a

    def log_probs(self, actions: np.ndarray) -> np.ndarray:
        z = (self._check(actions) - self.mean) / self.std
        return -0.5 * z * z - self.log_std - _HALF_LOG_2PI

    def entropy(self) -> np.ndarray:
        return np.broadcast_to(0.5 + _HALF_LOG_2PI + self.log_std, self.mean.shape).copy()

    def log_probs_grad(self, actions: np.ndarray, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = (self._check(actions) - self.mean) / self.std
        g_mean = upstream * z / self.std
        g_log_std = ((z * z - 1.0) * upstream).sum(axis=0) * self._pass
        return g_mean, g_log_std

    def entropy_grad(self, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return np.zeros_like(self.mean), upstream.sum(axis=0) * self._pass


def make_distribution(spec: ActionSpaceSpec, head_out: np.ndarray, log_std: np.ndarray | None = None):
    if spec.kind == "discrete":
        return CategoricalHeads(head_out, spec.sub_action_dims)
    if log_std is None:
        raise ValueError("continuous heads need a log-std vector")
    return GaussianHeads(head_out, log_std)
