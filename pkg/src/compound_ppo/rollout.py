"""Rollout storage, GAE, normalisation helpers and the experience wire format."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

FRAME_FORMAT_VERSION = 1
_FRAME_MAGIC = b"CPXF"


def compute_gae(rewards, values, dones, bootstrap_value: float, gamma: float, lam: float):
    """Generalised advantage estimation over one trajectory segment.

    ``dones[t]`` marks that the episode ended at step ``t``: no bootstrapping
    from ``t + 1`` and no advantage carried back across the boundary. The
    value after the last step is ``bootstrap_value``.

    Returns ``(advantages, returns)`` with ``returns = advantages + values``.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=np.float64)
    if r.size == 0:
        raise ValueError("empty trajectory")
    if not (r.shape == v.shape == d.shape):
        raise ValueError(f"length mismatch: rewards {r.shape}, values {v.shape}, dones {d.shape}")
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ValueError("gamma and lam must lie in [0, 1]")
    T = r.shape[0]
    adv = np.zeros_like(r)
    last = 0.0
    next_value = float(bootstrap_value)
    for t in reversed(range(T)):
        nonterminal = 1.0 - d[t]
        delta = r[t] + gamma * next_value * nonterminal - v[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
        next_value = v[t]
    return adv, adv + v


def normalize_advantages(adv, eps: float = 1e-8) -> np.ndarray:
    a = np.asarray(adv, dtype=np.float64)
    if a.size == 0:
        raise ValueError("empty batch")
    centred = a - a.mean()
    std = centred.std()
    if std < eps:
        return np.zeros_like(a)
    return centred / std


def minibatches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Split a random permutation of ``range(n)`` into chunks of ``size``.

    The last chunk is shorter when ``size`` does not divide ``n``.
    """
    if size <= 0:
        raise ValueError("minibatch size must be positive")
    if size > n:
        raise ValueError(f"minibatch size {size} exceeds batch length {n}")
    perm = rng.permutation(n)
    return [perm[i : i + size] for i in range(0, n, size)]


class RunningNorm:
    """Streaming mean/variance (Chan et al. parallel update) with clipping on apply."""

    def __init__(self, shape, clip: float = 10.0, eps: float = 1e-8):
        self.count = 0
        self.mean = np.zeros(shape)
        self.var = np.zeros(shape)
        self.clip = clip
        self.eps = eps

    def update(self, x) -> None:
        x = np.asarray(x, dtype=np.float64)
        batch = x.reshape((-1,) + self.mean.shape)
        n_b = batch.shape[0]
        if n_b == 0:
            return
        if batch.shape[1:] != self.mean.shape:
            raise ValueError(f"observation shape {batch.shape[1:]} != {self.mean.shape}")
        b_mean = batch.mean(axis=0)
        b_var = batch.var(axis=0)
        total = self.count + n_b
        delta = b_mean - self.mean
        m2 = self.var * self.count + b_var * n_b + delta * delta * self.count * n_b / total
        self.mean = self.mean + delta * n_b / total
        self.var = np.maximum(m2 / total, 0.0)
        self.count = total

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-len(self.mean.shape):] != self.mean.shape:
            raise ValueError(f"observation shape {x.shape} does not end with {self.mean.shape}")
        return np.clip((x - self.mean) / np.sqrt(self.var + self.eps), -self.clip, self.clip)

    def state_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean.tolist(), "var": self.var.tolist(), "clip": self.clip}

    @classmethod
    def from_state(cls, d: dict) -> RunningNorm:
        norm = cls(np.asarray(d["mean"]).shape, clip=d.get("clip", 10.0))
        norm.count = int(d["count"])
        norm.mean = np.asarray(d["mean"], dtype=np.float64)
        norm.var = np.asarray(d["var"], dtype=np.float64)
        return norm


class RewardScaler:
    """Divides rewards by the running std of the discounted return, per env."""

    def __init__(self, n_envs: int, gamma: float):
        self.gamma = gamma
        self.ret = np.zeros(n_envs)
        self.stats = RunningNorm(())

    def __call__(self, rewards, dones) -> np.ndarray:
        rewards = np.asarray(rewards, dtype=np.float64)
        self.ret = self.ret * self.gamma + rewards
        self.stats.update(self.ret)
        self.ret = np.where(np.asarray(dones, dtype=bool), 0.0, self.ret)
        return rewards / np.sqrt(self.stats.var + 1e-8)


@dataclass
class RolloutBatch:
    """Flat arrays for one optimisation phase. ``actions`` is ``(N, n_sub)``."""

    obs: np.ndarray
    actions: np.ndarray
    old_logps: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    advantages: np.ndarray = field(default=None)  # type: ignore[assignment]
    returns: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        n = self.obs.shape[0]
        for name in ("actions", "old_logps", "rewards", "values", "dones"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} length {getattr(self, name).shape[0]} != {n}")
        if self.old_logps.shape != self.actions.shape:
            raise ValueError("old_logps must hold one entry per sub-action")

    def __len__(self) -> int:
        return self.obs.shape[0]

    def take(self, idx: np.ndarray) -> RolloutBatch:
        if self.advantages is None or self.returns is None:
            raise ValueError("advantages and returns must be computed before minibatching")
        return RolloutBatch(
            self.obs[idx], self.actions[idx], self.old_logps[idx], self.rewards[idx],
            self.values[idx], self.dones[idx], self.advantages[idx], self.returns[idx],
        )


# Experience frames: u32 little-endian payload length, then the payload.
# Payload: magic, u16 format version, u64 policy version, u16 array count,
# then per array: u8 name length, name, u8 dtype-str length, dtype str,
# u8 ndim, u32 dims..., raw little-endian bytes.


def encode_frame(policy_version: int, arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(_FRAME_MAGIC)
    buf.write(struct.pack("<HQH", FRAME_FORMAT_VERSION, int(policy_version), len(arrays)))
    for name, arr in arrays.items():
        a = np.asarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        nb = name.encode()
        dt = a.dtype.str.encode()
        buf.write(struct.pack("<B", len(nb)) + nb)
        buf.write(struct.pack("<B", len(dt)) + dt)
        buf.write(struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(np.ascontiguousarray(a).tobytes())
    payload = buf.getvalue()
    return struct.pack("<I", len(payload)) + payload


def decode_frame(frame: bytes) -> tuple[int, dict[str, np.ndarray]]:
    """Inverse of :func:`encode_frame`; returns ``(policy_version, arrays)``."""
    (length,) = struct.unpack_from("<I", frame, 0)
    if length != len(frame) - 4:
        raise ValueError(f"frame length prefix {length} != payload size {len(frame) - 4}")
    mv = memoryview(frame)[4:]
    if bytes(mv[:4]) != _FRAME_MAGIC:
        raise ValueError("bad frame magic")
    version, policy_version, count = struct.unpack_from("<HQH", mv, 4)
    if version != FRAME_FORMAT_VERSION:
        raise ValueError(f"unsupported frame format version {version}")
    pos = 4 + struct.calcsize("<HQH")
    arrays = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<B", mv, pos)
        name = bytes(mv[pos + 1 : pos + 1 + ln]).decode()
        pos += 1 + ln
        (ld,) = struct.unpack_from("<B", mv, pos)
        dtype = np.dtype(bytes(mv[pos + 1 : pos + 1 + ld]).decode())
        pos += 1 + ld
        (ndim,) = struct.unpack_from("<B", mv, pos)
        shape = struct.unpack_from(f"<{ndim}I", mv, pos + 1)
        pos += 1 + 4 * ndim
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(mv[pos : pos + nbytes], dtype=dtype).reshape(shape).copy()
        pos += nbytes
    if pos != len(mv):
        raise ValueError("trailing bytes in frame")
    return policy_version, arrays
