"""Clipped-surrogate policy losses for compound actions, plus value loss,
total objective and clip telemetry.

All policy-loss routines take per-sub-action log-probabilities of shape
``(B, n_sub)`` and return batch means. Gradients are taken with respect to
the new log-probabilities, so callers chain them into the heads.

A surrogate entry is *clipped* exactly when its gradient vanishes:
``(r <= 1 - eps and A < 0) or (r >= 1 + eps and A > 0)``. Passing
``eps=math.inf`` disables clipping.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from .nn import NonFiniteError

LOG_RATIO_CLAMP = 20.0


class LossTag(str, Enum):
    COMPOUND = "compound"
    SUB_ACTION = "sub-action"
    MIX_RATIO = "mix-ratio"
    MIX_LOSS = "mix-loss"


LOSS_NAMES = tuple(t.value for t in LossTag)


@dataclass(frozen=True)
class LossVariant:
    tag: LossTag
    w: float = 0.5

    def __post_init__(self) -> None:
        object.__setattr__(self, "tag", LossTag(self.tag))
        if not 0.0 <= self.w <= 1.0:
            raise ValueError(f"mixing weight w must be in [0, 1], got {self.w}")

    @classmethod
    def parse(cls, name: str, w: float = 0.5) -> LossVariant:
        try:
            tag = LossTag(name)
        except ValueError:
            raise ValueError(f"unknown loss {name!r}; choose one of {', '.join(LOSS_NAMES)}") from None
        return cls(tag, w)


@dataclass
class ClipStats:
    total_samples: int = 0
    unclipped_samples: int = 0
    total_sub_entries: int = 0
    unclipped_sub_entries: int = 0

    def __add__(self, other: ClipStats) -> ClipStats:
        return ClipStats(
            self.total_samples + other.total_samples,
            self.unclipped_samples + other.unclipped_samples,
            self.total_sub_entries + other.total_sub_entries,
            self.unclipped_sub_entries + other.unclipped_sub_entries,
        )

    @property
    def unclipped_fraction(self) -> float:
        return self.unclipped_samples / self.total_samples if self.total_samples else float("nan")

    @property
    def unclipped_sub_fraction(self) -> float:
        return self.unclipped_sub_entries / self.total_sub_entries if self.total_sub_entries else float("nan")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    policy_objective: float
    value_loss: float
    entropy: float
    total_objective: float
    clip_stats: ClipStats


def active_mask(r: np.ndarray, adv: np.ndarray, eps: float) -> np.ndarray:
    """True where the clipped surrogate has gradient ``adv`` w.r.t. ``r``."""
    clipped = ((r <= 1.0 - eps) & (adv < 0)) | ((r >= 1.0 + eps) & (adv > 0))
    return ~clipped


def clipped_surrogate(r, adv, eps: float):
    """``min(r * A, clip(r, 1-eps, 1+eps) * A)``, elementwise."""
    r = np.asarray(r, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    out = np.minimum(r * adv, np.clip(r, 1.0 - eps, 1.0 + eps) * adv)
    return out if out.ndim else float(out)


def clipped_surrogate_grad(r, adv, eps: float):
    """d/dr of :func:`clipped_surrogate`: ``A`` on the active branch, exactly 0 when clipped."""
    r = np.asarray(r, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    g = np.where(active_mask(r, adv, eps), adv, 0.0)
    return g if g.ndim else float(g)


def _check_pair(new_logps, old_logps) -> tuple[np.ndarray, np.ndarray]:
    new = np.asarray(new_logps, dtype=np.float64)
    old = np.asarray(old_logps, dtype=np.float64)
    if new.shape != old.shape or new.shape[-1] < 1:
        raise ValueError(f"log-prob shapes differ or are empty: {new.shape} vs {old.shape}")
    return new, old


def _exp_ratio(log_ratio: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exponentiate a clamped log-ratio. Returns ``(ratio, d ratio / d log_ratio)``."""
    if not np.all(np.isfinite(log_ratio)):
        bad = np.asarray(log_ratio)[~np.isfinite(log_ratio)]
        raise NonFiniteError(f"non-finite log-ratio values: {bad[:5].tolist()}")
    clamped = np.clip(log_ratio, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)
    r = np.exp(clamped)
    inside = np.abs(log_ratio) <= LOG_RATIO_CLAMP
    return r, np.where(inside, r, 0.0)


def compound_ratio(new_logps, old_logps):
    """Joint-probability ratio ``exp(sum(new) - sum(old))`` over the last axis."""
    new, old = _check_pair(new_logps, old_logps)
    r, _ = _exp_ratio(new.sum(axis=-1) - old.sum(axis=-1))
    return r if r.ndim else float(r)


def sub_action_ratios(new_logps, old_logps) -> np.ndarray:
    """Per-sub-action ratios ``exp(new_i - old_i)``."""
    new, old = _check_pair(new_logps, old_logps)
    return _exp_ratio(new - old)[0]


def count_unclipped(ratios, advs, eps: float) -> ClipStats:
    """Clip telemetry for ratios of shape ``(B,)`` or ``(B, n_sub)``.

    For 2-D ratios a sample is unclipped when any of its entries is.
    """
    r = np.asarray(ratios, dtype=np.float64)
    a = np.asarray(advs, dtype=np.float64)
    if r.ndim == 1:
        act = active_mask(r, a, eps)
        n = int(act.sum())
        return ClipStats(r.shape[0], n, r.shape[0], n)
    act = active_mask(r, a[:, None], eps)
    return ClipStats(r.shape[0], int(act.any(axis=1).sum()), int(act.size), int(act.sum()))


def _policy_terms(
    variant: LossVariant,
    new: np.ndarray,
    old: np.ndarray,
    adv: np.ndarray,
    eps: float,
    sub_agg: str,
    mix_mode: str,
) -> tuple[float, np.ndarray, ClipStats]:
    B, n = new.shape
    if B == 0:
        raise ValueError("empty batch")
    if adv.shape != (B,):
        raise ValueError(f"advantages shape {adv.shape} != ({B},)")
    if sub_agg not in ("mean", "sum"):
        raise ValueError(f"sub_agg must be 'mean' or 'sum', got {sub_agg!r}")
    if mix_mode not in ("reduce", "broadcast"):
        raise ValueError(f"mix_mode must be 'reduce' or 'broadcast', got {mix_mode!r}")
    if not eps > 0:
        raise ValueError("clip eps must be positive")
    scale = 1.0 / n if sub_agg == "mean" else 1.0

    r1, dr1 = _exp_ratio(new.sum(axis=1) - old.sum(axis=1))
    r2, dr2 = _exp_ratio(new - old)
    A2 = adv[:, None]
    tag = variant.tag
    w = variant.w

    def compound():
        act = active_mask(r1, adv, eps)
        obj = clipped_surrogate(r1, adv, eps)
        # d obj / d new_i = A * r1 for every sub-action of an active sample
        g = np.repeat((np.where(act, adv, 0.0) * dr1)[:, None], n, axis=1)
        return obj, g, act

    def sub_action():
        act = active_mask(r2, A2, eps)
        obj = clipped_surrogate(r2, A2, eps).sum(axis=1) * scale
        g = np.where(act, A2, 0.0) * dr2 * scale
        return obj, g, act

    if tag is LossTag.COMPOUND:
        obj, g, act = compound()
        stats = ClipStats(B, int(act.sum()), B * n, int(act.sum()) * n)
    elif tag is LossTag.SUB_ACTION:
        obj, g, act = sub_action()
        stats = ClipStats(B, int(act.any(axis=1).sum()), B * n, int(act.sum()))
    elif tag is LossTag.MIX_RATIO:
        if mix_mode == "reduce":
            r_mix = w * r1 + (1.0 - w) * r2.mean(axis=1)
            act = active_mask(r_mix, adv, eps)
            obj = clipped_surrogate(r_mix, adv, eps)
            coef = np.where(act, adv, 0.0)[:, None]
            g = coef * (w * dr1[:, None] + (1.0 - w) * dr2 / n)
            stats = ClipStats(B, int(act.sum()), B * n, int(act.sum()) * n)
        else:
            r_mix = w * r1[:, None] + (1.0 - w) * r2
            act = active_mask(r_mix, A2, eps)
            obj = clipped_surrogate(r_mix, A2, eps).sum(axis=1) * scale
            coef = np.where(act, A2, 0.0) * scale
            g = coef.sum(axis=1, keepdims=True) * w * dr1[:, None] + coef * (1.0 - w) * dr2
            stats = ClipStats(B, int(act.any(axis=1).sum()), B * n, int(act.sum()))
    elif tag is LossTag.MIX_LOSS:
        obj1, g1, act1 = compound()
        obj2, g2, act2 = sub_action()
        obj = w * obj1 + (1.0 - w) * obj2
        g = w * g1 + (1.0 - w) * g2
        entry = act1[:, None] | act2
        stats = ClipStats(B, int(entry.any(axis=1).sum()), B * n, int(entry.sum()))
    else:  # pragma: no cover
        raise ValueError(tag)
    return float(np.mean(obj)), g / B, stats


def policy_loss(
    variant: LossVariant,
    new_logps,
    old_logps,
    adv,
    eps: float,
    *,
    sub_agg: str = "mean",
    mix_mode: str = "reduce",
) -> tuple[float, ClipStats]:
    """Batch-mean clipped policy objective (to be maximised) and its clip stats."""
    new, old = _check_pair(new_logps, old_logps)
    obj, _, stats = _policy_terms(
        variant, np.atleast_2d(new), np.atleast_2d(old), np.atleast_1d(np.asarray(adv, dtype=np.float64)),
        eps, sub_agg, mix_mode,
    )
    return obj, stats


def policy_loss_grad(
    variant: LossVariant,
    new_logps,
    old_logps,
    adv,
    eps: float,
    *,
    sub_agg: str = "mean",
    mix_mode: str = "reduce",
) -> tuple[float, np.ndarray, ClipStats]:
    """Like :func:`policy_loss` plus d(objective)/d(new_logps), shape ``(B, n_sub)``."""
    new, old = _check_pair(new_logps, old_logps)
    return _policy_terms(
        variant, np.atleast_2d(new), np.atleast_2d(old), np.atleast_1d(np.asarray(adv, dtype=np.float64)),
        eps, sub_agg, mix_mode,
    )


def value_loss(v_pred, v_target, v_old=None, clip: float | None = None) -> tuple[float, np.ndarray]:
    """Mean squared value error and its gradient w.r.t. ``v_pred``.

    With ``clip`` and ``v_old`` given, uses the pessimistic
    ``max((v - R)^2, (v_old + clip(v - v_old, -c, c) - R)^2)`` form.
    """
    v = np.asarray(v_pred, dtype=np.float64)
    t = np.asarray(v_target, dtype=np.float64)
    if v.shape != t.shape:
        raise ValueError(f"value shapes differ: {v.shape} vs {t.shape}")
    if v.size == 0:
        raise ValueError("empty batch")
    n = v.size
    err = v - t
    if clip is None or v_old is None:
        return float(np.mean(err * err)), 2.0 * err / n
    v_old = np.asarray(v_old, dtype=np.float64)
    delta = v - v_old
    v_clip = v_old + np.clip(delta, -clip, clip)
    err_c = v_clip - t
    use_clipped = err_c * err_c > err * err
    loss = np.where(use_clipped, err_c * err_c, err * err)
    passes = np.abs(delta) < clip
    grad = np.where(use_clipped, np.where(passes, 2.0 * err_c, 0.0), 2.0 * err) / n
    return float(np.mean(loss)), grad


def total_objective(policy_obj: float, value_loss: float, entropy: float, c1: float, c2: float) -> float:
    """``J = L_clip - c1 * L_value + c2 * S``; training minimises ``-J``."""
    return policy_obj - c1 * value_loss + c2 * entropy


def parse_eps(value) -> float:
    """Accept a positive float, or ``None`` / ``"inf"`` / ``"none"`` for no clipping."""
    if value is None:
        return math.inf
    if isinstance(value, str) and value.strip().lower() in ("inf", "none", "noclip", "no-clip"):
        return math.inf
    eps = float(value)
    if not eps > 0:
        raise ValueError(f"clip eps must be positive, got {value!r}")
    return eps
