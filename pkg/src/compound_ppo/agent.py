"""Separate policy and value MLPs over one flat parameter vector, and the
full PPO objective with its analytic gradient."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .distributions import ActionSpaceSpec, make_distribution
from .losses import LossBreakdown, LossVariant, policy_loss_grad, total_objective, value_loss
from .nn import MlpNet, ParamVector, mlp_layout

POLICY_PREFIX = "pi."
VALUE_PREFIX = "v."
LOG_STD = "pi.log_std"


@dataclass
class ObjectiveConfig:
    variant: LossVariant
    eps: float = 0.2
    c1: float = 1.0
    c2: float = 0.001
    sub_agg: str = "mean"
    mix_mode: str = "reduce"
    value_clip: float | None = None


class ActorCritic:
    def __init__(
        self,
        obs_dim: int,
        action_space: ActionSpaceSpec,
        hidden: tuple[int, ...] = (64, 64),
        params: ParamVector | None = None,
    ):
        self.obs_dim = obs_dim
        self.action_space = action_space
        self.hidden = tuple(hidden)
        pi_sizes = (obs_dim, *self.hidden, action_space.head_size)
        v_sizes = (obs_dim, *self.hidden, 1)
        layout = mlp_layout(POLICY_PREFIX, pi_sizes)
        if action_space.kind == "continuous":
            layout.append((LOG_STD, (action_space.n_sub,)))
        layout += mlp_layout(VALUE_PREFIX, v_sizes)
        if params is None:
            params = ParamVector(layout)
        elif params.layout != [(n, tuple(s)) for n, s in layout]:
            raise ValueError("parameter layout does not match this network/action space")
        self.params = params
        self.pi = MlpNet(pi_sizes, params, POLICY_PREFIX)
        self.v = MlpNet(v_sizes, params, VALUE_PREFIX)

    def init(self, rng: np.random.Generator, log_std_init: float = 0.0) -> None:
        self.pi.init(rng, output_gain=0.01)
        self.v.init(rng, output_gain=1.0)
        if LOG_STD in self.params:
            self.params.view(LOG_STD)[...] = log_std_init

    def set_values(self, values: np.ndarray) -> None:
        self.params.values[...] = values

    def log_std(self) -> np.ndarray | None:
        return self.params.view(LOG_STD) if LOG_STD in self.params else None

    def distribution(self, obs: np.ndarray):
        return make_distribution(self.action_space, self.pi.forward(obs), self.log_std())

    def value(self, obs: np.ndarray) -> np.ndarray:
        return self.v.forward(obs)[..., 0]

    def act(self, obs: np.ndarray, rng: np.random.Generator):
        """Sample actions for a batch of observations.

        Returns ``(actions, logps (B, n_sub), values (B,))``.
        """
        obs = np.atleast_2d(obs)
        dist = self.distribution(obs)
        actions = dist.sample(rng)
        return actions, dist.log_probs(actions), self.value(obs)

    def greedy(self, obs: np.ndarray) -> np.ndarray:
        return self.distribution(np.atleast_2d(obs)).mode()

    def loss_and_grad(
        self,
        obs: np.ndarray,
        actions: np.ndarray,
        old_logps: np.ndarray,
        advantages: np.ndarray,
        returns: np.ndarray,
        cfg: ObjectiveConfig,
        old_values: np.ndarray | None = None,
        *,
        policy_only: bool = False,
    ) -> tuple[LossBreakdown, ParamVector]:
        """Evaluate ``J`` on a minibatch and return ``d(-J)/d(params)``.

        With ``policy_only`` the gradient (and the reported total) covers the
        clipped policy term alone, which isolates the ratio path.
        """
        obs = np.atleast_2d(obs)
        grad = self.params.zeros_like()
        head_out, pi_cache = self.pi.forward_cached(obs)
        dist = make_distribution(self.action_space, head_out, self.log_std())
        new_logps = dist.log_probs(actions)
        pol_obj, d_logp, stats = policy_loss_grad(
            cfg.variant, new_logps, old_logps, advantages, cfg.eps, sub_agg=cfg.sub_agg, mix_mode=cfg.mix_mode
        )
        # descend -J: negate every objective gradient
        g_head, g_logstd = dist.log_probs_grad(actions, -d_logp)

        B = obs.shape[0]
        ent = dist.entropy()
        ent_mean = float(ent.sum(axis=1).mean())
        if policy_only:
            v_loss = 0.0
            total = pol_obj
        else:
            if cfg.c2 != 0.0:
                up = np.full(ent.shape, -cfg.c2 / B)
                ge_head, ge_logstd = dist.entropy_grad(up)
                g_head = g_head + ge_head
                if ge_logstd is not None:
                    g_logstd = g_logstd + ge_logstd
            v_pred, v_cache = self.v.forward_cached(obs)
            v_loss, d_v = value_loss(v_pred[:, 0], returns, old_values, cfg.value_clip)
            self.v.backward(obs, (cfg.c1 * d_v)[:, None], out=grad, cache=v_cache)
            total = total_objective(pol_obj, v_loss, ent_mean, cfg.c1, cfg.c2)
        self.pi.backward(obs, g_head, out=grad, cache=pi_cache)
        if g_logstd is not None:
            grad.view(LOG_STD)[...] += g_logstd
        return LossBreakdown(pol_obj, v_loss, ent_mean, total, stats), grad

    def objective_value(self, values: np.ndarray, *args, **kwargs) -> float:
        """``-J`` at other parameter values (for finite differences)."""
        saved = self.params.values.copy()
        try:
            self.set_values(values)
            breakdown, _ = self.loss_and_grad(*args, **kwargs)
        finally:
            self.set_values(saved)
        return -breakdown.total_objective


def build_agent(obs_dim: int, action_space: ActionSpaceSpec, rng: np.random.Generator, log_std_init: float = 0.0) -> ActorCritic:
    agent = ActorCritic(obs_dim, action_space)
    agent.init(rng, log_std_init)
    return agent


def param_checksum(values: np.ndarray) -> str:
    return hashlib.blake2b(np.ascontiguousarray(values).tobytes(), digest_size=16).hexdigest()

