"""Serial PPO training loop, evaluation, metrics CSV and run directories."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .agent import ActorCritic, ObjectiveConfig, build_agent
from .config import TrainConfig
from .envs import make_env
from .losses import ClipStats, LossBreakdown
from .nn import AdamState, NonFiniteError, ParamVector, adam_step, load_checkpoint, save_checkpoint
from .distributions import ActionSpaceSpec
from .rollout import RewardScaler, RolloutBatch, RunningNorm, compute_gae, minibatches, normalize_advantages

log = logging.getLogger(__name__)

METRICS_COLUMNS = (
    "step", "update", "loss_variant", "eps", "policy_obj", "value_loss", "entropy", "total_obj",
    "mean_ep_return", "unclipped_samples", "total_samples", "unclipped_sub_entries",
    "total_sub_entries", "staleness_mean",
)
RETURN_WINDOW = 100


class TrainingDiverged(RuntimeError):
    pass


def gradient_clip(grad: np.ndarray, max_norm: float) -> np.ndarray:
    """Rescale ``grad`` so its global L2 norm is at most ``max_norm``."""
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    norm = float(np.sqrt(np.dot(grad, grad)))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def _fmt(x) -> str:
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


class MetricsWriter:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh = self.path.open("w", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(METRICS_COLUMNS)

    def write(self, row: dict) -> None:
        self._w.writerow([_fmt(row[c]) for c in METRICS_COLUMNS])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_metrics(path: str | Path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
            raise ValueError(f"unexpected metrics header {reader.fieldnames}")
        return list(reader)


def objective_config(cfg: TrainConfig) -> ObjectiveConfig:
    return ObjectiveConfig(
        variant=cfg.variant,
        eps=cfg.eps,
        c1=cfg.c1,
        c2=cfg.c2,
        sub_agg=cfg.sub_agg,
        mix_mode=cfg.mix_mode,
        value_clip=cfg.value_clip_range if cfg.value_clip else None,
    )


def eps_label(cfg: TrainConfig) -> str:
    return "inf" if cfg.clip_eps is None else repr(float(cfg.clip_eps))


@dataclass
class UpdateResult:
    breakdown: LossBreakdown
    clip_stats: ClipStats


def ppo_update(
    agent: ActorCritic,
    adam: AdamState,
    batch: RolloutBatch,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> UpdateResult:
    """Run ``cfg.epochs`` passes of minibatch ascent on ``J`` over ``batch``.

    Returns the minibatch-averaged loss terms and the summed clip counts.
    Raises :class:`NonFiniteError` without touching params on a bad step.
    """
    ocfg = objective_config(cfg)
    adv = normalize_advantages(batch.advantages) if cfg.adv_norm else batch.advantages
    batch = RolloutBatch(batch.obs, batch.actions, batch.old_logps, batch.rewards, batch.values, batch.dones, adv, batch.returns)
    size = min(cfg.minibatch, len(batch))
    sums = np.zeros(4)
    n_mb = 0
    stats = ClipStats()
    for _ in range(cfg.epochs):
        for idx in minibatches(len(batch), size, rng):
            mb = batch.take(idx)
            bd, grad = agent.loss_and_grad(mb.obs, mb.actions, mb.old_logps, mb.advantages, mb.returns, ocfg, mb.values)
            terms = np.array([bd.policy_objective, bd.value_loss, bd.entropy, bd.total_objective])
            if not np.all(np.isfinite(terms)):
                raise NonFiniteError(f"non-finite loss terms {terms.tolist()}")
            g = grad.values
            if cfg.grad_clip:
                g = gradient_clip(g, cfg.max_grad_norm)
            new = adam_step(adam, agent.params, g)
            agent.set_values(new.values)
            sums += terms
            n_mb += 1
            stats = stats + bd.clip_stats
    p, v, e, t = (sums / n_mb).tolist()
    return UpdateResult(LossBreakdown(p, v, e, t, stats), stats)


def checkpoint_meta(cfg: TrainConfig, agent: ActorCritic, obs_norm: RunningNorm | None, step: int, update: int) -> dict:
    return {
        "env": cfg.env,
        "env_params": cfg.env_params,
        "obs_dim": agent.obs_dim,
        "action_space": agent.action_space.to_dict(),
        "hidden": list(agent.hidden),
        "obs_norm": obs_norm.state_dict() if obs_norm is not None else None,
        "config": cfg.to_dict(),
        "step": step,
        "update": update,
    }


def load_agent(path: str | Path) -> tuple[ActorCritic, dict]:
    params, meta = load_checkpoint(path)
    agent = ActorCritic(meta["obs_dim"], ActionSpaceSpec.from_dict(meta["action_space"]), tuple(meta["hidden"]), params)
    return agent, meta


@dataclass
class TrainResult:
    run_dir: Path | None
    metrics: list[dict]
    params: ParamVector
    final_checkpoint: Path | None
    extra: dict = field(default_factory=dict)


class VecRollout:
    """A set of env instances stepped together, with optional obs/reward normalisation."""

    def __init__(self, cfg: TrainConfig, n_envs: int, rng: np.random.Generator):
        self.cfg = cfg
        self.envs = [make_env(cfg.env, **cfg.env_params) for _ in range(n_envs)]
        self.spec = self.envs[0].spec
        self.rng = rng
        self.obs = np.stack([e.reset(rng) for e in self.envs])
        self.ep_return = np.zeros(n_envs)
        self.obs_norm = RunningNorm(self.spec.obs_dim) if cfg.obs_norm else None
        self.reward_scaler = RewardScaler(n_envs, cfg.gamma) if cfg.reward_scale else None
        if self.obs_norm is not None:
            self.obs_norm.update(self.obs)
        self.steps = 0

    def _norm(self, obs: np.ndarray) -> np.ndarray:
        return self.obs_norm.apply(obs) if self.obs_norm is not None else obs

    def collect(self, agent: ActorCritic, T: int, act_rng: np.random.Generator):
        """Roll every env ``T`` steps. Returns (batch-by-env arrays, bootstrap values, finished returns)."""
        n = len(self.envs)
        n_sub = self.spec.action_space.n_sub
        obs_buf = np.zeros((T, n, self.spec.obs_dim))
        act_dtype = np.int64 if self.spec.action_space.kind == "discrete" else np.float64
        act_buf = np.zeros((T, n, n_sub), dtype=act_dtype)
        logp_buf = np.zeros((T, n, n_sub))
        rew_buf = np.zeros((T, n))
        val_buf = np.zeros((T, n))
        done_buf = np.zeros((T, n))
        finished = []
        for t in range(T):
            obs_n = self._norm(self.obs)
            actions, logps, values = agent.act(obs_n, act_rng)
            obs_buf[t] = obs_n
            act_buf[t] = actions
            logp_buf[t] = logps
            val_buf[t] = values
            rewards = np.zeros(n)
            dones = np.zeros(n, dtype=bool)
            next_obs = np.empty_like(self.obs)
            for i, env in enumerate(self.envs):
                res = env.step(actions[i])
                rewards[i] = res.reward
                dones[i] = res.done
                self.ep_return[i] += res.reward
                if res.done:
                    finished.append(float(self.ep_return[i]))
                    self.ep_return[i] = 0.0
                    next_obs[i] = env.reset(self.rng)
                else:
                    next_obs[i] = res.obs
            if self.reward_scaler is not None:
                rewards = self.reward_scaler(rewards, dones)
            rew_buf[t] = rewards
            done_buf[t] = dones
            self.obs = next_obs
            if self.obs_norm is not None:
                self.obs_norm.update(self.obs)
            self.steps += n
        bootstrap = agent.value(self._norm(self.obs))
        return (obs_buf, act_buf, logp_buf, rew_buf, val_buf, done_buf), bootstrap, finished


def assemble_batch(arrays, bootstrap: np.ndarray, gamma: float, lam: float) -> RolloutBatch:
    """GAE per env column, then flatten time-major ``(T, n, ...)`` arrays."""
    obs, act, logp, rew, val, done = arrays
    T, n = rew.shape
    adv = np.zeros((T, n))
    ret = np.zeros((T, n))
    for i in range(n):
        adv[:, i], ret[:, i] = compute_gae(rew[:, i], val[:, i], done[:, i], float(bootstrap[i]), gamma, lam)
    flat = lambda a: a.reshape((T * n,) + a.shape[2:])  # noqa: E731
    return RolloutBatch(flat(obs), flat(act), flat(logp), flat(rew), flat(val), flat(done), flat(adv), flat(ret))


def _seeds(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def prepare_run_dir(cfg: TrainConfig, out_dir: str | Path | None) -> Path | None:
    if out_dir is None:
        return None
    run_dir = Path(out_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.snapshot")
    return run_dir


def serial_train(
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    *,
    keep_trajectory: bool = False,
    stop_when: Callable[[dict], bool] | None = None,
) -> TrainResult:
    """PPO with the configured policy loss, single execution context.

    One update = collect ``rollout_len`` steps from each of ``num_envs``
    envs, compute GAE, then ``epochs`` passes of minibatch Adam steps on
    ``-J``. Runs ``ceil(total_steps / (rollout_len * num_envs))`` updates,
    or fewer if ``stop_when(metrics_row)`` returns true.
    """
    if cfg.mode != "serial":
        raise ValueError("serial_train needs mode='serial'")
    init_rng, env_rng, act_rng, mb_rng = _seeds(cfg.seed, 4)
    vec = VecRollout(cfg, cfg.num_envs, env_rng)
    agent = build_agent(vec.spec.obs_dim, vec.spec.action_space, init_rng, cfg.log_std_init)
    adam = AdamState(agent.params.size, lr=cfg.lr, eps=cfg.adam_eps)
    n_updates = math.ceil(cfg.total_steps / cfg.steps_per_update)
    if cfg.max_updates is not None:
        n_updates = min(n_updates, cfg.max_updates)

    run_dir = prepare_run_dir(cfg, out_dir)
    writer = MetricsWriter(run_dir / "metrics.csv") if run_dir else None
    recent = deque(maxlen=RETURN_WINDOW)
    rows: list[dict] = []
    trajectory = [agent.params.values.copy()] if keep_trajectory else []
    last_good = agent.params.copy()
    final_path = None
    update = 0
    try:
        for update in range(1, n_updates + 1):
            arrays, bootstrap, finished = vec.collect(agent, cfg.rollout_len, act_rng)
            recent.extend(finished)
            batch = assemble_batch(arrays, bootstrap, cfg.gamma, cfg.lam)
            try:
                res = ppo_update(agent, adam, batch, cfg, mb_rng)
            except NonFiniteError as exc:
                diag = f"update {update}, step {vec.steps}: {exc}"
                if run_dir:
                    save_checkpoint(run_dir / "checkpoints" / "last_good", last_good,
                                    checkpoint_meta(cfg, agent, vec.obs_norm, vec.steps, update - 1))
                raise TrainingDiverged(diag) from exc
            last_good = agent.params.copy()
            if keep_trajectory:
                trajectory.append(agent.params.values.copy())
            bd = res.breakdown
            row = {
                "step": vec.steps,
                "update": update,
                "loss_variant": cfg.loss,
                "eps": eps_label(cfg),
                "policy_obj": bd.policy_objective,
                "value_loss": bd.value_loss,
                "entropy": bd.entropy,
                "total_obj": bd.total_objective,
                "mean_ep_return": float(np.mean(recent)) if recent else float("nan"),
                "unclipped_samples": res.clip_stats.unclipped_samples,
                "total_samples": res.clip_stats.total_samples,
                "unclipped_sub_entries": res.clip_stats.unclipped_sub_entries,
                "total_sub_entries": res.clip_stats.total_sub_entries,
                "staleness_mean": 0.0,
            }
            rows.append(row)
            if writer:
                writer.write(row)
            if run_dir and cfg.checkpoint_every and update % cfg.checkpoint_every == 0:
                save_checkpoint(run_dir / "checkpoints" / f"step_{vec.steps}", agent.params,
                                checkpoint_meta(cfg, agent, vec.obs_norm, vec.steps, update))
            log.debug("update %d step %d return %.3f", update, vec.steps, row["mean_ep_return"])
            if stop_when is not None and stop_when(row):
                break
        if run_dir:
            final_path = save_checkpoint(run_dir / "final", agent.params,
                                         checkpoint_meta(cfg, agent, vec.obs_norm, vec.steps, update))
    finally:
        if writer:
            writer.close()
    extra = {"trajectory": trajectory} if keep_trajectory else {}
    return TrainResult(run_dir, rows, agent.params.copy(), final_path, extra)


@dataclass
class EvalResult:
    mean: float
    returns: list[float]
    ci_low: float
    ci_high: float


def evaluate_agent(agent: ActorCritic, env_name: str, env_params: dict, episodes: int, seed: int,
                   obs_norm: RunningNorm | None = None, greedy: bool = True) -> EvalResult:
    """Mean episode return with a 95% normal-approximation confidence interval."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    env = make_env(env_name, **env_params)
    if env.spec.obs_dim != agent.obs_dim or env.spec.action_space != agent.action_space:
        raise ValueError(f"checkpoint was trained for a different env spec than {env_name!r}")
    rng = np.random.default_rng(seed)
    returns = []
    for _ in range(episodes):
        obs = env.reset(rng)
        total = 0.0
        done = False
        while not done:
            o = obs_norm.apply(obs) if obs_norm is not None else obs
            if greedy:
                action = agent.greedy(o)[0]
            else:
                action = agent.distribution(np.atleast_2d(o)).sample(rng)[0]
            res = env.step(action)
            total += res.reward
            obs, done = res.obs, res.done
        returns.append(total)
    arr = np.asarray(returns)
    mean = float(arr.mean())
    half = 1.96 * float(arr.std(ddof=1)) / math.sqrt(len(arr)) if len(arr) > 1 else 0.0
    return EvalResult(mean, returns, mean - half, mean + half)


def evaluate(checkpoint: str | Path, env: str | None = None, episodes: int = 100, seed: int = 0,
             env_params: dict | None = None, greedy: bool = True) -> EvalResult:
    agent, meta = load_agent(checkpoint)
    env_name = env or meta["env"]
    params = meta.get("env_params", {}) if env_params is None else env_params
    norm = RunningNorm.from_state(meta["obs_norm"]) if meta.get("obs_norm") else None
    return evaluate_agent(agent, env_name, params, episodes, seed, norm, greedy)


def random_baseline(env_name: str, env_params: dict | None = None, episodes: int = 1000, seed: int = 0) -> float:
    """Mean return of a uniform-random policy (uniform classes / U[-1, 1] torques)."""
    env = make_env(env_name, **(env_params or {}))
    space = env.spec.action_space
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(episodes):
        env.reset(rng)
        done = False
        while not done:
            if space.kind == "discrete":
                action = [int(rng.integers(d)) for d in space.sub_action_dims]
            else:
                action = rng.uniform(-1.0, 1.0, space.n_sub)
            res = env.step(action)
            total += res.reward
            done = res.done
    return total / episodes


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
