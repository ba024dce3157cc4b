"""Asynchronous sampler/trainer PPO.

Samplers and trainers are threads that share nothing except a
:class:`ParamStore` (latest parameters + version) and one
:class:`ExperienceQueue` per trainer. Samplers copy the latest parameters,
roll out, and push encoded experience frames; trainers pop frames, compute
GAE from the values recorded in the frame, update, and publish. With more
than one trainer, an update token serialises parameter writes.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import ActorCritic, build_agent, param_checksum
from .config import TrainConfig
from .envs import make_env
from .nn import AdamState, NonFiniteError, ParamVector, save_checkpoint
from .rollout import RolloutBatch, decode_frame, encode_frame
from .training import (
    RETURN_WINDOW, MetricsWriter, assemble_batch, TrainingDiverged, TrainResult, VecRollout, _seeds,
    checkpoint_meta, eps_label, ppo_update, prepare_run_dir, write_json,
)

log = logging.getLogger(__name__)


class TornReadError(RuntimeError):
    pass


class ParamStore:
    """Single-writer, multi-reader snapshot of (version, params).

    Every snapshot carries a checksum taken at publish time; :meth:`read`
    recomputes it on the copy it hands out, so a torn copy cannot go
    unnoticed.
    """

    def __init__(self, params: ParamVector):
        self._lock = threading.Lock()
        self._values = params.values.copy()
        self._layout = params
        self._checksum = param_checksum(self._values)
        self._version = 0
        self.history: list[int] = [0]
        self.reads = 0
        self.validated_reads = 0

    @property
    def version(self) -> int:
        with self._lock:
            return self._version

    def publish(self, values: np.ndarray) -> int:
        snapshot = np.array(values, dtype=np.float64, copy=True)
        checksum = param_checksum(snapshot)
        with self._lock:
            self._values = snapshot
            self._checksum = checksum
            self._version += 1
            self.history.append(self._version)
            return self._version

    def read(self) -> tuple[int, ParamVector]:
        with self._lock:
            version, values, checksum = self._version, self._values, self._checksum
            self.reads += 1
        copy = values.copy()
        if param_checksum(copy) != checksum:
            raise TornReadError(f"checksum mismatch reading version {version}")
        with self._lock:
            self.validated_reads += 1
        return version, self._layout.with_values(copy)


class ExperienceQueue:
    """Bounded FIFO; a put on a full queue evicts the oldest frame."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: deque = deque()
        self._cond = threading.Condition()
        self.produced = 0
        self.consumed = 0
        self.dropped = 0
        self.waits = 0

    def put(self, item) -> None:
        with self._cond:
            if len(self._items) >= self.capacity:
                self._items.popleft()
                self.dropped += 1
            self._items.append(item)
            self.produced += 1
            self._cond.notify()

    def get(self, timeout: float | None = None):
        """Pop the oldest frame, or return ``None`` after ``timeout`` seconds."""
        with self._cond:
            if not self._items:
                self.waits += 1
                self._cond.wait_for(lambda: bool(self._items), timeout)
                if not self._items:
                    return None
            self.consumed += 1
            return self._items.popleft()

    def __len__(self) -> int:
        with self._cond:
            return len(self._items)

    def accounting(self) -> dict:
        with self._cond:
            return {"produced": self.produced, "consumed": self.consumed, "dropped": self.dropped,
                    "in_queue": len(self._items), "waits": self.waits}


@dataclass
class _Shared:
    cfg: TrainConfig
    store: ParamStore
    queues: list[ExperienceQueue]
    stop: threading.Event = field(default_factory=threading.Event)
    token: threading.Lock = field(default_factory=threading.Lock)
    new_version: threading.Condition = field(default_factory=threading.Condition)
    errors: list[BaseException] = field(default_factory=list)
    rollouts: dict = field(default_factory=dict)


def _sampler(idx: int, shared: _Shared, n_envs: int, env_rng, act_rng) -> None:
    cfg = shared.cfg
    try:
        vec = VecRollout(cfg, n_envs, env_rng)
        shared.rollouts[idx] = vec
        version, params = shared.store.read()
        agent = ActorCritic(vec.spec.obs_dim, vec.spec.action_space, params=params)
        queue = shared.queues[idx % len(shared.queues)]
        while not shared.stop.is_set():
            version, params = shared.store.read()
            agent.set_values(params.values)
            arrays, bootstrap, finished = vec.collect(agent, cfg.rollout_len, act_rng)
            obs, act, logp, rew, val, done = arrays
            frame = encode_frame(version, {
                "obs": obs, "actions": act, "old_logps": logp, "rewards": rew, "values": val,
                "dones": done, "bootstrap": bootstrap, "episode_returns": np.asarray(finished, dtype=np.float64),
            })
            if shared.stop.is_set():
                break
            queue.put(frame)
            if cfg.sync_handshake:
                with shared.new_version:
                    shared.new_version.wait_for(
                        lambda: shared.store.version > version or shared.stop.is_set(), timeout=None
                    )
    except BaseException as exc:  # surfaced by the coordinator
        shared.errors.append(exc)
        shared.stop.set()


def frame_to_batch(arrays: dict, gamma: float, lam: float) -> RolloutBatch:
    """GAE per env column from the frame's own value estimates, then flatten."""
    cols = tuple(arrays[k] for k in ("obs", "actions", "old_logps", "rewards", "values", "dones"))
    return assemble_batch(cols, arrays["bootstrap"], gamma, lam)


@dataclass
class _TrainerState:
    agent: ActorCritic
    adam: AdamState
    rng: np.random.Generator
    n_updates: int
    updates: int = 0
    steps: int = 0
    rows: list = field(default_factory=list)
    staleness: Counter = field(default_factory=Counter)
    recent: deque = field(default_factory=lambda: deque(maxlen=RETURN_WINDOW))
    version_log: list = field(default_factory=list)


def _trainer(idx: int, shared: _Shared, state: _TrainerState, writer: MetricsWriter | None) -> None:
    cfg = shared.cfg
    queue = shared.queues[idx]
    try:
        while not shared.stop.is_set():
            frame = queue.get(timeout=0.05)
            if frame is None:
                continue
            frame_version, arrays = decode_frame(frame)
            batch = frame_to_batch(arrays, cfg.gamma, cfg.lam)
            with shared.token:
                if state.updates >= state.n_updates:
                    break
                staleness = shared.store.version - frame_version
                try:
                    res = ppo_update(state.agent, state.adam, batch, cfg, state.rng)
                except NonFiniteError as exc:
                    raise TrainingDiverged(f"async update {state.updates + 1}: {exc}") from exc
                new_version = shared.store.publish(state.agent.params.values)
                with shared.new_version:
                    shared.new_version.notify_all()
                state.updates += 1
                state.steps += len(batch)
                state.staleness[staleness] += 1
                state.version_log.append(new_version)
                state.recent.extend(arrays["episode_returns"].tolist())
                bd = res.breakdown
                row = {
                    "step": state.steps,
                    "update": state.updates,
                    "loss_variant": cfg.loss,
                    "eps": eps_label(cfg),
                    "policy_obj": bd.policy_objective,
                    "value_loss": bd.value_loss,
                    "entropy": bd.entropy,
                    "total_obj": bd.total_objective,
                    "mean_ep_return": float(np.mean(state.recent)) if state.recent else float("nan"),
                    "unclipped_samples": res.clip_stats.unclipped_samples,
                    "total_samples": res.clip_stats.total_samples,
                    "unclipped_sub_entries": res.clip_stats.unclipped_sub_entries,
                    "total_sub_entries": res.clip_stats.total_sub_entries,
                    "staleness_mean": float(staleness),
                }
                state.rows.append(row)
                if writer:
                    writer.write(row)
                if state.updates >= state.n_updates:
                    shared.stop.set()
    except BaseException as exc:
        shared.errors.append(exc)
        shared.stop.set()
    finally:
        with shared.new_version:
            shared.new_version.notify_all()


def async_train(cfg: TrainConfig, out_dir: str | Path | None = None, *, timeout: float | None = None) -> TrainResult:
    """Run samplers and trainers until ``n_updates`` parameter versions are published.

    ``n_updates`` is ``max_updates`` when set, else enough frames to cover
    ``total_steps``. The returned ``extra`` dict carries frame accounting,
    the staleness histogram, the published version sequence and read
    validation counts.
    """
    if cfg.mode != "async":
        raise ValueError("async_train needs mode='async'")
    init_rng, mb_rng, *sampler_rngs = _seeds(cfg.seed, 2 + 2 * cfg.samplers)
    envs_per_sampler = max(1, cfg.num_envs // cfg.samplers)
    spec = make_env(cfg.env, **cfg.env_params).spec
    agent = build_agent(spec.obs_dim, spec.action_space, init_rng, cfg.log_std_init)
    adam = AdamState(agent.params.size, lr=cfg.lr, eps=cfg.adam_eps)
    frame_steps = cfg.rollout_len * envs_per_sampler
    n_updates = cfg.max_updates if cfg.max_updates is not None else math.ceil(cfg.total_steps / frame_steps)

    store = ParamStore(agent.params)
    queues = [ExperienceQueue(cfg.queue_capacity) for _ in range(cfg.trainers)]
    shared = _Shared(cfg, store, queues)
    state = _TrainerState(agent, adam, mb_rng, n_updates)
    run_dir = prepare_run_dir(cfg, out_dir)
    writer = MetricsWriter(run_dir / "metrics.csv") if run_dir else None

    samplers = [
        threading.Thread(target=_sampler, args=(i, shared, envs_per_sampler, sampler_rngs[2 * i], sampler_rngs[2 * i + 1]),
                         name=f"sampler-{i}", daemon=True)
        for i in range(cfg.samplers)
    ]
    trainers = [
        threading.Thread(target=_trainer, args=(i, shared, state, writer), name=f"trainer-{i}", daemon=True)
        for i in range(cfg.trainers)
    ]
    started = time.monotonic()
    try:
        for t in samplers + trainers:
            t.start()
        deadline = None if timeout is None else started + timeout
        while not shared.stop.is_set():
            if deadline is not None and time.monotonic() > deadline:
                shared.errors.append(TimeoutError(f"async run exceeded {timeout}s"))
                shared.stop.set()
            shared.stop.wait(0.05)
        with shared.new_version:
            shared.new_version.notify_all()
        for t in trainers + samplers:
            t.join()
    finally:
        if writer:
            writer.close()
    if shared.errors:
        raise shared.errors[0]

    accounting = [q.accounting() for q in queues]
    totals = {k: sum(a[k] for a in accounting) for k in accounting[0]}
    extra = {
        "frames": totals,
        "frames_conserved": totals["produced"] == totals["consumed"] + totals["dropped"] + totals["in_queue"],
        "staleness_histogram": dict(sorted(state.staleness.items())),
        "versions": list(store.history),
        "store_reads": store.reads,
        "store_validated_reads": store.validated_reads,
        "updates": state.updates,
        "wall_seconds": time.monotonic() - started,
    }
    final_path = None
    if run_dir:
        # sampler 0's observation statistics travel with the checkpoint
        norm = shared.rollouts[0].obs_norm if 0 in shared.rollouts else None
        final_path = save_checkpoint(run_dir / "final", agent.params,
                                     checkpoint_meta(cfg, agent, norm, state.steps, state.updates))
        write_json(run_dir / "async_summary.json", extra)
    return TrainResult(run_dir, state.rows, agent.params.copy(), final_path, extra)
