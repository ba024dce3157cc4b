"""Two small compound-action environments.

GridHarvest (discrete, 2 sub-actions)
    A ``size x size`` grid with a fixed set of resource cells and one depot,
    laid out from ``layout_seed``. Action = (move, mode) with
    move in {up, down, left, right, stay} and mode in {harvest, build, idle}.
    The move is applied first (walls block), then the mode acts on the new
    cell. Per step reward is -0.01, plus +1 for harvesting on a resource
    cell (harvest counter += 1), plus +5 for building on the depot with at
    least 3 harvests stored (counter -= 3). Resources never deplete. The
    agent starts uniformly on a non-depot cell. Episodes end after
    ``max_steps`` (64) steps. Step reward lies in [-0.01, 4.99].

    Observation: three flattened one-hot planes (agent, resources, depot)
    followed by ``min(counter, 9) / 3``.

ChainReach (continuous, k sub-actions)
    ``k`` unit point masses on a line, neighbours joined by springs of rest
    length ``spacing`` and stiffness ``stiffness``. Action ``a`` is clipped to
    [-1, 1] per dimension and applied as force ``force_scale * a_i`` to mass
    ``i``. One step of length ``dt``::

        f_i   = force_scale * a_i + stiffness * (s_{i+1} - s_i)
        s_i   = x_i - x_{i-1} - spacing       (terms past either end are 0)
        v_i' = damping * v_i + dt * f_i
        x_i' = clip(x_i + dt * v_i', wall_lo, wall_hi);  v_i' = 0 where clipped

    The head is the last mass. Reward is
    ``(x_head' - x_head) - 0.05 * |a|^2 + 0.05``. The chain starts at rest,
    uncompressed, shifted by a uniform offset in ``[0, 0.1)``. Episodes end
    after ``max_steps`` (200) steps. Observation: positions relative to the
    head, then velocities.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .distributions import ActionSpaceSpec

MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0))  # up, down, left, right, stay (row, col)
MOVE_NAMES = ("up", "down", "left", "right", "stay")
MODE_NAMES = ("harvest", "build", "idle")
HARVEST, BUILD, IDLE = 0, 1, 2
STAY = 4


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    action_space: ActionSpaceSpec
    max_steps: int
    reward_description: str


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    done: bool
    info: dict[str, Any] = field(default_factory=dict)


class EnvDoneError(RuntimeError):
    pass


class GridHarvest:
    STEP_PENALTY = 0.01
    HARVEST_REWARD = 1.0
    BUILD_REWARD = 5.0
    BUILD_COST = 3

    def __init__(self, size: int = 7, n_resources: int = 4, max_steps: int = 64, layout_seed: int = 0):
        if size < 2 or n_resources < 1 or n_resources > size * size - 1:
            raise ValueError("invalid grid parameters")
        self.size = size
        self.n_resources = n_resources
        self.max_steps = max_steps
        self.layout_seed = layout_seed
        cells = np.random.default_rng(layout_seed).permutation(size * size)
        self.depot = divmod(int(cells[0]), size)
        self.resources = frozenset(divmod(int(c), size) for c in cells[1 : 1 + n_resources])
        n = size * size
        self._static = np.zeros(3 * n + 1)
        for r, c in self.resources:
            self._static[n + r * size + c] = 1.0
        self._static[2 * n + self.depot[0] * size + self.depot[1]] = 1.0
        self.spec = EnvSpec(
            "gridharvest",
            3 * n + 1,
            ActionSpaceSpec.discrete(len(MOVES), len(MODE_NAMES)),
            max_steps,
            "+1 harvest on resource, +5 build on depot after >=3 harvests, -0.01 per step",
        )
        self.pos = (0, 0)
        self.counter = 0
        self.t = 0
        self.done = True

    def params(self) -> dict:
        return {"size": self.size, "n_resources": self.n_resources, "max_steps": self.max_steps, "layout_seed": self.layout_seed}

    def start_cells(self) -> list[tuple[int, int]]:
        return [(r, c) for r in range(self.size) for c in range(self.size) if (r, c) != self.depot]

    def _obs(self) -> np.ndarray:
        obs = self._static.copy()
        obs[self.pos[0] * self.size + self.pos[1]] = 1.0
        obs[-1] = min(self.counter, 9) / 3.0
        return obs

    def reset(self, seed: int | np.random.Generator | None = None) -> np.ndarray:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        starts = self.start_cells()
        self.pos = starts[int(rng.integers(len(starts)))]
        self.counter = 0
        self.t = 0
        self.done = False
        return self._obs()

    def set_state(self, pos: tuple[int, int], counter: int = 0, t: int = 0) -> np.ndarray:
        self.pos = (int(pos[0]), int(pos[1]))
        self.counter = int(counter)
        self.t = int(t)
        self.done = False
        return self._obs()

    @staticmethod
    def transition(size, resources, depot, pos, counter, move, mode):
        """Pure dynamics: returns ``(new_pos, new_counter, reward)``."""
        dr, dc = MOVES[move]
        r = min(max(pos[0] + dr, 0), size - 1)
        c = min(max(pos[1] + dc, 0), size - 1)
        new_pos = (r, c)
        reward = -GridHarvest.STEP_PENALTY
        if mode == HARVEST and new_pos in resources:
            reward += GridHarvest.HARVEST_REWARD
            counter += 1
        elif mode == BUILD and new_pos == depot and counter >= GridHarvest.BUILD_COST:
            reward += GridHarvest.BUILD_REWARD
            counter -= GridHarvest.BUILD_COST
        return new_pos, counter, reward

    def step(self, action) -> StepResult:
        if self.done:
            raise EnvDoneError("step() called on a finished episode; call reset()")
        move, mode = (int(a) for a in np.asarray(action).reshape(-1))
        if not (0 <= move < len(MOVES) and 0 <= mode < len(MODE_NAMES)):
            raise ValueError(f"action {action!r} out of range")
        self.pos, self.counter, reward = self.transition(
            self.size, self.resources, self.depot, self.pos, self.counter, move, mode
        )
        self.t += 1
        self.done = self.t >= self.max_steps
        return StepResult(self._obs(), reward, self.done, {"counter": self.counter, "t": self.t})


class ChainReach:
    ENERGY_COST = 0.05
    SURVIVAL_BONUS = 0.05

    def __init__(
        self,
        k: int = 6,
        max_steps: int = 200,
        dt: float = 0.1,
        force_scale: float = 5.0,
        stiffness: float = 10.0,
        damping: float = 0.95,
        spacing: float = 0.5,
        wall_lo: float = -1.0,
        wall_hi: float = 100.0,
    ):
        if k < 1:
            raise ValueError("need at least one mass")
        self.k = k
        self.max_steps = max_steps
        self.dt = dt
        self.force_scale = force_scale
        self.stiffness = stiffness
        self.damping = damping
        self.spacing = spacing
        self.wall_lo = wall_lo
        self.wall_hi = wall_hi
        self.spec = EnvSpec(
            "chainreach",
            2 * k,
            ActionSpaceSpec.continuous(k),
            max_steps,
            "head forward displacement - 0.05*|a|^2 + 0.05 survival",
        )
        self.x = np.zeros(k)
        self.v = np.zeros(k)
        self.t = 0
        self.done = True

    def params(self) -> dict:
        return {
            "k": self.k, "max_steps": self.max_steps, "dt": self.dt, "force_scale": self.force_scale,
            "stiffness": self.stiffness, "damping": self.damping, "spacing": self.spacing,
            "wall_lo": self.wall_lo, "wall_hi": self.wall_hi,
        }

    def _obs(self) -> np.ndarray:
        return np.concatenate([self.x - self.x[-1], self.v])

    def reset(self, seed: int | np.random.Generator | None = None) -> np.ndarray:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        offset = float(rng.random()) * 0.1
        self.x = offset + self.spacing * np.arange(self.k, dtype=np.float64)
        self.v = np.zeros(self.k)
        self.t = 0
        self.done = False
        return self._obs()

    def set_state(self, x, v, t: int = 0) -> np.ndarray:
        self.x = np.array(x, dtype=np.float64)
        self.v = np.array(v, dtype=np.float64)
        self.t = t
        self.done = False
        return self._obs()

    def spring_forces(self, x: np.ndarray) -> np.ndarray:
        stretch = np.diff(x) - self.spacing
        f = np.zeros_like(x)
        f[:-1] += self.stiffness * stretch
        f[1:] -= self.stiffness * stretch
        return f

    def step(self, action) -> StepResult:
        if self.done:
            raise EnvDoneError("step() called on a finished episode; call reset()")
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape != (self.k,):
            raise ValueError(f"action has {a.size} dims, env expects {self.k}")
        a = np.clip(a, -1.0, 1.0)
        f = self.force_scale * a + self.spring_forces(self.x)
        v = self.damping * self.v + self.dt * f
        x = self.x + self.dt * v
        clipped = (x < self.wall_lo) | (x > self.wall_hi)
        x = np.clip(x, self.wall_lo, self.wall_hi)
        v = np.where(clipped, 0.0, v)
        reward = (x[-1] - self.x[-1]) - self.ENERGY_COST * float(a @ a) + self.SURVIVAL_BONUS
        self.x, self.v = x, v
        self.t += 1
        self.done = self.t >= self.max_steps
        return StepResult(self._obs(), float(reward), self.done, {"head_x": float(x[-1]), "t": self.t})


ENV_REGISTRY = {"gridharvest": GridHarvest, "chainreach": ChainReach}


def make_env(name: str, **params):
    try:
        cls = ENV_REGISTRY[name]
    except KeyError:
        raise ValueError(f"unknown env {name!r}; choose one of {', '.join(ENV_REGISTRY)}") from None
    return cls(**params)
