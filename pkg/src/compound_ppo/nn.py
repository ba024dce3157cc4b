"""Dense float64 math for the actor-critic: flat parameter vectors, a tanh MLP
with hand-written backprop, Adam, finite-difference gradient checking and
text checkpoints.

Matrices are plain ``numpy.ndarray`` objects of dtype float64, row-major.
A layer computes ``y = x @ W + b`` with ``W`` stored as ``(fan_in, fan_out)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_FORMAT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or inf shows up where only finite values are allowed."""


class ParamVector:
    """A flat float64 vector partitioned into named, shaped segments."""

    def __init__(self, layout: Iterable[tuple[str, Sequence[int]]], values: np.ndarray | None = None):
        self.layout: list[tuple[str, tuple[int, ...]]] = [(str(n), tuple(int(d) for d in s)) for n, s in layout]
        self._slices: dict[str, tuple[int, int, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in self.layout:
            if name in self._slices:
                raise ValueError(f"duplicate segment name {name!r}")
            size = math.prod(shape)
            self._slices[name] = (offset, offset + size, shape)
            offset += size
        self.size = offset
        if values is None:
            values = np.zeros(offset)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (offset,):
            raise ValueError(f"values have shape {values.shape}, layout needs ({offset},)")
        self.values = values

    def __len__(self) -> int:
        return self.size

    def __contains__(self, name: str) -> bool:
        return name in self._slices

    def names(self) -> list[str]:
        return [n for n, _ in self.layout]

    def view(self, name: str) -> np.ndarray:
        """Writable view of one segment, reshaped."""
        lo, hi, shape = self._slices[name]
        return self.values[lo:hi].reshape(shape)

    def segment_range(self, name: str) -> tuple[int, int]:
        lo, hi, _ = self._slices[name]
        return lo, hi

    def copy(self) -> ParamVector:
        return self.with_values(self.values.copy())

    def zeros_like(self) -> ParamVector:
        return self.with_values(np.zeros(self.size))

    def with_values(self, values: np.ndarray) -> ParamVector:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.size,):
            raise ValueError(f"values have shape {values.shape}, layout needs ({self.size},)")
        clone = object.__new__(ParamVector)
        clone.layout, clone._slices, clone.size, clone.values = self.layout, self._slices, self.size, values
        return clone

    def same_layout(self, other: ParamVector) -> bool:
        return self.layout == other.layout

    def __repr__(self) -> str:
        return f"ParamVector(size={self.size}, segments={self.names()})"


def orthogonal(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float) -> np.ndarray:
    """Orthogonal init via QR of a Gaussian matrix, scaled by ``gain``."""
    a = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    return gain * q[:fan_in, :fan_out]


def mlp_layout(prefix: str, sizes: Sequence[int]) -> list[tuple[str, tuple[int, ...]]]:
    layout = []
    for i in range(len(sizes) - 1):
        layout.append((f"{prefix}w{i}", (sizes[i], sizes[i + 1])))
        layout.append((f"{prefix}b{i}", (sizes[i + 1],)))
    return layout


class MlpNet:
    """Fully connected net, tanh on hidden layers, identity on the output.

    The net does not own its weights; it reads them from segments
    ``{prefix}w{i}`` / ``{prefix}b{i}`` of a shared :class:`ParamVector`, so a
    policy net and a value net can live in one flat vector.
    """

    def __init__(self, sizes: Sequence[int], params: ParamVector, prefix: str = ""):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        self.prefix = prefix
        self.params = params
        for name, shape in mlp_layout(prefix, self.sizes):
            if name not in params or params.view(name).shape != shape:
                raise ValueError(f"parameter vector lacks segment {name!r} of shape {shape}")

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def input_size(self) -> int:
        return self.sizes[0]

    @property
    def output_size(self) -> int:
        return self.sizes[-1]

    def init(self, rng: np.random.Generator, hidden_gain: float = math.sqrt(2.0), output_gain: float = 1.0) -> None:
        for i in range(self.n_layers):
            gain = output_gain if i == self.n_layers - 1 else hidden_gain
            self.params.view(f"{self.prefix}w{i}")[...] = orthogonal(rng, self.sizes[i], self.sizes[i + 1], gain)
            self.params.view(f"{self.prefix}b{i}")[...] = 0.0

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_size:
            raise ValueError(f"input has {x.shape[-1]} features, net expects {self.input_size}")
        return x

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Forward pass returning the output and the list of layer inputs."""
        h = self._check_input(x)
        acts = []
        for i in range(self.n_layers):
            acts.append(h)
            h = h @ self.params.view(f"{self.prefix}w{i}") + self.params.view(f"{self.prefix}b{i}")
            if i < self.n_layers - 1:
                h = np.tanh(h)
        return h, acts

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_cached(x)[0]

    def backward(
        self,
        x: np.ndarray,
        grad_out: np.ndarray,
        out: ParamVector | None = None,
        cache: list[np.ndarray] | None = None,
    ) -> ParamVector:
        """Accumulate d(loss)/d(params) into ``out`` given d(loss)/d(output).

        Works for a single input vector or a batch (rows). When ``cache`` is
        not supplied the forward pass is recomputed.
        """
        x = self._check_input(x)
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if grad_out.shape[-1] != self.output_size or grad_out.shape[:-1] != x.shape[:-1]:
            raise ValueError(f"upstream gradient shape {grad_out.shape} does not match output for input {x.shape}")
        if cache is None:
            _, cache = self.forward_cached(x)
        if out is None:
            out = self.params.zeros_like()
        g = grad_out.reshape(-1, self.output_size)
        for i in reversed(range(self.n_layers)):
            a = cache[i].reshape(-1, self.sizes[i])
            out.view(f"{self.prefix}w{i}")[...] += a.T @ g
            out.view(f"{self.prefix}b{i}")[...] += g.sum(axis=0)
            if i > 0:
                g = (g @ self.params.view(f"{self.prefix}w{i}").T) * (1.0 - a * a)
        return out


@dataclass
class AdamState:
    size: int
    lr: float = 2.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]
    v: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]
    step: int = 0

    def __post_init__(self) -> None:
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)

    def copy(self) -> AdamState:
        return AdamState(self.size, self.lr, self.beta1, self.beta2, self.eps, self.m.copy(), self.v.copy(), self.step)


def adam_step(state: AdamState, params: ParamVector, grad: ParamVector | np.ndarray) -> ParamVector:
    """One Adam update that descends ``grad``; returns new params, mutates ``state``.

    A gradient with NaN/inf entries is rejected with :class:`NonFiniteError`
    before any state is touched.
    """
    g = grad.values if isinstance(grad, ParamVector) else np.asarray(grad, dtype=np.float64)
    if g.shape != (state.size,) or params.size != state.size:
        raise ValueError(f"length mismatch: state {state.size}, params {params.size}, grad {g.shape}")
    bad = ~np.isfinite(g)
    if bad.any():
        idx = np.flatnonzero(bad)
        raise NonFiniteError(f"non-finite gradient at {idx.size} coordinates, first indices {idx[:5].tolist()}")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (g * g)
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    denom = np.sqrt(state.v / bc2)
    denom += state.eps
    new_values = params.values - (state.lr / bc1) * state.m / denom
    if not np.all(np.isfinite(new_values)):
        raise NonFiniteError("Adam produced non-finite parameters")
    return params.with_values(new_values)


def grad_check(
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params: ParamVector | np.ndarray,
    *,
    step: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` maps a flat value array to ``(loss, analytic_gradient)``. The
    error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    x0 = params.values if isinstance(params, ParamVector) else np.asarray(params, dtype=np.float64)
    x0 = x0.copy()
    loss0, analytic = loss_fn(x0)
    if not np.isfinite(loss0):
        raise NonFiniteError(f"loss is not finite at the check point: {loss0}")
    analytic = np.asarray(analytic, dtype=np.float64)
    idx = range(x0.size) if indices is None else indices
    worst = 0.0
    for i in idx:
        xp = x0.copy()
        xp[i] += step
        xm = x0.copy()
        xm[i] -= step
        lp = loss_fn(xp)[0]
        lm = loss_fn(xm)[0]
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise NonFiniteError(f"loss is not finite near coordinate {i}")
        numeric = (lp - lm) / (2.0 * step)
        a = analytic[i]
        err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
        worst = max(worst, err)
    return worst


def save_checkpoint(path: str | Path, params: ParamVector, meta: dict | None = None) -> Path:
    """Write params as JSON text. Python's float repr round-trips exactly."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "layout": [[name, list(shape)] for name, shape in params.layout],
        "values": [float(v) for v in params.values],
        "meta": meta or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1), encoding="utf-8")
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> tuple[ParamVector, dict]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    layout = [(name, tuple(shape)) for name, shape in doc["layout"]]
    params = ParamVector(layout, np.array(doc["values"], dtype=np.float64))
    return params, doc.get("meta", {})
