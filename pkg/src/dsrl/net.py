"""Dense linear algebra and small multilayer perceptrons.

Everything the actor/critic and the gradient plumbing need: forward and
backward passes written out by hand, Adam, JSON checkpoints, and the LU
solve used by KKT differentiation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _backend
from .errors import NumericError, ShapeError

HIDDEN_ACTIVATIONS = ("tanh", "relu")
OUTPUT_ACTIVATIONS = ("identity", "scaled_tanh")


def solve_linear(A, b) -> np.ndarray:
    """Solve ``A x = b`` with partial-pivoting LU.

    ``b`` may hold several right-hand sides as columns. Raises
    :class:`~dsrl.errors.SingularSystemError` when a pivot drops below 1e-12.
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"solve_linear needs a square matrix, got {A.shape}")
    if b.shape[0] != A.shape[0]:
        raise ShapeError(f"right-hand side has {b.shape[0]} rows, matrix has {A.shape[0]}")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise NumericError("non-finite entry in linear system")
    return _backend.lu_solve(A, b)


@dataclass
class MLPParams:
    layer_sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "tanh"
    output_activation: str = "identity"
    output_low: np.ndarray | None = None
    output_high: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.layer_sizes = [int(s) for s in self.layer_sizes]
        if len(self.layer_sizes) < 2:
            raise ShapeError("an MLP needs at least input and output sizes")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        n_layers = len(self.layer_sizes) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ShapeError("weights/biases do not match layer_sizes")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_sizes[i + 1], self.layer_sizes[i])
            if W.shape != expect or b.shape != (expect[0],):
                raise ShapeError(f"layer {i}: weight {W.shape} / bias {b.shape}, expected {expect}")
        if self.output_activation == "scaled_tanh":
            if self.output_low is None or self.output_high is None:
                raise ValueError("scaled_tanh output needs bounds")
            self.output_low = np.broadcast_to(np.asarray(self.output_low, dtype=np.float64), (self.layer_sizes[-1],)).copy()
            self.output_high = np.broadcast_to(np.asarray(self.output_high, dtype=np.float64), (self.layer_sizes[-1],)).copy()
            if not (np.all(np.isfinite(self.output_low)) and np.all(np.isfinite(self.output_high))):
                raise ValueError("scaled_tanh bounds must be finite")
            if np.any(self.output_low >= self.output_high):
                raise ValueError("scaled_tanh bounds need lower < upper")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> MLPParams:
        return MLPParams(
            list(self.layer_sizes),
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.hidden_activation,
            self.output_activation,
            None if self.output_low is None else self.output_low.copy(),
            None if self.output_high is None else self.output_high.copy(),
        )

    def parameters(self) -> list[np.ndarray]:
        """Flat list [W0, b0, W1, b1, ...] of the live arrays."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def to_dict(self) -> dict:
        d = {
            "layer_sizes": self.layer_sizes,
            "hidden_activation": self.hidden_activation,
            "output_activation": self.output_activation,
            "weights": [W.ravel().tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }
        if self.output_activation == "scaled_tanh":
            d["output_bounds"] = [self.output_low.tolist(), self.output_high.tolist()]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> MLPParams:
        sizes = [int(s) for s in d["layer_sizes"]]
        weights = [
            np.asarray(w, dtype=np.float64).reshape(sizes[i + 1], sizes[i]) for i, w in enumerate(d["weights"])
        ]
        biases = [np.asarray(b, dtype=np.float64) for b in d["biases"]]
        low = high = None
        if d.get("output_activation") == "scaled_tanh":
            low, high = d["output_bounds"]
        return cls(sizes, weights, biases, d.get("hidden_activation", "tanh"), d.get("output_activation", "identity"), low, high)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> MLPParams:
        return cls.from_dict(json.loads(text))


def init_mlp(
    layer_sizes: Sequence[int],
    rng: np.random.Generator,
    hidden_activation: str = "tanh",
    output_activation: str = "identity",
    bounds: tuple | None = None,
    final_scale: float = 3e-3,
) -> MLPParams:
    """Fan-in uniform init for hidden layers, small uniform init for the last."""
    sizes = [int(s) for s in layer_sizes]
    weights, biases = [], []
    for i in range(len(sizes) - 1):
        lim = final_scale if i == len(sizes) - 2 else 1.0 / np.sqrt(sizes[i])
        weights.append(rng.uniform(-lim, lim, size=(sizes[i + 1], sizes[i])))
        biases.append(rng.uniform(-lim, lim, size=sizes[i + 1]))
    low, high = (None, None) if bounds is None else bounds
    return MLPParams(sizes, weights, biases, hidden_activation, output_activation, low, high)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    output: np.ndarray
    batched: bool


@dataclass
class GradBundle:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    input_grad: np.ndarray

    def parameters(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out


def _hidden(kind: str, a: np.ndarray) -> np.ndarray:
    return np.tanh(a) if kind == "tanh" else np.maximum(a, 0.0)


def _hidden_deriv(kind: str, a: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        t = np.tanh(a)
        return 1.0 - t * t
    return (a > 0.0).astype(np.float64)


def mlp_forward(params: MLPParams, x) -> tuple[np.ndarray, ForwardCache]:
    """Evaluate the network on one input vector or a batch (rows)."""
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    X = x if batched else x[None, :]
    if X.ndim != 2 or X.shape[1] != params.layer_sizes[0]:
        raise ShapeError(f"input has shape {x.shape}, network expects {params.layer_sizes[0]} features")
    inputs, pre = [], []
    act = X
    last = params.n_layers - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(act)
        a = act @ W.T + b
        pre.append(a)
        if i < last:
            act = _hidden(params.hidden_activation, a)
        elif params.output_activation == "scaled_tanh":
            act = params.output_low + (params.output_high - params.output_low) * 0.5 * (np.tanh(a) + 1.0)
        else:
            act = a
    out = act if batched else act[0]
    return out, ForwardCache(inputs, pre, act, batched)


def mlp_backward(params: MLPParams, cache: ForwardCache, upstream) -> GradBundle:
    """Gradients of ``sum(upstream * output)`` w.r.t. every parameter and the input.

    For a batch, parameter gradients are summed over rows and ``input_grad``
    keeps one row per sample.
    """
    g = np.asarray(upstream, dtype=np.float64)
    G = g if cache.batched else g[None, :]
    if len(cache.pre) != params.n_layers or G.shape != cache.output.shape:
        raise ShapeError(f"upstream {g.shape} / cache do not match this network")
    for i, (W, a) in enumerate(zip(params.weights, cache.pre)):
        if a.shape[1] != W.shape[0] or cache.inputs[i].shape[1] != W.shape[1]:
            raise ShapeError(f"stale cache at layer {i}")
    n = params.n_layers
    dW: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    db: list[np.ndarray] = [None] * n  # type: ignore[list-item]
    a = cache.pre[-1]
    if params.output_activation == "scaled_tanh":
        t = np.tanh(a)
        delta = G * (0.5 * (params.output_high - params.output_low) * (1.0 - t * t))
    else:
        delta = G
    for i in range(n - 1, -1, -1):
        dW[i] = delta.T @ cache.inputs[i]
        db[i] = delta.sum(axis=0)
        back = delta @ params.weights[i]
        if i > 0:
            delta = back * _hidden_deriv(params.hidden_activation, cache.pre[i - 1])
    input_grad = back if cache.batched else back[0]
    return GradBundle(dW, db, input_grad)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: MLPParams) -> AdamState:
        ps = params.parameters()
        return cls([np.zeros_like(p) for p in ps], [np.zeros_like(p) for p in ps])


def adam_step(params: MLPParams, grads: GradBundle, state: AdamState, lr: float) -> MLPParams:
    """One Adam descent step; ``params`` and ``state`` are updated in place."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    ps, gs = params.parameters(), grads.parameters()
    if len(ps) != len(gs) or len(ps) != len(state.m):
        raise ShapeError("gradient bundle does not mirror the parameters")
    for j, (p, g) in enumerate(zip(ps, gs)):
        if p.shape != g.shape:
            raise ShapeError(f"layer {j // 2}: gradient shape {g.shape} vs parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in layer {j // 2}", layer=j // 2)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(ps, gs, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def blend_into(target: MLPParams, source: MLPParams, tau: float) -> None:
    """target <- tau * source + (1 - tau) * target, elementwise and in place."""
    for pt, ps in zip(target.parameters(), source.parameters()):
        pt *= 1.0 - tau
        pt += tau * ps


@dataclass
class Checkpoint:
    """Bundle of named networks plus free-form metadata, stored as one JSON file."""

    nets: dict[str, MLPParams]
    meta: dict = field(default_factory=dict)

    def dump(self, path) -> None:
        payload = {"meta": self.meta, "nets": {k: v.to_dict() for k, v in self.nets.items()}}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path) -> Checkpoint:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
        return cls({k: MLPParams.from_dict(v) for k, v in payload["nets"].items()}, payload.get("meta", {}))
