"""Small ReLU multilayer perceptrons with exact backprop, Adam and JSON persistence.

A network maps a raw input ``x`` to an output ``y`` through

    x_hat = (x - in_shift) / in_scale
    h     = relu(W_i h + b_i)            for the hidden layers
    a     = W_L h + b_L                  (linear final layer)
    s     = tanh(a) where squash else a
    y     = out_offset + out_scale * s

The normalization constants live inside ``MlpParams`` so a saved network is
self-contained. Weight matrices are stored ``(out, in)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Sequence

import numpy as np

from .errors import DimensionMismatch, SchemaVersionMismatch, ShapeMismatch

SCHEMA_VERSION = 1


@dataclass
class MlpParams:
    layer_dims: tuple
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    in_shift: np.ndarray
    in_scale: np.ndarray
    out_offset: np.ndarray
    out_scale: np.ndarray
    squash: np.ndarray  # bool mask over outputs: tanh on the final activation

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        check_shapes(self)

    @property
    def n_in(self) -> int:
        return self.layer_dims[0]

    @property
    def n_out(self) -> int:
        return self.layer_dims[-1]

    def copy(self) -> "MlpParams":
        return replace(
            self,
            weights=[W.copy() for W in self.weights],
            biases=[b.copy() for b in self.biases],
            in_shift=self.in_shift.copy(),
            in_scale=self.in_scale.copy(),
            out_offset=self.out_offset.copy(),
            out_scale=self.out_scale.copy(),
            squash=self.squash.copy(),
        )

    def normalize_output(self, y) -> np.ndarray:
        """Map raw outputs into the network's pre-offset range (tanh space for squashed entries)."""
        return (np.asarray(y, dtype=float) - self.out_offset) / self.out_scale


@dataclass
class MlpGrads:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def scaled(self, c: float) -> "MlpGrads":
        return MlpGrads([c * W for W in self.weights], [c * b for b in self.biases])

    def add_(self, other: "MlpGrads") -> "MlpGrads":
        for a, b in zip(self.weights, other.weights):
            a += b
        for a, b in zip(self.biases, other.biases):
            a += b
        return self

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "MlpGrads":
        return cls([np.zeros_like(W) for W in params.weights], [np.zeros_like(b) for b in params.biases])


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: MlpParams, lr: float = 1e-3, **kw) -> "AdamState":
        arrays = params.weights + params.biases
        return cls(lr=lr, m=[np.zeros_like(a) for a in arrays], v=[np.zeros_like(a) for a in arrays], **kw)


def check_shapes(p: MlpParams) -> None:
    dims = p.layer_dims
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ShapeMismatch(f"invalid layer_dims {dims}")
    if len(p.weights) != len(dims) - 1 or len(p.biases) != len(dims) - 1:
        raise ShapeMismatch("number of layers does not match layer_dims")
    for i, (W, b) in enumerate(zip(p.weights, p.biases)):
        if W.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
            raise ShapeMismatch(f"layer {i}: weight {W.shape} / bias {b.shape} vs dims {dims[i]}->{dims[i + 1]}")
    for name, n in (("in_shift", dims[0]), ("in_scale", dims[0]), ("out_offset", dims[-1]),
                    ("out_scale", dims[-1]), ("squash", dims[-1])):
        if np.shape(getattr(p, name)) != (n,):
            raise ShapeMismatch(f"{name} must have length {n}")


def init_mlp(layer_dims: Sequence[int], seed: int = 0, in_shift=None, in_scale=None, out_offset=None,
             out_scale=None, squash=None, final_gain: float = 1.0) -> MlpParams:
    """He-uniform initialization with zero biases; ``final_gain`` scales the last layer."""
    rng = np.random.default_rng(seed)
    dims = [int(d) for d in layer_dims]
    weights, biases = [], []
    for i in range(len(dims) - 1):
        bound = np.sqrt(6.0 / dims[i])
        W = rng.uniform(-bound, bound, size=(dims[i + 1], dims[i]))
        if i == len(dims) - 2:
            W *= final_gain
        weights.append(W)
        biases.append(np.zeros(dims[i + 1]))
    n_in, n_out = dims[0], dims[-1]

    def vec(v, default, n):
        return np.full(n, default, dtype=float) if v is None else np.broadcast_to(np.asarray(v, float), (n,)).copy()

    return MlpParams(
        tuple(dims), weights, biases,
        vec(in_shift, 0.0, n_in), vec(in_scale, 1.0, n_in),
        vec(out_offset, 0.0, n_out), vec(out_scale, 1.0, n_out),
        np.zeros(n_out, dtype=bool) if squash is None else np.broadcast_to(np.asarray(squash, bool), (n_out,)).copy(),
    )


def _as_batch(params: MlpParams, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    if X.ndim != 2 or X.shape[1] != params.n_in:
        raise DimensionMismatch(f"expected input of length {params.n_in}, got shape {x.shape}")
    return X, single


def _forward_cache(params: MlpParams, X):
    h = (X - params.in_shift) / params.in_scale
    acts = [h]
    n_layers = len(params.weights)
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ W.T + b
        h = np.maximum(a, 0.0) if i < n_layers - 1 else a
        acts.append(h)
    s = np.where(params.squash, np.tanh(h), h)
    return acts, s


def forward_normalized(params: MlpParams, x) -> np.ndarray:
    """Output before the final affine map (``s`` in the module docstring)."""
    X, single = _as_batch(params, x)
    _, s = _forward_cache(params, X)
    return s[0] if single else s


def forward(params: MlpParams, x) -> np.ndarray:
    """Network output for one input vector or a ``(batch, n_in)`` array."""
    X, single = _as_batch(params, x)
    _, s = _forward_cache(params, X)
    y = params.out_offset + params.out_scale * s
    return y[0] if single else y


def backward(params: MlpParams, x, upstream, wrt: str = "output") -> MlpGrads:
    """Gradient of ``sum(upstream * y)`` over the batch with respect to every weight and bias.

    ``wrt="normalized"`` treats ``upstream`` as the gradient with respect to the
    pre-offset output ``s`` instead of ``y``.
    """
    X, _ = _as_batch(params, x)
    G = np.atleast_2d(np.asarray(upstream, dtype=float))
    if G.shape != (X.shape[0], params.n_out):
        raise DimensionMismatch(f"upstream gradient shape {G.shape} does not match output {(X.shape[0], params.n_out)}")
    acts, s = _forward_cache(params, X)
    g = G * params.out_scale if wrt == "output" else G
    g = np.where(params.squash, g * (1.0 - s * s), g)
    n_layers = len(params.weights)
    dW = [None] * n_layers
    db = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        dW[i] = g.T @ acts[i]
        db[i] = g.sum(axis=0)
        if i > 0:
            g = (g @ params.weights[i]) * (acts[i] > 0.0)
    return MlpGrads(dW, db)


def adam_step(state: AdamState, params: MlpParams, grads: MlpGrads, ascent: bool = False):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    sign = 1.0 if ascent else -1.0
    t = state.step + 1
    arrays = params.weights + params.biases
    grad_arrays = grads.weights + grads.biases
    new_m, new_v, updated = [], [], []
    for p, g, m, v in zip(arrays, grad_arrays, state.m, state.v):
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        updated.append(p + sign * state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    n = len(params.weights)
    new_params = replace(params, weights=updated[:n], biases=updated[n:])
    return new_params, replace(state, step=t, m=new_m, v=new_v)


def params_to_dict(params: MlpParams) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "layer_dims": list(params.layer_dims),
        "weights": [W.ravel().tolist() for W in params.weights],
        "biases": [b.tolist() for b in params.biases],
        "in_shift": params.in_shift.tolist(),
        "in_scale": params.in_scale.tolist(),
        "out_offset": params.out_offset.tolist(),
        "out_scale": params.out_scale.tolist(),
        "squash": [bool(s) for s in params.squash],
    }


def params_from_dict(doc: dict) -> MlpParams:
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionMismatch(f"weight file has schema version {version}, expected {SCHEMA_VERSION}")
    try:
        dims = [int(d) for d in doc["layer_dims"]]
        weights = []
        for i, flat in enumerate(doc["weights"]):
            flat = np.asarray(flat, dtype=float)
            if flat.size != dims[i + 1] * dims[i]:
                raise ShapeMismatch(f"layer {i} has {flat.size} weights, dims say {dims[i + 1]}x{dims[i]}")
            weights.append(flat.reshape(dims[i + 1], dims[i]))
        return MlpParams(
            tuple(dims), weights, [np.asarray(b, dtype=float) for b in doc["biases"]],
            np.asarray(doc["in_shift"], float), np.asarray(doc["in_scale"], float),
            np.asarray(doc["out_offset"], float), np.asarray(doc["out_scale"], float),
            np.asarray(doc["squash"], bool),
        )
    except (KeyError, IndexError, TypeError) as exc:
        raise ShapeMismatch(f"malformed weight document: {exc}") from exc


def save_weights(params: MlpParams, path) -> None:
    Path(path).write_text(json.dumps(params_to_dict(params)))


def load_weights(path) -> MlpParams:
    return params_from_dict(json.loads(Path(path).read_text()))
