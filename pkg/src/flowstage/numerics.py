"""Numerical substrate: a small tanh MLP with exact backpropagation, an
Adam optimizer, a counter-based random source, and checkpoint I/O.

Everything here is a pure function of its inputs; randomness only enters
through an explicit :class:`RandomSource`.  Matrices are plain C-order
float64 ``numpy`` arrays (rows x cols, row-major).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import kernels
from .errors import DomainError, ShapeError

CHECKPOINT_MAGIC = b"FLOWSTAGE-CKPT-v1\n"


def _as_f64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


# ---------------------------------------------------------------------------
# MLP parameters
# ---------------------------------------------------------------------------


@dataclass
class MlpParams:
    """Weights and biases of a fully connected net.

    Hidden layers use tanh, the final layer is identity; ``weights[l]`` has
    shape ``(layer_sizes[l + 1], layer_sizes[l])``.
    """

    layer_sizes: tuple
    weights: list
    biases: list
    activation: str = "tanh"

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if len(self.layer_sizes) < 2:
            raise ShapeError("need at least an input and an output layer")
        if self.activation != "tanh":
            raise DomainError(f"unsupported activation {self.activation!r}")
        if len(self.weights) != len(self.layer_sizes) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("wrong number of weight/bias arrays for layer_sizes")
        self.weights = [_as_f64(w) for w in self.weights]
        self.biases = [_as_f64(b) for b in self.biases]
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.layer_sizes[l + 1], self.layer_sizes[l])
            if w.shape != want:
                raise ShapeError(f"layer {l}: weight shape {w.shape}, expected {want}")
            if b.shape != (want[0],):
                raise ShapeError(f"layer {l}: bias shape {b.shape}, expected ({want[0]},)")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise DomainError(f"layer {l}: non-finite parameter")

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]

    def arrays(self) -> list:
        """Flat parameter list: w0, b0, w1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(
            self.layer_sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
        )


@dataclass
class MlpGrads:
    """Parameter gradients, shaped exactly like the MlpParams they refer to."""

    weights: list
    biases: list

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def init_mlp(layer_sizes: Sequence[int], rng: "RandomSource") -> MlpParams:
    """Random init: W ~ N(0, 1/fan_in), b = 0."""
    sizes = tuple(int(s) for s in layer_sizes)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = rng.gaussian(fan_out * fan_in).reshape(fan_out, fan_in) / math.sqrt(fan_in)
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MlpParams(sizes, weights, biases)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def mlp_forward(params: MlpParams, x: np.ndarray):
    """Evaluate the net on one input vector.

    Returns ``(output, cache)`` where the cache holds per-layer activations
    for :func:`mlp_backward`.
    """
    x = _as_f64(x)
    if x.shape != (params.input_size,):
        raise ShapeError(f"input shape {x.shape}, expected ({params.input_size},)")
    acts = kernels.forward(params.weights, params.biases, x)
    out = acts[-1]
    if not np.isfinite(out).all():
        raise DomainError("forward pass produced a non-finite output")
    return out, acts


def mlp_backward(params: MlpParams, cache: list, upstream_grad: np.ndarray):
    """Exact gradients of ``upstream_grad . output`` w.r.t. parameters and input.

    ``cache`` must come from :func:`mlp_forward` on the same params.
    """
    if len(cache) != len(params.layer_sizes):
        raise ShapeError("cache does not match network depth")
    for a, size in zip(cache, params.layer_sizes):
        if np.shape(a) != (size,):
            raise ShapeError("cache activations do not match layer sizes")
    upstream_grad = _as_f64(upstream_grad)
    if upstream_grad.shape != (params.output_size,):
        raise ShapeError(
            f"upstream grad shape {upstream_grad.shape}, expected ({params.output_size},)"
        )
    grad_w, grad_b, grad_x = kernels.backward(params.weights, cache, upstream_grad)
    return MlpGrads(grad_w, grad_b), grad_x


def mlp_forward_batch(params: MlpParams, inputs: np.ndarray):
    """Batched forward pass (numpy on all backends); inputs shaped (B, in)."""
    inputs = _as_f64(inputs)
    if inputs.ndim != 2 or inputs.shape[1] != params.input_size:
        raise ShapeError(f"batch shape {inputs.shape}, expected (B, {params.input_size})")
    acts = [inputs]
    last = len(params.weights) - 1
    for layer, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = acts[-1] @ w.T + b
        acts.append(np.tanh(z) if layer < last else z)
    if not np.isfinite(acts[-1]).all():
        raise DomainError("forward pass produced a non-finite output")
    return acts[-1], acts


def mlp_backward_batch(params: MlpParams, cache: list, upstream: np.ndarray):
    """Batched backward pass; gradients are summed over the batch."""
    upstream = _as_f64(upstream)
    grad_w = [None] * len(params.weights)
    grad_b = [None] * len(params.weights)
    delta = upstream
    for layer in range(len(params.weights) - 1, -1, -1):
        grad_w[layer] = delta.T @ cache[layer]
        grad_b[layer] = delta.sum(axis=0)
        back = delta @ params.weights[layer]
        delta = back * (1.0 - cache[layer] ** 2) if layer > 0 else back
    return MlpGrads(grad_w, grad_b), delta


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-array moment estimates for the standard Adam update."""

    first_moment: list
    second_moment: list
    step_count: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_init(arrays: Sequence[np.ndarray], learning_rate: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    return AdamState(
        first_moment=[np.zeros_like(_as_f64(a)) for a in arrays],
        second_moment=[np.zeros_like(_as_f64(a)) for a in arrays],
        step_count=0,
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
    )


def adam_step_arrays(arrays: Sequence[np.ndarray], grads: Sequence[np.ndarray],
                     state: AdamState):
    """One bias-corrected Adam update over a flat list of arrays.

    Pure: returns new arrays and a new state.  Non-finite gradients are
    rejected so they cannot poison the moments.
    """
    if len(arrays) != len(grads) or len(arrays) != len(state.first_moment):
        raise ShapeError("parameter/gradient/state lengths differ")
    for a, g, m in zip(arrays, grads, state.first_moment):
        if np.shape(a) != np.shape(g) or np.shape(a) != np.shape(m):
            raise ShapeError("parameter/gradient/moment shapes differ")
        if not np.isfinite(g).all():
            raise DomainError("non-finite gradient; update rejected")
    t = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    lr, eps = state.learning_rate, state.epsilon
    new_params, new_m, new_v = [], [], []
    for a, g, m, v in zip(arrays, grads, state.first_moment, state.second_moment):
        g = _as_f64(g)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params.append(_as_f64(a) - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, replace(state, first_moment=new_m, second_moment=new_v, step_count=t)


def adam_step(params: MlpParams, grads: MlpGrads, state: AdamState):
    """Adam update specialized to MlpParams; see :func:`adam_step_arrays`."""
    new_arrays, new_state = adam_step_arrays(params.arrays(), grads.arrays(), state)
    weights = new_arrays[0::2]
    biases = new_arrays[1::2]
    return MlpParams(params.layer_sizes, weights, biases, params.activation), new_state


# ---------------------------------------------------------------------------
# Random source
# ---------------------------------------------------------------------------


class RandomSource:
    """Counter-based random stream (Philox) with spawnable substreams.

    The same ``(seed, spawn_key)`` always reproduces the same draw sequence,
    and distinct spawn keys give statistically independent streams, so
    parallel rollouts can each own one.
    """

    def __init__(self, seed: int, spawn_key: tuple = ()):
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in spawn_key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def __repr__(self):
        return f"RandomSource(seed={self.seed}, spawn_key={self.spawn_key})"

    def stream(self, *ids: int) -> "RandomSource":
        """Child stream; disjoint from the parent and from other ids."""
        return RandomSource(self.seed, self.spawn_key + tuple(int(i) for i in ids))

    def gaussian(self, n: int) -> np.ndarray:
        if n < 1:
            raise DomainError(f"need n >= 1 draws, got {n}")
        return self._gen.standard_normal(int(n))

    def uniform(self, n: int | None = None):
        return self._gen.random() if n is None else self._gen.random(int(n))

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(int(n))


def gaussian(rng: RandomSource, n: int) -> np.ndarray:
    """n standard normal draws from the given source."""
    return rng.gaussian(n)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def write_checkpoint(path, meta: dict, arrays: dict) -> None:
    """Versioned checkpoint: magic line, JSON header, raw float64 payload.

    The header and payload are fully determined by (meta, arrays), so a
    load/save round-trip is byte-identical.
    """
    names = sorted(arrays)
    manifest = []
    payload = b""
    for name in names:
        a = _as_f64(arrays[name])
        manifest.append({"name": name, "shape": list(a.shape)})
        payload += a.tobytes(order="C")
    header = json.dumps({"meta": meta, "arrays": manifest}, sort_keys=True)
    with open(path, "wb") as fp:
        fp.write(CHECKPOINT_MAGIC)
        fp.write(header.encode("utf-8") + b"\n")
        fp.write(payload)


def read_checkpoint(path):
    """Inverse of :func:`write_checkpoint`; returns ``(meta, arrays)``."""
    with open(path, "rb") as fp:
        magic = fp.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise DomainError(f"{path}: not a flowstage checkpoint")
        header = json.loads(fp.readline().decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fp.read(count * 8)
            if len(buf) != count * 8:
                raise DomainError(f"{path}: truncated checkpoint payload")
            arrays[entry["name"]] = np.frombuffer(buf, dtype=np.float64).reshape(shape).copy()
    return header["meta"], arrays


def save_mlp(path, params: MlpParams, extra_meta: dict | None = None) -> None:
    meta = {"layer_sizes": list(params.layer_sizes), "activation": params.activation}
    if extra_meta:
        meta.update(extra_meta)
    arrays = {}
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"w{l}"] = w
        arrays[f"b{l}"] = b
    write_checkpoint(path, meta, arrays)


def load_mlp(path):
    """Returns ``(MlpParams, meta)``."""
    meta, arrays = read_checkpoint(path)
    sizes = tuple(meta["layer_sizes"])
    weights = [arrays[f"w{l}"] for l in range(len(sizes) - 1)]
    biases = [arrays[f"b{l}"] for l in range(len(sizes) - 1)]
    return MlpParams(sizes, weights, biases, meta.get("activation", "tanh")), meta
