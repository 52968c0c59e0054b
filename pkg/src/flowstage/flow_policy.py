"""Conditional flow-matching policy over short frame sequences.

A single MLP predicts a velocity field v(x, t, class); integrating it
backward from t = 1 (pure noise) to t = 0 (data) generates samples.  The
stochastic sampler adds a score-corrected drift and Brownian noise so
that every transition has a tractable Gaussian density, which is what
the policy-gradient trainer differentiates.

Conventions, fixed here and relied on everywhere else:

* time runs 1 -> 0 during sampling, with uniform negative dt;
* the interpolation path is x_t = (1 - t) * data + t * noise, so the
  regression target for pretraining is (noise - data);
* the marginal score implied by that path is -(x + (1 - t) v) / t;
* the stochastic sampler uses noise scale sigma_t = eta * sqrt(t), which
  vanishes at the data end and makes the score-corrected drift exactly
  bounded: sigma_t^2/2 * score = -eta^2 (x + (1 - t) v) / 2.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError, RolloutError, ShapeError
from .numerics import (
    MlpParams,
    RandomSource,
    adam_init,
    adam_step_arrays,
    init_mlp,
    mlp_backward,
    mlp_backward_batch,
    mlp_forward,
    mlp_forward_batch,
    read_checkpoint,
    write_checkpoint,
)

DEFAULT_T_MIN = 0.04


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PolicyDims:
    """Shape of the generation problem: sequences of `frames` points of
    dimension `frame_dim`, conditioned on one of `num_classes` classes."""

    frames: int = 8
    frame_dim: int = 2
    num_classes: int = 8
    embed_dim: int = 8

    @property
    def state_size(self) -> int:
        return self.frames * self.frame_dim

    @property
    def net_input_size(self) -> int:
        return self.state_size + 1 + self.embed_dim


@dataclass
class ToySample:
    """One generated or dataset sequence: (frames, frame_dim) plus its class."""

    frames: np.ndarray
    condition: int

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 2:
            raise ShapeError(f"frames must be (T >= 2, D), got {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise DomainError("non-finite frame")
        self.condition = int(self.condition)


@dataclass
class FlowPolicy:
    """Velocity net plus one learned embedding row per condition class."""

    net: MlpParams
    cond_emb: np.ndarray
    dims: PolicyDims

    def __post_init__(self):
        self.cond_emb = np.ascontiguousarray(self.cond_emb, dtype=np.float64)
        want = (self.dims.num_classes, self.dims.embed_dim)
        if self.cond_emb.shape != want:
            raise ShapeError(f"cond_emb shape {self.cond_emb.shape}, expected {want}")
        if self.net.input_size != self.dims.net_input_size:
            raise ShapeError(
                f"net input {self.net.input_size} != state + time + embedding "
                f"({self.dims.net_input_size})"
            )
        if self.net.output_size != self.dims.state_size:
            raise ShapeError(
                f"net output {self.net.output_size} != state size {self.dims.state_size}"
            )

    def param_arrays(self) -> list:
        """Trainable arrays: net weights/biases then the embedding table."""
        return self.net.arrays() + [self.cond_emb]

    def with_param_arrays(self, arrays: list) -> "FlowPolicy":
        net = MlpParams(self.net.layer_sizes, arrays[0:-1:2], arrays[1:-1:2],
                        self.net.activation)
        return FlowPolicy(net, arrays[-1], self.dims)

    def copy(self) -> "FlowPolicy":
        return FlowPolicy(self.net.copy(), self.cond_emb.copy(), self.dims)


@dataclass(frozen=True)
class SdeConfig:
    """Stochastic sampler settings."""

    num_steps: int = 16
    eta: float = 0.5
    t_min: float = DEFAULT_T_MIN
    seed: int = 0

    def __post_init__(self):
        if self.num_steps < 1:
            raise DomainError("num_steps must be >= 1")
        if not 0.0 < self.t_min < 1.0:
            raise DomainError("t_min must lie in (0, 1)")
        if self.eta < 0.0:
            raise DomainError("eta must be >= 0")


@dataclass
class Trajectory:
    """One stochastic rollout with everything needed to re-evaluate it.

    ``log_probs[k]`` is the Gaussian log-density of ``states[k + 1]`` under
    mean ``step_means[k]`` and covariance ``step_stds[k]**2 * I``; it is
    None when eta = 0 (the rollout is deterministic, no density exists).
    """

    times: np.ndarray
    states: np.ndarray
    step_means: np.ndarray
    step_stds: np.ndarray
    log_probs: np.ndarray | None
    condition: int
    eta: float
    dt: float

    @property
    def num_steps(self) -> int:
        return len(self.step_stds)

    def final_state(self) -> np.ndarray:
        return self.states[-1]


# ---------------------------------------------------------------------------
# Policy construction / checkpoints
# ---------------------------------------------------------------------------


def init_flow_policy(dims: PolicyDims, hidden: Sequence[int] = (64, 64),
                     rng: RandomSource | None = None) -> FlowPolicy:
    rng = rng if rng is not None else RandomSource(0)
    sizes = (dims.net_input_size, *hidden, dims.state_size)
    net = init_mlp(sizes, rng.stream(0))
    emb = rng.stream(1).gaussian(dims.num_classes * dims.embed_dim)
    emb = emb.reshape(dims.num_classes, dims.embed_dim) / math.sqrt(dims.embed_dim)
    return FlowPolicy(net, emb, dims)


def save_policy(path, policy: FlowPolicy, extra_meta: dict | None = None) -> None:
    meta = {
        "kind": "flow_policy",
        "layer_sizes": list(policy.net.layer_sizes),
        "activation": policy.net.activation,
        "dims": {
            "frames": policy.dims.frames,
            "frame_dim": policy.dims.frame_dim,
            "num_classes": policy.dims.num_classes,
            "embed_dim": policy.dims.embed_dim,
        },
    }
    if extra_meta:
        meta.update(extra_meta)
    arrays = {"cond_emb": policy.cond_emb}
    for l, (w, b) in enumerate(zip(policy.net.weights, policy.net.biases)):
        arrays[f"w{l}"] = w
        arrays[f"b{l}"] = b
    write_checkpoint(path, meta, arrays)


def load_policy(path):
    """Returns ``(FlowPolicy, meta)``."""
    meta, arrays = read_checkpoint(path)
    if meta.get("kind") != "flow_policy":
        raise DomainError(f"{path}: not a flow policy checkpoint")
    sizes = tuple(meta["layer_sizes"])
    net = MlpParams(
        sizes,
        [arrays[f"w{l}"] for l in range(len(sizes) - 1)],
        [arrays[f"b{l}"] for l in range(len(sizes) - 1)],
        meta.get("activation", "tanh"),
    )
    dims = PolicyDims(**meta["dims"])
    return FlowPolicy(net, arrays["cond_emb"], dims), meta


# ---------------------------------------------------------------------------
# Velocity and score
# ---------------------------------------------------------------------------


def _net_input(policy: FlowPolicy, x: np.ndarray, t: float, cond: int) -> np.ndarray:
    return np.concatenate([x, [t], policy.cond_emb[cond]])


def _check_velocity_args(policy: FlowPolicy, x: np.ndarray, t: float, cond: int):
    if not 0 <= int(cond) < policy.dims.num_classes:
        raise DomainError(
            f"condition {cond} out of range [0, {policy.dims.num_classes})"
        )
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"flow time {t} outside [0, 1]")
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape != (policy.dims.state_size,):
        raise ShapeError(f"state shape {x.shape}, expected ({policy.dims.state_size},)")
    return x


def velocity(policy: FlowPolicy, x: np.ndarray, t: float, cond: int) -> np.ndarray:
    """Velocity field at state ``x``, flow time ``t``, condition ``cond``."""
    x = _check_velocity_args(policy, x, t, cond)
    out, _ = mlp_forward(policy.net, _net_input(policy, x, float(t), int(cond)))
    return out


def score_from_velocity(x: np.ndarray, t: float, v: np.ndarray,
                        t_min: float = DEFAULT_T_MIN) -> np.ndarray:
    """Marginal score -(x + (1 - t) v) / t implied by the linear path.

    Singular at t = 0; callers must stay above ``t_min``.
    """
    if t < t_min:
        raise DomainError(f"flow time {t} below the score clamp t_min={t_min}")
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return -(x + (1.0 - t) * v) / t


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def time_grid(num_steps: int, t_min: float = 0.0) -> np.ndarray:
    """Uniform decreasing times from 1 to t_min, num_steps + 1 points."""
    if num_steps < 1:
        raise DomainError("num_steps must be >= 1")
    return np.linspace(1.0, float(t_min), num_steps + 1)


def _step_coeffs(t: float, dt: float, eta: float):
    """mean = a_x * x + a_v * v for one Euler-Maruyama step.

    Folding the score -(x + (1 - t) v)/t into the drift
    v - (sigma_t^2 / 2) * score with sigma_t = eta * sqrt(t) gives
    a_x = 1 + dt * eta^2 / 2 and a_v = dt * (1 + eta^2 (1 - t) / 2).
    """
    half = 0.5 * eta * eta
    return 1.0 + dt * half, dt * (1.0 + half * (1.0 - t))


def _step_mean_cached(policy: FlowPolicy, x: np.ndarray, t: float, dt: float,
                      eta: float, cond: int):
    out, cache = mlp_forward(policy.net, _net_input(policy, x, t, cond))
    a_x, a_v = _step_coeffs(t, dt, eta)
    return a_x * x + a_v * out, cache, a_v


def gaussian_log_density(x: np.ndarray, mean: np.ndarray, std: float) -> float:
    """Log-density of x under an isotropic Gaussian N(mean, std^2 I)."""
    if std <= 0.0:
        raise DomainError("std must be positive")
    resid = x - mean
    n = resid.size
    return -0.5 * n * math.log(2.0 * math.pi * std * std) - float(resid @ resid) / (
        2.0 * std * std
    )


def decode_state(x: np.ndarray, dims: PolicyDims, cond: int) -> ToySample:
    """Reshape a flat final state into a frame sequence."""
    return ToySample(np.asarray(x).reshape(dims.frames, dims.frame_dim), cond)


def ode_path(policy: FlowPolicy, cond: int, num_steps: int, rng: RandomSource,
             t_min: float = 0.0):
    """Deterministic Euler integration of dx = v dt from noise at t = 1.

    Returns ``(times, states)`` with states stacked (num_steps + 1, n).
    """
    times = time_grid(num_steps, t_min)
    dt = (float(t_min) - 1.0) / num_steps
    x = rng.gaussian(policy.dims.state_size)
    states = [x]
    _check_velocity_args(policy, x, float(times[0]), cond)
    for k in range(num_steps):
        try:
            v = velocity(policy, x, float(times[k]), cond)
        except DomainError as exc:
            raise RolloutError(f"step {k} (t={times[k]:.4f}): {exc}") from exc
        x = x + dt * v
        if not np.isfinite(x).all():
            raise RolloutError(f"non-finite state at step {k} (t={times[k]:.4f})")
        states.append(x)
    return times, np.stack(states)


def ode_sample(policy: FlowPolicy, cond: int, num_steps: int, rng: RandomSource,
               t_min: float = 0.0) -> ToySample:
    """Sample by integrating the deterministic flow; see :func:`ode_path`."""
    _, states = ode_path(policy, cond, num_steps, rng, t_min)
    return decode_state(states[-1], policy.dims, cond)


def sde_sample(policy: FlowPolicy, cond: int, config: SdeConfig,
               rng: RandomSource) -> Trajectory:
    """Stochastic rollout dx = (v - sigma_t^2/2 * score) dt + sigma_t dw.

    Each transition is Gaussian with mean from :func:`_step_coeffs` and
    std sigma_t * sqrt(|dt|) = eta * sqrt(t |dt|); the exact log-density
    of the realized next state is recorded (None when eta = 0).
    """
    if not 0 <= int(cond) < policy.dims.num_classes:
        raise DomainError(f"condition {cond} out of range")
    n = policy.dims.state_size
    K = config.num_steps
    times = time_grid(K, config.t_min)
    dt = (config.t_min - 1.0) / K
    eta = config.eta

    x = rng.gaussian(n)
    states = [x]
    means = np.empty((K, n))
    stds = np.empty(K)
    log_probs = np.empty(K) if eta > 0.0 else None
    for k in range(K):
        t = float(times[k])
        try:
            mean, _, _ = _step_mean_cached(policy, x, t, dt, eta, int(cond))
        except DomainError as exc:
            raise RolloutError(f"step {k} (t={t:.4f}): {exc}") from exc
        std = eta * math.sqrt(t * -dt)
        z = rng.gaussian(n)
        x = mean + std * z
        if not np.isfinite(x).all():
            raise RolloutError(f"non-finite state at step {k} (t={t:.4f})")
        means[k] = mean
        stds[k] = std
        if log_probs is not None:
            log_probs[k] = gaussian_log_density(x, mean, std)
        states.append(x)
    return Trajectory(
        times=times,
        states=np.stack(states),
        step_means=means,
        step_stds=stds,
        log_probs=log_probs,
        condition=int(cond),
        eta=eta,
        dt=dt,
    )


def log_prob_under(policy: FlowPolicy, traj: Trajectory,
                   timestep_subset: Sequence[int] | None = None) -> np.ndarray:
    """Per-step log-densities of a recorded rollout under a (possibly
    different) policy.

    The transition mean is recomputed from this policy's velocity; the
    visited states and the noise scale stay frozen from the trajectory.
    """
    if traj.log_probs is None:
        raise DomainError("trajectory was sampled with eta = 0; no density exists")
    steps = list(range(traj.num_steps) if timestep_subset is None else timestep_subset)
    out = np.empty(len(steps))
    for i, k in enumerate(steps):
        k = int(k)
        if not 0 <= k < traj.num_steps:
            raise DomainError(f"timestep index {k} out of range")
        mean, _, _ = _step_mean_cached(
            policy, traj.states[k], float(traj.times[k]), traj.dt, traj.eta,
            traj.condition,
        )
        out[i] = gaussian_log_density(traj.states[k + 1], mean, float(traj.step_stds[k]))
    return out


@dataclass
class StepEval:
    """Forward pieces of one re-evaluated transition, kept for backprop."""

    log_prob: float
    mean: np.ndarray
    cache: list
    a_v: float
    step: int


def eval_step(policy: FlowPolicy, traj: Trajectory, k: int) -> StepEval:
    """Like :func:`log_prob_under` for one step, returning backprop state."""
    if traj.log_probs is None:
        raise DomainError("trajectory was sampled with eta = 0; no density exists")
    mean, cache, a_v = _step_mean_cached(
        policy, traj.states[k], float(traj.times[k]), traj.dt, traj.eta,
        traj.condition,
    )
    logp = gaussian_log_density(traj.states[k + 1], mean, float(traj.step_stds[k]))
    return StepEval(log_prob=logp, mean=mean, cache=cache, a_v=a_v, step=int(k))


def backprop_step(policy: FlowPolicy, traj: Trajectory, ev: StepEval,
                  upstream_logp: float) -> list:
    """Gradient of ``upstream_logp * log_prob`` w.r.t. the policy arrays.

    d logp / d mean = (x_next - mean) / std^2 and d mean / d v = a_v; the
    rest is the net's backward pass plus routing the input gradient's
    embedding slice to the conditioning row.
    """
    std = float(traj.step_stds[ev.step])
    dmean = (traj.states[ev.step + 1] - ev.mean) / (std * std)
    upstream_v = (upstream_logp * ev.a_v) * dmean
    net_grads, input_grad = mlp_backward(policy.net, ev.cache, upstream_v)
    emb_grad = np.zeros_like(policy.cond_emb)
    n = policy.dims.state_size
    emb_grad[traj.condition] = input_grad[n + 1:]
    return net_grads.arrays() + [emb_grad]


# ---------------------------------------------------------------------------
# Toy dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyDataset:
    """Unit-circle sequences: class c rotates at constant angular velocity
    and ends at angle 2 pi c / num_classes, plus small Gaussian jitter."""

    dims: PolicyDims = PolicyDims()
    omega: float = 0.2
    jitter: float = 0.01

    def __post_init__(self):
        if self.dims.frame_dim != 2:
            raise DomainError("circle dataset requires frame_dim = 2")

    def target_angle(self, cond: int) -> float:
        return 2.0 * math.pi * int(cond) / self.dims.num_classes

    def sample_batch(self, rng: RandomSource, n: int):
        """Returns (frames (n, T, 2), conditions (n,))."""
        if n < 1:
            raise DomainError("batch size must be >= 1")
        T, C = self.dims.frames, self.dims.num_classes
        conds = rng.integers(0, C, size=n)
        ends = 2.0 * math.pi * conds / C
        # angle of frame t: target - omega * (T - 1 - t), so the final frame
        # sits exactly on the class angle
        offsets = -self.omega * np.arange(T - 1, -1, -1)
        angles = ends[:, None] + offsets[None, :]
        frames = np.stack([np.cos(angles), np.sin(angles)], axis=-1)
        frames += self.jitter * rng.gaussian(n * T * 2).reshape(n, T, 2)
        return frames, conds.astype(np.int64)

    def sample(self, rng: RandomSource) -> ToySample:
        frames, conds = self.sample_batch(rng, 1)
        return ToySample(frames[0], int(conds[0]))


@dataclass
class ArrayDataset:
    """Fixed pool of sequences, sampled with replacement."""

    frames: np.ndarray
    conditions: np.ndarray

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float64)
        self.conditions = np.asarray(self.conditions, dtype=np.int64)
        if self.frames.ndim != 3 or len(self.frames) != len(self.conditions):
            raise ShapeError("frames must be (N, T, D) matching conditions (N,)")
        if len(self.frames) == 0:
            raise DomainError("empty dataset")

    def sample_batch(self, rng: RandomSource, n: int):
        idx = rng.integers(0, len(self.frames), size=n)
        return self.frames[idx], self.conditions[idx]


# ---------------------------------------------------------------------------
# Flow-matching pretraining
# ---------------------------------------------------------------------------


def flow_matching_loss(policy: FlowPolicy, frames: np.ndarray, conds: np.ndarray,
                       t: np.ndarray, eps: np.ndarray) -> float:
    """Mean squared residual of the velocity net against (noise - data)."""
    B = len(frames)
    data = frames.reshape(B, -1)
    x_t = (1.0 - t)[:, None] * data + t[:, None] * eps
    target = eps - data
    inputs = np.concatenate([x_t, t[:, None], policy.cond_emb[conds]], axis=1)
    v, _ = mlp_forward_batch(policy.net, inputs)
    return float(np.mean((v - target) ** 2))


def pretrain_flow_matching(policy: FlowPolicy, dataset, steps: int,
                           rng: RandomSource, batch_size: int = 64,
                           learning_rate: float = 1e-3):
    """Regress the velocity net onto (noise - data) along the linear path.

    Returns ``(trained policy, per-step loss curve)``; the input policy is
    not mutated.
    """
    policy = policy.copy()
    if steps == 0:
        return policy, []
    n = policy.dims.state_size
    arrays = policy.param_arrays()
    opt = adam_init(arrays, learning_rate=learning_rate)
    losses = []
    for step in range(steps):
        frames, conds = dataset.sample_batch(rng.stream(0, step), batch_size)
        if len(frames) == 0:
            raise DomainError("empty dataset")
        if frames.shape[1] * frames.shape[2] != n:
            raise ShapeError("dataset sample size does not match the policy state")
        B = len(frames)
        noise_rng = rng.stream(1, step)
        eps = noise_rng.gaussian(B * n).reshape(B, n)
        t = noise_rng.uniform(B)
        data = frames.reshape(B, -1)
        x_t = (1.0 - t)[:, None] * data + t[:, None] * eps
        target = eps - data
        inputs = np.concatenate([x_t, t[:, None], policy.cond_emb[conds]], axis=1)
        v, cache = mlp_forward_batch(policy.net, inputs)
        resid = v - target
        losses.append(float(np.mean(resid**2)))
        upstream = (2.0 / (B * n)) * resid
        net_grads, input_grads = mlp_backward_batch(policy.net, cache, upstream)
        emb_grad = np.zeros_like(policy.cond_emb)
        np.add.at(emb_grad, conds, input_grads[:, n + 1:])
        arrays, opt = adam_step_arrays(arrays, net_grads.arrays() + [emb_grad], opt)
        policy = policy.with_param_arrays(arrays)
    return policy, losses


# ---------------------------------------------------------------------------
# Trajectory dump (debugging aid)
# ---------------------------------------------------------------------------


def write_trajectory_jsonl(traj: Trajectory, fp) -> None:
    """Line-delimited dump: one header record, then one record per step."""
    header = {
        "kind": "header",
        "condition": traj.condition,
        "eta": traj.eta,
        "dt": traj.dt,
        "num_steps": traj.num_steps,
        "state_size": int(traj.states.shape[1]),
    }
    fp.write(json.dumps(header, sort_keys=True) + "\n")
    for k in range(traj.num_steps):
        rec = {
            "kind": "step",
            "index": k,
            "time": float(traj.times[k]),
            "state": traj.states[k].tolist(),
            "mean": traj.step_means[k].tolist(),
            "std": float(traj.step_stds[k]),
            "log_prob": None if traj.log_probs is None else float(traj.log_probs[k]),
        }
        fp.write(json.dumps(rec, sort_keys=True) + "\n")
