"""Group-relative policy optimization with the staged reward curriculum.

Each step rolls out a group of stochastic trajectories for one shared
condition under a frozen reference policy, scores them with the reward
suite, mixes the terms with the curriculum gates, and ascends the
clipped importance-ratio surrogate through the per-step Gaussian
transition densities.

Advantages enter the gradient as constants: nothing differentiates
through the reward or mixing computations.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .curriculum import (
    CurriculumConfig,
    CurriculumState,
    curriculum_step,
    group_means,
    hoyer,
    normalize_advantages,
)
from .errors import DomainError, RolloutError, ShapeError
from .flow_policy import (
    FlowPolicy,
    SdeConfig,
    Trajectory,
    backprop_step,
    decode_state,
    eval_step,
    sde_sample,
)
from .numerics import AdamState, RandomSource, adam_init, adam_step_arrays
from .rewards import RewardTerm, default_suite, eval_group, validate_suite

# Ratio clipping used at production scale; far too tight for the toy
# setup, where the desk-scale default below keeps the clip meaningful.
FULL_SCALE_CLIP_EPS = 1e-4

# Stream ids for per-step child RNGs.
_STREAM_COND, _STREAM_ROLLOUT, _STREAM_SUBSET = 0, 1, 2


@dataclass(frozen=True)
class TrainConfig:
    """Everything one training run depends on."""

    group_size: int = 16
    clip_eps: float = 0.1
    learning_rate: float = 3e-4
    num_steps: int = 200
    timestep_fraction: float = 0.6
    ratio_clamp_max: float = 5.0
    ref_refresh_interval: int = 1
    seed: int = 0
    sde: SdeConfig = field(default_factory=SdeConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    suite: tuple | None = None  # defaults to the standard three-stage suite
    static_stage: int | None = None  # train on one term only, bypassing gates
    smooth_window: int = 15
    max_grad_norm: float = 1.0  # 0 disables the global-norm clip

    def __post_init__(self):
        if self.group_size < 2:
            raise DomainError("group_size must be >= 2")
        if self.clip_eps <= 0.0:
            raise DomainError("clip_eps must be > 0")
        if self.ratio_clamp_max <= 1.0:
            raise DomainError("ratio_clamp_max must be > 1")
        if not 0.0 < self.timestep_fraction <= 1.0:
            raise DomainError("timestep_fraction must lie in (0, 1]")
        if self.num_steps < 0:
            raise DomainError("num_steps must be >= 0")
        if self.ref_refresh_interval < 1:
            raise DomainError("ref_refresh_interval must be >= 1")
        if self.smooth_window < 1:
            raise DomainError("smooth_window must be >= 1")
        if self.learning_rate < 0.0:
            raise DomainError("learning_rate must be >= 0")
        if self.max_grad_norm < 0.0:
            raise DomainError("max_grad_norm must be >= 0")
        if self.suite is not None:
            object.__setattr__(self, "suite", tuple(self.suite))


@dataclass
class StepRecord:
    """One optimization step's logged statistics."""

    step: int
    refresh: bool
    condition: int
    weights: np.ndarray
    term_means: np.ndarray
    sparsities: np.ndarray
    transitions: np.ndarray
    mixed_mean: float
    objective: float
    grad_norm: float
    clip_fraction: float
    ratio_max_dev: float

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "refresh": self.refresh,
            "condition": self.condition,
            "weights": self.weights.tolist(),
            "term_means": self.term_means.tolist(),
            "sparsities": self.sparsities.tolist(),
            "transitions": self.transitions.tolist(),
            "mixed_mean": self.mixed_mean,
            "objective": self.objective,
            "grad_norm": self.grad_norm,
            "clip_fraction": self.clip_fraction,
            "ratio_max_dev": self.ratio_max_dev,
        }


@dataclass
class TrainLog:
    """Append-only list of step records with tabular/JSONL export."""

    records: list = field(default_factory=list)

    def append(self, rec: StepRecord) -> None:
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def term_means_matrix(self) -> np.ndarray:
        """Per-term group means, one row per step."""
        return np.stack([r.term_means for r in self.records])

    def weights_matrix(self) -> np.ndarray:
        return np.stack([r.weights for r in self.records])

    def write_jsonl(self, fp) -> None:
        for rec in self.records:
            fp.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")

    def write_csv(self, fp) -> None:
        if not self.records:
            fp.write("")
            return
        K = len(self.records[0].weights)
        header = (
            ["step", "refresh", "condition", "objective", "grad_norm",
             "clip_fraction", "ratio_max_dev", "mixed_mean"]
            + [f"weight_{j}" for j in range(1, K + 1)]
            + [f"term_mean_{j}" for j in range(1, K + 1)]
            + [f"sparsity_{j}" for j in range(1, K + 1)]
            + [f"gate_{j}" for j in range(1, K + 1)]
        )
        writer = csv.writer(fp, lineterminator="\n")
        writer.writerow(header)
        for r in self.records:
            row = [r.step, int(r.refresh), r.condition, repr(r.objective),
                   repr(r.grad_norm), repr(r.clip_fraction), repr(r.ratio_max_dev),
                   repr(r.mixed_mean)]
            for arr in (r.weights, r.term_means, r.sparsities, r.transitions):
                row.extend(repr(float(x)) for x in arr)
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Surrogate objective
# ---------------------------------------------------------------------------


def importance_ratio(new_logp: float, old_logp: float, clamp_max: float) -> float:
    """exp(new - old) hard-clamped to [1/clamp_max, clamp_max]."""
    if not (math.isfinite(new_logp) and math.isfinite(old_logp)):
        raise DomainError("log-probabilities must be finite")
    if clamp_max <= 1.0:
        raise DomainError("clamp_max must be > 1")
    return float(min(max(math.exp(new_logp - old_logp), 1.0 / clamp_max), clamp_max))


def surrogate_objective(ratios: np.ndarray, advantages: np.ndarray, clip_eps: float):
    """Clipped pessimistic surrogate.

    J averages min(ratio * A, clip(ratio) * A) over samples and steps;
    the returned flags mark elements where the clipped branch is strictly
    the smaller one (there the objective is locally flat in the ratio).
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    if ratios.ndim != 2 or advantages.shape != (ratios.shape[0],):
        raise ShapeError("ratios must be (G, T') with advantages (G,)")
    if clip_eps <= 0.0:
        raise DomainError("clip_eps must be > 0")
    raw = ratios * advantages[:, None]
    clipped = np.clip(ratios, 1.0 - clip_eps, 1.0 + clip_eps) * advantages[:, None]
    elems = np.minimum(raw, clipped)
    flags = clipped < raw
    return float(elems.mean()), flags


def surrogate_and_grads(policy: FlowPolicy, trajs: Sequence[Trajectory],
                        advantages: np.ndarray, timestep_subset: Sequence[int],
                        clip_eps: float, ratio_clamp_max: float):
    """Objective value and its exact gradient w.r.t. the policy arrays.

    Recomputes each selected transition's log-density under ``policy``
    against the trajectories' recorded reference log-densities.  The
    gradient flows only where the unclipped branch is active and the
    ratio clamp does not bind; advantages are consumed as constants.

    Returns ``(J, grads, ratios, clip_flags)``.
    """
    subset = [int(k) for k in timestep_subset]
    G, T_sel = len(trajs), len(subset)
    if G != len(advantages):
        raise ShapeError("one advantage per trajectory required")
    if T_sel < 1:
        raise DomainError("need at least one selected timestep")
    evals = []
    ratios = np.empty((G, T_sel))
    raw_ratios = np.empty((G, T_sel))
    for i, traj in enumerate(trajs):
        if traj.log_probs is None:
            raise DomainError("trajectories must be sampled with eta > 0")
        row = []
        for u, k in enumerate(subset):
            ev = eval_step(policy, traj, k)
            raw = math.exp(ev.log_prob - float(traj.log_probs[k]))
            raw_ratios[i, u] = raw
            ratios[i, u] = min(max(raw, 1.0 / ratio_clamp_max), ratio_clamp_max)
            row.append(ev)
        evals.append(row)
    J, flags = surrogate_objective(ratios, advantages, clip_eps)

    grads = [np.zeros_like(a) for a in policy.param_arrays()]
    scale = 1.0 / (G * T_sel)
    for i, traj in enumerate(trajs):
        for u, k in enumerate(subset):
            if flags[i, u]:
                continue  # clipped branch selected: flat in the ratio
            raw = raw_ratios[i, u]
            if not 1.0 / ratio_clamp_max < raw < ratio_clamp_max:
                continue  # hard clamp binds: flat in the log-prob
            upstream = scale * float(advantages[i]) * raw
            for acc, g in zip(grads, backprop_step(policy, traj, evals[i][u], upstream)):
                acc += g
    return J, grads, ratios, flags


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _resolve_suite(policy: FlowPolicy, config: TrainConfig) -> tuple:
    suite = config.suite
    if suite is None:
        suite = tuple(default_suite(policy.dims.num_classes))
    validate_suite(suite)
    if config.static_stage is not None and not 1 <= config.static_stage <= len(suite):
        raise DomainError(f"static_stage {config.static_stage} out of range")
    return tuple(suite)


def _static_state(matrix, stage: int) -> CurriculumState:
    """Fixed one-hot mixing for single-stage probe/baseline runs."""
    means = group_means(matrix)
    sparsities = np.array([hoyer(matrix.values[:, j]) for j in range(matrix.num_terms)])
    weights = np.zeros(matrix.num_terms)
    weights[stage - 1] = 1.0
    mixed = matrix.values[:, stage - 1].copy()
    return CurriculumState(
        group_means=means,
        sparsities=sparsities,
        transitions=np.zeros(matrix.num_terms),
        weights=weights,
        mixed=mixed,
        advantages=normalize_advantages(mixed),
    )


def train_step(policy: FlowPolicy, ref_policy: FlowPolicy, config: TrainConfig,
               rng: RandomSource, opt_state: AdamState | None = None,
               prior_state: CurriculumState | None = None, step_index: int = 0,
               refresh: bool = True):
    """One optimization step.

    Rolls out the group under ``ref_policy``, computes curriculum
    advantages, ascends the surrogate, and returns
    ``(policy, opt_state, curriculum state, step record)``.
    """
    suite = _resolve_suite(policy, config)
    if opt_state is None:
        opt_state = adam_init(policy.param_arrays(), learning_rate=config.learning_rate)

    cond = int(rng.stream(_STREAM_COND, step_index).integers(0, policy.dims.num_classes))
    trajs = []
    for i in range(config.group_size):
        try:
            trajs.append(
                sde_sample(ref_policy, cond, config.sde,
                           rng.stream(_STREAM_ROLLOUT, step_index, i))
            )
        except RolloutError as exc:
            raise RolloutError(
                f"step {step_index}, rollout {i}, condition {cond}: {exc}"
            ) from exc

    samples = [decode_state(t.final_state(), policy.dims, cond) for t in trajs]
    matrix = eval_group(suite, samples)
    if config.static_stage is not None:
        state = _static_state(matrix, config.static_stage)
    else:
        state = curriculum_step(matrix, config.curriculum, prior_state)

    K = config.sde.num_steps
    n_sel = math.ceil(config.timestep_fraction * K)
    subset = np.sort(rng.stream(_STREAM_SUBSET, step_index).permutation(K)[:n_sel])

    J, grads, ratios, flags = surrogate_and_grads(
        policy, trajs, state.advantages, subset, config.clip_eps,
        config.ratio_clamp_max,
    )
    grad_norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if config.max_grad_norm > 0.0 and grad_norm > config.max_grad_norm:
        shrink = config.max_grad_norm / grad_norm
        grads = [g * shrink for g in grads]

    # ascend J: Adam minimizes, so feed the negated gradient
    arrays, opt_state = adam_step_arrays(
        policy.param_arrays(), [-g for g in grads], opt_state
    )
    policy = policy.with_param_arrays(arrays)

    rec = StepRecord(
        step=step_index,
        refresh=refresh,
        condition=cond,
        weights=state.weights.copy(),
        term_means=state.group_means.copy(),
        sparsities=state.sparsities.copy(),
        transitions=state.transitions.copy(),
        mixed_mean=float(state.mixed.mean()),
        objective=J,
        grad_norm=grad_norm,
        clip_fraction=float(flags.mean()),
        ratio_max_dev=float(np.abs(ratios - 1.0).max()),
    )
    return policy, opt_state, state, rec


def train(policy: FlowPolicy, config: TrainConfig, step_callback=None):
    """Run ``config.num_steps`` optimization steps.

    The reference policy is refreshed every ``ref_refresh_interval``
    steps; a fixed seed makes the whole trace bit-reproducible.  The
    optional ``step_callback(step, policy, record)`` runs after each
    update (checkpointing hook).  Returns ``(policy, TrainLog)``.
    """
    rng = RandomSource(config.seed)
    opt_state = adam_init(policy.param_arrays(), learning_rate=config.learning_rate)
    log = TrainLog()
    ref_policy = policy
    prior = None
    for s in range(config.num_steps):
        refresh = s % config.ref_refresh_interval == 0
        if refresh:
            ref_policy = policy.copy()
        policy, opt_state, state, rec = train_step(
            policy, ref_policy, config, rng, opt_state, prior, s, refresh
        )
        prior = state
        log.append(rec)
        if step_callback is not None:
            step_callback(s, policy, rec)
    return policy, log


def smooth_curve(values: Sequence[float], window: int) -> np.ndarray:
    """Centered moving average with edge truncation."""
    if window < 1:
        raise DomainError("window must be >= 1")
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1:
        raise ShapeError("smooth_curve expects a 1-d series")
    left, right = (window - 1) // 2, window // 2
    out = np.empty_like(values)
    for i in range(len(values)):
        lo, hi = max(0, i - left), min(len(values), i + right + 1)
        out[i] = values[lo:hi].mean()
    return out
