"""Reward term contracts: exact values on zero-residual sets, hand-derived
cases, monotonicity, and group evaluation semantics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowstage.errors import DomainError
from flowstage.flow_policy import PolicyDims, ToyDataset, ToySample
from flowstage.numerics import RandomSource
from flowstage.rewards import (
    RewardMatrix,
    RewardTerm,
    default_suite,
    eval_group,
    eval_reward_term,
    validate_suite,
    wrapped_angle_error,
)


def circle_sample(angles, cond=0, radius=1.0):
    angles = np.asarray(angles, dtype=np.float64)
    frames = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return ToySample(frames, cond)


FID = RewardTerm("fid", 1, "fidelity", 0.05)
SMOOTH = RewardTerm("smooth", 2, "smoothness", 0.02)
ALIGN8 = RewardTerm("align", 3, "alignment", 0.5, num_classes=8)


class TestFidelity:
    def test_unit_circle_frames_score_one(self):
        s = circle_sample([0.1, 0.7, 1.3, 2.0])
        assert eval_reward_term(FID, s) == 1.0

    def test_radius_two_scale_one_is_exp_minus_one(self):
        term = RewardTerm("fid", 1, "fidelity", 1.0)
        s = circle_sample([0.0, 1.0, 2.0], radius=2.0)
        np.testing.assert_allclose(eval_reward_term(term, s), math.exp(-1.0), rtol=1e-12)

    def test_matches_direct_formula(self):
        rng = RandomSource(5)
        frames = rng.gaussian(12).reshape(6, 2)
        s = ToySample(frames, 0)
        radii = np.sqrt((frames**2).sum(axis=1))
        expected = math.exp(-np.mean((radii - 1.0) ** 2) / FID.scale)
        np.testing.assert_allclose(eval_reward_term(FID, s), expected, rtol=1e-12)

    def test_strictly_decreasing_in_radial_residual(self):
        values = [
            eval_reward_term(FID, circle_sample([0.0, 0.5, 1.0], radius=r))
            for r in (1.0, 1.05, 1.1, 1.3, 1.8)
        ]
        assert all(a > b for a, b in zip(values, values[1:]))


class TestSmoothness:
    def test_constant_sequence_scores_one(self):
        s = ToySample(np.tile([0.3, -0.4], (5, 1)), 0)
        assert eval_reward_term(SMOOTH, s) == 1.0

    def test_linear_motion_scores_one(self):
        frames = np.linspace([0.0, 0.0], [1.0, 2.0], 6)
        assert eval_reward_term(SMOOTH, ToySample(frames, 0)) == 1.0

    def test_matches_direct_formula(self):
        rng = RandomSource(6)
        frames = rng.gaussian(10).reshape(5, 2)
        s = ToySample(frames, 0)
        second = frames[2:] - 2 * frames[1:-1] + frames[:-2]
        expected = math.exp(-np.mean((second**2).sum(axis=1)) / SMOOTH.scale)
        np.testing.assert_allclose(eval_reward_term(SMOOTH, s), expected, rtol=1e-12)

    def test_strictly_decreasing_in_curvature(self):
        base = np.linspace([0.0, 0.0], [1.0, 0.0], 7)
        values = []
        for bend in (0.0, 0.05, 0.1, 0.2, 0.4):
            frames = base.copy()
            frames[3, 1] += bend
            values.append(eval_reward_term(SMOOTH, ToySample(frames, 0)))
        assert all(a > b for a, b in zip(values, values[1:]))


class TestAlignment:
    def test_exact_target_scores_one(self):
        target = 2.0 * math.pi * 3 / 8
        s = circle_sample([0.0, target], cond=3)
        assert eval_reward_term(ALIGN8, s) == 1.0

    def test_matches_direct_formula(self):
        s = circle_sample([0.0, 1.9], cond=2)
        err = wrapped_angle_error(1.9, 2.0 * math.pi * 2 / 8)
        expected = math.exp(-err * err / ALIGN8.scale)
        np.testing.assert_allclose(eval_reward_term(ALIGN8, s), expected, rtol=1e-12)

    def test_strictly_decreasing_in_angular_error(self):
        values = [
            eval_reward_term(ALIGN8, circle_sample([0.0, err], cond=0))
            for err in (0.0, 0.3, 1.0, 2.0, math.pi)
        ]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_origin_final_frame_scores_zero(self):
        frames = np.array([[1.0, 0.0], [0.0, 0.0]])
        assert eval_reward_term(ALIGN8, ToySample(frames, 0)) == 0.0

    def test_wrapping(self):
        assert wrapped_angle_error(0.1, 2 * math.pi - 0.1) == pytest.approx(0.2)
        assert wrapped_angle_error(-math.pi, math.pi) == pytest.approx(0.0, abs=1e-12)


class TestEvalGroup:
    def suite(self):
        return default_suite(num_classes=8)

    def test_identical_samples_give_constant_columns(self):
        s = circle_sample([0.0, 0.5, 1.0], cond=1)
        matrix = eval_group(self.suite(), [s] * 4)
        for j in range(matrix.num_terms):
            assert np.ptp(matrix.values[:, j]) == 0.0

    def test_single_term_matches_per_sample_eval(self):
        rng = RandomSource(7)
        samples = [ToySample(rng.gaussian(8).reshape(4, 2), 0) for _ in range(3)]
        matrix = eval_group([FID], samples)
        expected = [eval_reward_term(FID, s) for s in samples]
        np.testing.assert_allclose(matrix.values[:, 0], expected, rtol=1e-12)

    def test_matches_elementwise_oracle(self):
        ds = ToyDataset(PolicyDims(frames=6, frame_dim=2, num_classes=8, embed_dim=2))
        frames, conds = ds.sample_batch(RandomSource(8), 5)
        samples = [ToySample(f, int(c)) for f, c in zip(frames, conds)]
        suite = self.suite()
        matrix = eval_group(suite, samples)
        ordered = sorted(suite, key=lambda t: t.stage)
        for i, s in enumerate(samples):
            for j, term in enumerate(ordered):
                np.testing.assert_allclose(
                    matrix.values[i, j], eval_reward_term(term, s), rtol=1e-12
                )

    def test_permutation_equivariance(self):
        ds = ToyDataset(PolicyDims(frames=6, frame_dim=2, num_classes=8, embed_dim=2))
        frames, conds = ds.sample_batch(RandomSource(9), 6)
        samples = [ToySample(f, int(c)) for f, c in zip(frames, conds)]
        perm = RandomSource(10).permutation(6)
        m1 = eval_group(self.suite(), samples)
        m2 = eval_group(self.suite(), [samples[i] for i in perm])
        np.testing.assert_array_equal(m1.values[perm], m2.values)

    def test_degenerate_sample_flagged(self):
        ok = circle_sample([0.0, 0.5], cond=0)
        bad = ToySample(np.array([[1.0, 0.0], [0.0, 0.0]]), 0)
        matrix = eval_group(self.suite(), [ok, bad])
        align_col = 2
        assert matrix.flags[1, align_col]
        assert matrix.values[1, align_col] == 0.0
        assert not matrix.flags[0].any()

    def test_group_too_small_rejected(self):
        with pytest.raises(DomainError):
            eval_group(self.suite(), [circle_sample([0.0, 0.5])])


class TestSuiteValidation:
    def test_contiguous_stages_required(self):
        bad = [RewardTerm("a", 1, "fidelity", 0.1), RewardTerm("b", 3, "smoothness", 0.1)]
        with pytest.raises(DomainError):
            validate_suite(bad)

    def test_alignment_requires_classes(self):
        with pytest.raises(DomainError):
            RewardTerm("align", 1, "alignment", 0.5)

    def test_unknown_kind_rejected(self):
        with pytest.raises(DomainError):
            RewardTerm("x", 1, "mystery", 0.5)

    def test_custom_term(self):
        term = RewardTerm("c", 1, "custom", 1.0, fn=lambda s: 0.25)
        s = circle_sample([0.0, 1.0])
        assert eval_reward_term(term, s) == 0.25

    def test_custom_term_out_of_range_flagged(self):
        term = RewardTerm("c", 1, "custom", 1.0, fn=lambda s: 1.5)
        s = circle_sample([0.0, 1.0])
        matrix = eval_group([term], [s, s])
        assert matrix.flags.all()
        assert (matrix.values == 0.0).all()


class TestRangeInvariant:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_rewards_always_in_unit_interval(self, seed):
        rng = RandomSource(seed)
        frames = 2.0 * rng.gaussian(10).reshape(5, 2)
        s = ToySample(frames, int(rng.integers(0, 8)))
        for term in default_suite(num_classes=8):
            value = eval_reward_term(term, s)
            assert 0.0 <= value <= 1.0

    def test_matrix_validation_rejects_out_of_range(self):
        with pytest.raises(DomainError):
            RewardMatrix(np.array([[0.5, 1.2]]), np.zeros((1, 2), dtype=bool))
