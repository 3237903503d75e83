import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seq2slate.losses import (
    FAMILIES,
    LossConfig,
    RewardConfig,
    expected_loss_enumerate,
    expected_loss_naive,
    expected_reward_enumerate,
    per_step_hinge,
    per_step_with_grad,
    per_step_xent,
    position_weights,
    reinforce_gradient_batch,
    sequence_loss,
    sequence_loss_with_grad,
    supervised_gradient_batch,
)
from seq2slate.model import RankingInstance, decode_forced, log_prob_and_grad, sequence_loss_and_grad
from seq2slate.numerics import finite_difference_gradient, make_rng, relative_error
from seq2slate.optim import init_params

LN2 = math.log(2)


def model(seed=0, m=4, rho=6, scale=0.5):
    return init_params(m, m, rho, make_rng(seed), scale=scale)


def zero_v(params):
    p = params.copy()
    p.v[:] = 0.0
    return p


class TestPerStep:
    def test_xent_uniform(self):
        assert per_step_xent([0.0, 0.0], [1, 0]) == pytest.approx(LN2, abs=1e-12)

    def test_xent_no_positive(self):
        assert per_step_xent([0.3, -1.0, 2.0], [0, 0, 0]) == 0.0

    def test_xent_sole_remaining_positive(self):
        assert per_step_xent([0.3, -1.0, 2.0], [0, 1, 0], excluded={0, 2}) == 0.0

    def test_xent_targets_renormalised_over_remaining(self):
        s = np.array([0.5, 0.1, -0.4])
        # item 0 placed; the only remaining positive is item 2
        expected = -math.log(math.exp(-0.4) / (math.exp(0.1) + math.exp(-0.4)))
        assert per_step_xent(s, [1, 0, 1], excluded={0}) == pytest.approx(expected, abs=1e-12)

    def test_hinge_margin_satisfied(self):
        assert per_step_hinge([2.0, 0.5, 1.0], [1, 0, 0]) == 0.0

    def test_hinge_direct(self):
        assert per_step_hinge([0.0, 0.0], [1, 0]) == 1.0

    def test_smooth_hinge_singletons_exact(self):
        assert per_step_hinge([0.0, 0.0], [1, 0], smooth=1.0) == pytest.approx(1.0, abs=1e-12)

    def test_hinge_without_both_classes_is_zero(self):
        assert per_step_hinge([0.0, 1.0], [1, 1]) == 0.0
        assert per_step_hinge([0.0, 1.0], [0, 0]) == 0.0

    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=6), st.data())
    def test_losses_non_negative(self, s, data):
        y = data.draw(st.lists(st.integers(0, 1), min_size=len(s), max_size=len(s)))
        assert per_step_xent(s, y) >= 0
        assert per_step_hinge(s, y) >= 0
        assert per_step_hinge(s, y, smooth=1.0) >= 0

    @pytest.mark.parametrize("family", FAMILIES)
    def test_score_gradient(self, family):
        s = np.array([0.3, -0.2, 0.9, 0.1])
        y = np.array([1, 0, 1, 0])
        live = np.array([True, True, False, True])
        cfg = LossConfig(family=family, gamma=2.0)
        _, g = per_step_with_grad(s, y, live, cfg)
        fd = finite_difference_gradient(lambda x: per_step_with_grad(x, y, live, cfg)[0], s)
        assert relative_error(g, fd) < 1e-7
        assert g[2] == 0.0


class TestWeights:
    def test_values(self):
        assert position_weights(5, "dcg")[0] == 1.0
        assert position_weights(5, "dcg")[2] == pytest.approx(0.5)
        assert position_weights(5, "topk", 3).tolist() == [1, 1, 1, 0, 0]
        assert position_weights(2, "uniform").tolist() == [1, 1]

    def test_topk_needs_k(self):
        with pytest.raises(ValueError):
            LossConfig(weight_scheme="topk")


class TestSequenceLoss:
    def test_all_negative(self):
        S = make_rng(0).normal(size=(3, 3))
        assert sequence_loss(S, [0, 0, 0], [2, 0, 1], LossConfig()) == 0.0

    def test_worked_example(self):
        loss = sequence_loss(np.zeros((2, 2)), [1, 0], [0, 1], LossConfig())
        assert loss == pytest.approx(0.6931, abs=1e-4)

    def test_top1_equals_first_step(self):
        S = make_rng(1).normal(size=(4, 4))
        y = [0, 1, 1, 0]
        cfg = LossConfig(weight_scheme="topk", k=1)
        assert sequence_loss(S, y, [3, 1, 0, 2], cfg) == pytest.approx(per_step_xent(S[0], y), abs=1e-14)

    def test_hinge_margin_zero_for_any_permutation(self):
        s = np.array([3.0, 0.0, 2.5, -1.0])
        S = np.tile(s, (4, 1))
        y = [1, 0, 1, 0]
        for perm in itertools.permutations(range(4)):
            assert sequence_loss(S, y, perm, LossConfig(family="hinge")) == 0.0

    def test_model_level_worked_example(self):
        params = zero_v(model())
        inst = RankingInstance(np.ones((2, 4)), [1, 0])
        loss, _ = sequence_loss_and_grad(params, inst, [0, 1], LossConfig())
        assert loss == pytest.approx(LN2, abs=1e-12)

    @pytest.mark.parametrize("family", FAMILIES)
    @pytest.mark.parametrize("weights", ["uniform", "dcg"])
    def test_parameter_gradient(self, family, weights):
        params = model(3)
        rng = make_rng(3)
        inst = RankingInstance(rng.normal(size=(5, 4)), [0, 1, 0, 1, 1])
        perm = [4, 2, 0, 1, 3]
        cfg = LossConfig(family=family, weight_scheme=weights)
        _, g = sequence_loss_and_grad(params, inst, perm, cfg)
        fd = finite_difference_gradient(
            lambda th: sequence_loss_and_grad(params.with_flat(th), inst, perm, cfg)[0], params.flat())
        assert relative_error(g.flat(), fd) < 1e-4


class TestExpectedLoss:
    def test_single_item(self):
        inst = RankingInstance(np.ones((1, 4)), [1])
        assert expected_loss_enumerate(model(), inst, LossConfig()) == 0.0

    def test_uniform_pair(self):
        inst = RankingInstance(np.ones((2, 4)), [1, 0])
        value = expected_loss_enumerate(zero_v(model()), inst, LossConfig())
        assert value == pytest.approx((LN2 + (LN2 + 0.0)) / 2, abs=1e-12)

    @pytest.mark.parametrize("family", FAMILIES)
    def test_prefix_enumeration_matches_naive_sum(self, family):
        params = model(4)
        rng = make_rng(4)
        inst = RankingInstance(rng.normal(size=(5, 4)), [1, 0, 0, 1, 0])
        cfg = LossConfig(family=family, weight_scheme="dcg")
        assert abs(expected_loss_enumerate(params, inst, cfg) - expected_loss_naive(params, inst, cfg)) < 1e-10

    def test_cap(self):
        inst = RankingInstance(np.ones((8, 4)), [1] + [0] * 7)
        with pytest.raises(ValueError, match="Monte-Carlo"):
            expected_loss_enumerate(model(), inst, LossConfig())

    def test_expected_reward_of_constant_reward(self):
        inst = RankingInstance(make_rng(5).normal(size=(3, 4)), [1, 1, 1])
        assert expected_reward_enumerate(model(5), inst, RewardConfig("ndcg", 2)) == pytest.approx(1.0)


class TestEstimators:
    def test_all_negative_instance(self):
        params = model(6)
        inst = RankingInstance(make_rng(6).normal(size=(4, 4)), [0, 0, 0, 0])
        g, loss = supervised_gradient_batch(params, [inst], LossConfig(), baseline=0.7, rng=make_rng(1))
        assert loss == 0.0
        perm = _sampled_perm(params, inst, 1)
        _, glp = log_prob_and_grad(params, inst, perm)
        np.testing.assert_allclose(g.flat(), -0.7 * glp.flat(), atol=1e-14)

    def test_baseline_at_loss_leaves_only_loss_gradient(self):
        params = model(7)
        inst = RankingInstance(make_rng(7).normal(size=(4, 4)), [0, 1, 0, 1])
        perm = _sampled_perm(params, inst, 2)
        loss, g_loss = sequence_loss_and_grad(params, inst, perm, LossConfig())
        g, value = supervised_gradient_batch(params, [inst], LossConfig(), baseline=loss, rng=make_rng(2))
        assert value == pytest.approx(loss)
        np.testing.assert_allclose(g.flat(), g_loss.flat(), atol=1e-13)

    def test_greedy_policy_is_loss_gradient_of_greedy_permutation(self):
        from seq2slate.model import decode_greedy

        params = model(8)
        inst = RankingInstance(make_rng(8).normal(size=(4, 4)), [0, 1, 0, 1])
        cfg = LossConfig(policy="greedy")
        perm = decode_greedy(params, inst).permutation
        _, g_loss = sequence_loss_and_grad(params, inst, perm, cfg)
        g, _ = supervised_gradient_batch(params, [inst], cfg, baseline=3.0, rng=make_rng(0))
        np.testing.assert_allclose(g.flat(), g_loss.flat(), atol=1e-13)

    def test_reinforce_constant_reward(self):
        params = model(9)
        inst = RankingInstance(make_rng(9).normal(size=(3, 4)), [1, 1, 1])
        g, r = reinforce_gradient_batch(params, [inst], RewardConfig("ndcg", 2), baseline=1.0, rng=make_rng(0))
        assert r == 1.0 and np.abs(g.flat()).max() == 0.0

    def test_reinforce_single_item(self):
        inst = RankingInstance(np.ones((1, 4)), [1])
        g, _ = reinforce_gradient_batch(model(), [inst], RewardConfig(), baseline=0.2, rng=make_rng(0))
        assert np.abs(g.flat()).max() == 0.0

    def test_mixed_sizes_average_per_instance(self):
        params = model(10)
        rng = make_rng(10)
        a = RankingInstance(rng.normal(size=(3, 4)), [0, 1, 0])
        b = RankingInstance(rng.normal(size=(5, 4)), [1, 0, 0, 1, 0])
        cfg = LossConfig(policy="greedy")
        g, value = supervised_gradient_batch(params, [a, b], cfg, rng=make_rng(0))
        ga, va = supervised_gradient_batch(params, [a], cfg, rng=make_rng(0))
        gb, vb = supervised_gradient_batch(params, [b], cfg, rng=make_rng(0))
        assert value == pytest.approx((va + vb) / 2)
        np.testing.assert_allclose(g.flat(), (ga.flat() + gb.flat()) / 2, atol=1e-14)

    @pytest.mark.slow
    def test_supervised_unbiased_small_sample(self):
        from seq2slate.verify import supervised_estimator_error

        assert supervised_estimator_error(draws=40_000) < 0.03


def _sampled_perm(params, inst, seed):
    """The permutation the estimator draws first from ``make_rng(seed)``."""
    from seq2slate import kernels
    from seq2slate.model import forward_batch

    return forward_batch(params, inst.features[None], kernels.SAMPLE, rng=make_rng(seed)).perm[0]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 4))
def test_expected_loss_is_probability_weighted_sum(seed, n):
    params = model(seed)
    rng = make_rng(seed)
    inst = RankingInstance(rng.normal(size=(n, 4)), rng.integers(0, 2, size=n))
    cfg = LossConfig()
    direct = 0.0
    for perm in itertools.permutations(range(n)):
        t = decode_forced(params, inst, perm)
        direct += math.exp(t.log_prob) * sequence_loss(t.scores, inst.labels, perm, cfg)
    assert abs(expected_loss_enumerate(params, inst, cfg) - direct) < 1e-10
