"""
Tests for the quantile critic, soft targets, losses and target tracking

Copyright (c) 2026 flow-drl authors
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flow_drl.core import diffcore as dc
from flow_drl.core.diffcore import CompGraph, NonFiniteError, ParamSet, ShapeError
from flow_drl.distcritic import (
    CriticBatch,
    CriticEnsemble,
    compute_targets,
    critic_loss,
    critic_update,
    ema_update,
    mean_critic_loss,
    quantile_fractions,
    quantile_huber_loss,
    soft_target_quantiles,
    update_targets,
    wasserstein1,
)


def _batch(rng, size=32, state_dim=2, action_dim=1):
    return CriticBatch(
        s=rng.standard_normal((size, state_dim)),
        a=rng.uniform(-1.0, 1.0, (size, action_dim)),
        r=rng.standard_normal(size),
        s_next=rng.standard_normal((size, state_dim)),
        terminal=np.zeros(size),
    )


def _ensemble(seed=0, **kwargs):
    options = dict(state_dim=2, action_dim=1, n_quantiles=5, hidden_dim=16)
    options.update(kwargs)
    return CriticEnsemble(rng=np.random.default_rng(seed), **options)


class TestQuantileCritic:
    """Quantile fractions and network outputs."""

    def test_fractions(self):
        """Midpoint fractions (2i-1)/(2N)."""
        np.testing.assert_array_equal(quantile_fractions(1), [0.5])
        np.testing.assert_allclose(quantile_fractions(4), [0.125, 0.375, 0.625, 0.875])

    def test_fraction_count(self):
        """N must be positive."""
        with pytest.raises(ValueError):
            quantile_fractions(0)

    def test_zero_initialized_outputs(self, rng):
        """Fresh critics predict all-zero quantiles, online and target alike."""
        ensemble = _ensemble()
        s, a = rng.standard_normal((4, 2)), rng.uniform(-1, 1, (4, 1))
        for i in range(len(ensemble)):
            np.testing.assert_array_equal(
                ensemble.quantiles(s, a, which=i).values, np.zeros((4, 5))
            )
            np.testing.assert_array_equal(
                ensemble.quantiles(s, a, which=i, target=True).values, np.zeros((4, 5))
            )

    def test_member_names(self):
        """Twin critics are named critic1 and critic2 with matching targets."""
        ensemble = _ensemble()
        assert [m.params.name for m in ensemble.members] == ["critic1", "critic2"]
        assert ensemble.members[0].target.name == "critic1_target"
        assert len(_ensemble(twin=False)) == 1

    def test_dimension_mismatch(self, rng):
        """Wrong state or action width raises ShapeError."""
        ensemble = _ensemble()
        with pytest.raises(ShapeError):
            ensemble.quantiles(np.zeros((2, 3)), np.zeros((2, 1)))
        with pytest.raises(ShapeError):
            ensemble.quantiles(np.zeros((2, 2)), np.zeros((2, 2)))

    def test_unknown_kind(self):
        """Only quantile and mean critics exist."""
        with pytest.raises(ValueError, match="critic kind"):
            _ensemble(kind="categorical")

    def test_min_mean_blocks_critic_gradients(self, rng):
        """The actor-side Q estimate never writes into critic gradients."""
        ensemble = _ensemble()
        for member in ensemble.members:
            member.params["mlp2.w"].value = rng.standard_normal(member.params["mlp2.w"].value.shape)
            member.params.zero_grads()
        graph = CompGraph()
        a = graph.variable(rng.uniform(-1, 1, (3, 1)))
        q = ensemble.min_mean(graph, rng.standard_normal((3, 2)), a)
        grads = graph.backward(dc.sum(q))
        for member in ensemble.members:
            for entry in member.params:
                assert np.all(entry.grad == 0.0)
        assert np.any(grads.of(a) != 0.0)

    def test_mean_q_is_min_over_members(self, rng):
        """mean_q is the elementwise minimum of member means."""
        ensemble = _ensemble()
        ensemble.members[0].params["mlp2.b"].value = np.full(5, 1.0)
        ensemble.members[1].params["mlp2.b"].value = np.full(5, -2.0)
        q = ensemble.mean_q(np.zeros((2, 2)), np.zeros((2, 1)))
        np.testing.assert_array_equal(q, [-2.0, -2.0])


class TestWasserstein:
    """W1 between uniform quantile sets."""

    def test_shifted_sets(self):
        """Shifting every atom by 1 costs 1."""
        assert wasserstein1([0.0, 1.0], [1.0, 2.0]) == 1.0

    def test_order_invariant(self):
        """Atoms are sorted before matching."""
        assert wasserstein1([3.0, 0.0, 1.0], [1.0, 3.0, 0.0]) == 0.0

    def test_size_mismatch(self):
        """Sets of different size are rejected."""
        with pytest.raises(ShapeError):
            wasserstein1([0.0], [0.0, 1.0])


class TestSoftTargets:
    """Entropy-augmented distributional targets."""

    def test_terminal_is_reward(self):
        """Terminal transitions do not bootstrap."""
        y = soft_target_quantiles(
            np.array([1.0]), np.array([1.0]), [np.array([[5.0, 7.0]])], np.array([3.0]), 0.2, 0.99
        )
        np.testing.assert_array_equal(y, [[1.0, 1.0]])

    def test_discounted_bootstrap(self):
        """y = r + gamma * theta' with alpha = 0."""
        y = soft_target_quantiles(
            np.array([0.0]), np.array([0.0]), [np.array([[2.0]])], np.array([0.0]), 0.0, 0.99
        )
        assert y[0, 0] == pytest.approx(1.98)

    def test_entropy_term(self):
        """The next log-probability is subtracted from every atom."""
        y = soft_target_quantiles(
            np.array([0.0]), np.array([0.0]), [np.array([[-1.0]])], np.array([2.0]), 1.0, 1.0
        )
        assert y[0, 0] == -3.0

    def test_reward_shift(self, rng):
        """Adding c to every reward adds c to every target atom."""
        q = [rng.standard_normal((6, 4)), rng.standard_normal((6, 4))]
        r = rng.standard_normal(6)
        logp = rng.standard_normal(6)
        terminal = (rng.uniform(size=6) < 0.3).astype(float)
        base = soft_target_quantiles(r, terminal, q, logp, 0.1, 0.9)
        shifted = soft_target_quantiles(r + 2.5, terminal, q, logp, 0.1, 0.9)
        np.testing.assert_allclose(shifted, base + 2.5, rtol=0.0, atol=1e-12)

    @pytest.mark.parametrize("c", [-3.0, 0.5, 40.0])
    def test_translation_equivariance(self, rng, c):
        """Shifting every target critic by c adds gamma * c on continuing rows only."""
        q = [rng.standard_normal((6, 4)), rng.standard_normal((6, 4))]
        r = rng.standard_normal(6)
        logp = rng.standard_normal(6)
        terminal = np.array([0.0, 1.0, 0.0, 0.0, 1.0, 0.0])
        gamma = 0.9
        base = soft_target_quantiles(r, terminal, q, logp, 0.1, gamma)
        shifted = soft_target_quantiles(r, terminal, [x + c for x in q], logp, 0.1, gamma)
        expected = base + gamma * c * (1.0 - terminal)[:, None]
        np.testing.assert_allclose(shifted, expected, rtol=0.0, atol=1e-12)
        np.testing.assert_array_equal(shifted[terminal == 1.0], base[terminal == 1.0])

    @settings(max_examples=60, deadline=None)
    @given(
        arrays(np.float64, (2, 3, 4), elements=st.floats(-100.0, 100.0)),
        arrays(np.float64, (3,), elements=st.floats(-10.0, 10.0)),
        st.floats(0.0, 2.0),
        st.floats(0.01, 0.999),
    )
    def test_min_rule_is_conservative(self, next_quantiles, logp, alpha, gamma):
        """The bootstrapped mean never exceeds either target critic's soft mean."""
        r = np.zeros(3)
        y = soft_target_quantiles(r, np.zeros(3), list(next_quantiles), logp, alpha, gamma)
        bootstrap = np.mean(y, axis=1) / gamma
        for q in next_quantiles:
            soft_mean = np.mean(q, axis=1) - alpha * logp
            assert np.all(bootstrap <= soft_mean + 1e-9 * (1.0 + np.abs(soft_mean)))

    def test_min_rule_takes_whole_vector(self):
        """The critic with the smaller mean supplies every atom."""
        q1 = np.array([[0.0, 10.0]])
        q2 = np.array([[3.0, 4.0]])
        y = soft_target_quantiles(np.zeros(1), np.zeros(1), [q1, q2], np.zeros(1), 0.0, 1.0)
        np.testing.assert_array_equal(y, q2)

    def test_ties_go_to_first_critic(self):
        """Equal means select the first critic."""
        q1 = np.array([[0.0, 2.0]])
        q2 = np.array([[1.0, 1.0]])
        y = soft_target_quantiles(np.zeros(1), np.zeros(1), [q1, q2], np.zeros(1), 0.0, 1.0)
        np.testing.assert_array_equal(y, q1)

    def test_compute_targets_from_zero_critics(self, rng):
        """Zero-initialized targets leave r - gamma * alpha * log pi."""
        ensemble = _ensemble()
        batch = _batch(rng, size=4)
        logp = rng.standard_normal(4)
        y = compute_targets(ensemble, batch, rng.uniform(-1, 1, (4, 1)), logp, 0.5, 0.9)
        expected = batch.r - 0.9 * 0.5 * logp
        np.testing.assert_allclose(y, np.repeat(expected[:, None], 5, axis=1), atol=1e-12)


class TestQuantileHuberLoss:
    """Asymmetric Huber quantile regression."""

    def test_zero_at_targets(self):
        """Quantiles equal to every target give zero loss."""
        loss = quantile_huber_loss(np.full((3, 2), 1.5), np.full((3, 4), 1.5))
        assert float(dc.value_of(loss)) == 0.0

    def test_single_quantile(self):
        """N=1, theta=0, y=1: 0.5 * 0.5 * 1^2."""
        loss = quantile_huber_loss(np.zeros((1, 1)), np.ones((1, 1)))
        assert float(dc.value_of(loss)) == pytest.approx(0.25)

    def test_asymmetric_weighting(self):
        """Overestimating the low quantile is weighted by 1 - tau."""
        loss = quantile_huber_loss(np.array([[0.5, 0.0]]), np.zeros((1, 1)))
        assert float(dc.value_of(loss)) == pytest.approx(0.046875)

    def test_linear_tail(self):
        """Beyond kappa the penalty grows linearly."""
        loss = quantile_huber_loss(np.zeros((1, 1)), np.full((1, 1), 3.0), kappa=1.0)
        assert float(dc.value_of(loss)) == pytest.approx(0.5 * (3.0 - 0.5))

    @settings(max_examples=50, deadline=None)
    @given(
        arrays(np.float64, (2, 3), elements=st.floats(-50.0, 50.0)),
        arrays(np.float64, (2, 4), elements=st.floats(-50.0, 50.0)),
        st.floats(0.01, 10.0),
    )
    def test_nonnegative(self, current, targets, kappa):
        """The loss is never negative."""
        assert float(dc.value_of(quantile_huber_loss(current, targets, kappa))) >= 0.0

    @pytest.mark.parametrize("kappa", [0.0, -1.0])
    def test_kappa_must_be_positive(self, kappa):
        """kappa <= 0 is rejected."""
        with pytest.raises(ValueError, match="kappa"):
            quantile_huber_loss(np.zeros((1, 1)), np.zeros((1, 1)), kappa)

    def test_batch_mismatch(self):
        """Targets must share the batch dimension."""
        with pytest.raises(ShapeError):
            quantile_huber_loss(np.zeros((2, 3)), np.zeros((3, 3)))

    def test_gradient_sign(self):
        """Quantiles below every target are pushed up."""
        graph = CompGraph()
        theta = graph.variable(np.zeros((1, 3)))
        grads = graph.backward(quantile_huber_loss(theta, np.ones((1, 5))))
        assert np.all(grads.of(theta) < 0.0)


class TestMeanCriticLoss:
    """Squared TD error used by the expectation-critic ablation."""

    def test_zero(self):
        """Exact predictions give zero loss."""
        assert float(dc.value_of(mean_critic_loss(np.ones(3), np.ones(3)))) == 0.0

    def test_unhalved(self):
        """An error of 2 costs 4."""
        assert float(dc.value_of(mean_critic_loss(np.zeros(1), np.full(1, 2.0)))) == 4.0

    def test_ratio_to_single_quantile(self):
        """With N=1 and a huge kappa the quantile loss is a quarter of the squared error."""
        mean_loss = float(dc.value_of(mean_critic_loss(np.zeros(1), np.full(1, 2.0))))
        quantile_loss = float(
            dc.value_of(quantile_huber_loss(np.zeros((1, 1)), np.full((1, 1), 2.0), kappa=1e6))
        )
        assert mean_loss / quantile_loss == pytest.approx(4.0)

    def test_shape_mismatch(self):
        """Prediction and targets must match exactly."""
        with pytest.raises(ShapeError):
            mean_critic_loss(np.zeros(2), np.zeros(3))


class TestEMA:
    """Target network tracking."""

    def _pair(self):
        online = ParamSet("online")
        online.add("w", np.full(3, 2.0))
        return online, online.copy("target")

    def test_rate_zero_keeps_target(self):
        """rate 0 leaves the target unchanged."""
        online, target = self._pair()
        online["w"].value = np.full(3, 10.0)
        ema_update(online, target, 0.0)
        np.testing.assert_array_equal(target["w"].value, np.full(3, 2.0))

    def test_rate_one_copies(self):
        """rate 1 copies the online weights."""
        online, target = self._pair()
        online["w"].value = np.full(3, 10.0)
        ema_update(online, target, 1.0)
        np.testing.assert_array_equal(target["w"].value, np.full(3, 10.0))

    def test_interpolation(self):
        """rate 0.005 moves the target 0.5% of the way."""
        online, target = self._pair()
        online["w"].value = np.full(3, 102.0)
        ema_update(online, target, 0.005)
        np.testing.assert_allclose(target["w"].value, np.full(3, 2.5))

    def test_rate_range(self):
        """Rates outside [0,1] are rejected."""
        online, target = self._pair()
        with pytest.raises(ValueError):
            ema_update(online, target, 1.5)

    @settings(max_examples=60, deadline=None)
    @given(
        arrays(np.float64, (4, 3), elements=st.floats(-1e6, 1e6, allow_subnormal=False)),
        st.floats(0.0, 1.0),
    )
    def test_fixed_point(self, weights, rate):
        """A target equal to the online weights stays put up to round-off."""
        online = ParamSet("online")
        online.add("w", weights)
        target = online.copy("target")
        ema_update(online, target, rate)
        np.testing.assert_allclose(
            target["w"].value, weights, rtol=2 * np.finfo(np.float64).eps, atol=0.0
        )


class TestCriticUpdate:
    """Gradient steps on the critic ensemble."""

    def test_loss_decreases(self, rng):
        """Repeated steps on a fixed batch drive the loss down."""
        ensemble = _ensemble(lr=1e-3)
        batch = _batch(rng)
        targets = rng.standard_normal((32, 5)) + batch.r[:, None]
        losses = [critic_update(ensemble, batch, targets)["critic_loss_1"] for _ in range(100)]
        slope = np.polyfit(np.arange(100), losses, 1)[0]
        assert slope < 0.0
        assert losses[-1] < losses[0]

    def test_gradients_match_finite_differences(self, rng):
        """Backward gradients agree with central differences on critic weights."""
        ensemble = _ensemble()
        params = ensemble.members[0].params
        params["mlp2.w"].value = 0.5 * rng.standard_normal(params["mlp2.w"].value.shape)
        batch = _batch(rng, size=8)
        targets = rng.standard_normal((8, 7))

        graph = CompGraph()
        params.zero_grads()
        graph.backward(critic_loss(ensemble, 0, graph, batch, targets, 1.0))

        def loss_at(name, index, value):
            entry = params[name]
            original = entry.value
            perturbed = original.copy()
            perturbed[index] = value
            entry.value = perturbed
            result = float(critic_loss(ensemble, 0, CompGraph(), batch, targets, 1.0).value)
            entry.value = original
            return result

        h = 1e-6
        for name in ("mlp0.w", "mlp1.b", "mlp2.w"):
            entry = params[name]
            for flat in range(min(entry.value.size, 4)):
                index = np.unravel_index(flat, entry.value.shape)
                x = entry.value[index]
                numeric = (loss_at(name, index, x + h) - loss_at(name, index, x - h)) / (2 * h)
                assert entry.grad[index] == pytest.approx(numeric, rel=1e-4, abs=1e-7)

    def test_deterministic(self, rng):
        """Same seed and batch give bit-identical weights."""
        batch = _batch(rng)
        targets = rng.standard_normal((32, 5))
        first, second = _ensemble(seed=7), _ensemble(seed=7)
        for ensemble in (first, second):
            for _ in range(3):
                critic_update(ensemble, batch, targets)
        for m1, m2 in zip(first.members, second.members):
            for e1, e2 in zip(m1.params, m2.params):
                assert np.array_equal(e1.value, e2.value)

    def test_non_finite_targets(self, rng):
        """NaN targets abort the update before any weight moves."""
        ensemble = _ensemble()
        before = ensemble.members[0].params.copy("before")
        targets = np.full((32, 5), np.nan)
        with pytest.raises(NonFiniteError) as excinfo:
            critic_update(ensemble, _batch(rng), targets)
        assert excinfo.value.payload["critic"] == 1
        for e1, e2 in zip(ensemble.members[0].params, before):
            assert np.array_equal(e1.value, e2.value)

    def test_targets_untouched_by_update(self, rng):
        """Critic steps never move or differentiate the target networks."""
        ensemble = _ensemble()
        critic_update(ensemble, _batch(rng), rng.standard_normal((32, 5)))
        for member in ensemble.members:
            for entry in member.target:
                assert np.all(entry.grad == 0.0)
            np.testing.assert_array_equal(member.target["mlp2.w"].value, 0.0)

    def test_update_targets_tracks_online(self, rng):
        """After an update the EMA moves targets toward the online weights."""
        ensemble = _ensemble()
        critic_update(ensemble, _batch(rng), rng.standard_normal((32, 5)) + 3.0)
        update_targets(ensemble, 1.0)
        for member in ensemble.members:
            for entry in member.target:
                np.testing.assert_array_equal(entry.value, member.params[entry.name].value)

    def test_mean_critic_kind(self, rng):
        """The expectation critic has one output and trains on squared error."""
        ensemble = _ensemble(kind="mean", twin=False)
        batch = _batch(rng)
        targets = np.repeat(batch.r[:, None], 1, axis=1)
        losses = critic_update(ensemble, batch, targets)
        assert set(losses) == {"critic_loss_1"}
        assert losses["critic_loss_1"] == pytest.approx(float(np.mean(batch.r**2)))
        assert ensemble.quantiles(batch.s, batch.a).values.shape == (32, 1)
