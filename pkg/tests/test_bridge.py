import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ensemble_bridge import (
    BridgeProblem,
    ControllabilityError,
    InvalidInputError,
    MarkovBridge,
    continuous_feedforward,
    continuous_gains,
    deterministic_steer,
    make_family,
    make_noise,
    markov_bridge_control,
    phi_lags,
    synthesize_discrete,
)

import oracles


def scalar_phi_grid(k, t_f=1.0):
    dt = t_f / k
    return oracles.scalar_phi((k - np.arange(k)) * dt).reshape(k, 1, 1)


class TestBridgeProblem:
    @pytest.mark.parametrize("kw", [
        {"t_f": 0.0}, {"penalty_a": 0.0}, {"penalty_a": math.inf}, {"steps_k": 0},
        {"steps_k": 2.5}, {"eps": -1.0}, {"xf": [0.0, 1.0]}, {"x0": [math.nan]},
    ])
    def test_rejects(self, kw):
        base = dict(x0=[0.0], xf=[1.0])
        base.update(kw)
        with pytest.raises(InvalidInputError):
            BridgeProblem(**base)

    def test_grid(self):
        prob = BridgeProblem([0.0], [0.0], t_f=2.0, steps_k=8)
        assert prob.dt == 0.25
        assert prob.grid[-1] == 2.0 and prob.grid.size == 9

    def test_dimension_mismatch(self, brownian):
        with pytest.raises(InvalidInputError):
            synthesize_discrete(brownian, BridgeProblem([0.0, 0.0], [0.0, 0.0]))


class TestDiscreteSynthesis:
    def test_single_step(self, brownian):
        prob = BridgeProblem([0.0], [1.5], t_f=2.0, penalty_a=3.0, steps_k=1)
        g = synthesize_discrete(brownian, prob)
        assert g.open_loop[0, 0] == pytest.approx(1.5 / (2.0 + 1.0 / 6.0), rel=1e-14)
        assert g.n_gain_blocks == 0
        assert not g.noise_gains().any()

    @pytest.mark.parametrize("x0,xf", [(0.0, 1.0), (0.7, -0.4)])
    def test_matches_dynamic_programming(self, scalar_theta, x0, xf):
        k, a = 64, 1e6
        prob = BridgeProblem([x0], [xf], penalty_a=a, steps_k=k)
        g = synthesize_discrete(scalar_theta, prob)
        y = [xf - oracles.E_MINUS_1 * x0]
        v, K = oracles.dp_gains(scalar_phi_grid(k), prob.dt, a, y)
        assert np.max(np.abs(g.noise_gains() - K)) <= 1e-6 * np.max(np.abs(K))
        np.testing.assert_allclose(g.open_loop, v, rtol=1e-6)

    def test_matches_dynamic_programming_multi_input(self):
        ens = make_family("coupled_3x2")
        prob = BridgeProblem([0.1, 0.0, -0.2], [1.0, 0.5, 0.0], penalty_a=1e4, steps_k=24)
        g = synthesize_discrete(ens, prob)
        Phi = phi_lags(ens, (prob.steps_k - np.arange(prob.steps_k)) * prob.dt)
        y = prob.xf - sum(w * oracles.taylor_exp(A, 1.0) for w, A in zip(ens.weights, ens.A)) @ prob.x0
        v, K = oracles.dp_gains(Phi, prob.dt, prob.penalty_a, y)
        assert np.max(np.abs(g.noise_gains() - K)) <= 1e-8 * np.max(np.abs(K))
        np.testing.assert_allclose(g.open_loop, v, rtol=1e-8, atol=1e-10)

    def test_truncated_is_anticipative_law_without_diagonal(self, scalar_theta):
        k, a = 32, 1e3
        prob = BridgeProblem([0.0], [1.0], penalty_a=a, steps_k=k)
        _, K_ant = oracles.dp_gains(scalar_phi_grid(k), prob.dt, a, [1.0], anticipative=True)
        g = synthesize_discrete(scalar_theta, prob, convention="truncated")
        strict = np.tril(np.ones((k, k), dtype=bool), -1)
        np.testing.assert_allclose(g.noise_gains()[strict], K_ant[strict], rtol=1e-9)

    def test_truncated_formula(self, scalar_theta):
        k, a = 16, 50.0
        prob = BridgeProblem([0.0], [1.0], penalty_a=a, steps_k=k)
        Phi = scalar_phi_grid(k)[:, 0, 0]
        M = np.array([np.sum(Phi[j:] ** 2) * prob.dt + 0.5 / a for j in range(k)])
        K = synthesize_discrete(scalar_theta, prob, convention="truncated").noise_gains()[..., 0, 0]
        for i in range(k):
            for j in range(i):
                assert K[i, j] == pytest.approx(Phi[i] * Phi[j] / M[j], rel=1e-12)
        assert synthesize_discrete(scalar_theta, prob).open_loop[3, 0] == pytest.approx(
            Phi[3] / M[0], rel=1e-12)

    def test_unknown_convention(self, brownian):
        with pytest.raises(InvalidInputError):
            synthesize_discrete(brownian, BridgeProblem([0.0], [0.0]), convention="nope")

    def test_gains_finite_for_small_penalty(self, scalar_theta):
        g = synthesize_discrete(scalar_theta, BridgeProblem([0.0], [1.0], penalty_a=1e-8, steps_k=16))
        assert np.all(np.isfinite(g.noise_gains()))


class TestRegularizedLimit:
    """Relative gain error against the a -> inf limit shrinks like 1/a."""

    K_STEPS = 64

    def _errors(self, convention, a):
        prob = BridgeProblem([0.0], [0.0], penalty_a=a, steps_k=self.K_STEPS)
        K = synthesize_discrete(make_family("brownian"), prob, convention).noise_gains()[..., 0, 0]
        grid = prob.grid
        shift = 1 if convention == "optimal" else 0
        i, j = np.tril_indices(self.K_STEPS, -1)
        limit = 1.0 / (prob.t_f - grid[j + shift])
        return np.max(np.abs(K[i, j] - limit) / limit)

    @pytest.mark.parametrize("convention", ["optimal", "truncated"])
    def test_ratio_per_two_decades(self, convention):
        e2, e4, e6 = (self._errors(convention, a) for a in (1e2, 1e4, 1e6))
        assert e2 > e4 > e6
        # the smallest remaining horizon is one step, so 1/(2a) must be small against it
        assert 90 <= e4 / e6 <= 110
        assert e6 <= 1e-3

    def test_brownian_closed_form(self):
        a, k = 1e6, 512
        prob = BridgeProblem([0.0], [0.0], penalty_a=a, steps_k=k)
        g = synthesize_discrete(make_family("brownian"), prob)
        grid = prob.grid
        for i, j in [(5, 2), (300, 100), (511, 509)]:
            assert g.noise_gain(i, j)[0, 0] == pytest.approx(
                1.0 / (1.0 - grid[j + 1] + 0.5 / a), rel=1e-12)


def _agreement_gaps(ens, k, convention):
    rng = np.random.default_rng(3)
    d = ens.state_dim
    prob = BridgeProblem(rng.normal(size=d), rng.normal(size=d), penalty_a=1e6, steps_k=k)
    Kd = synthesize_discrete(ens, prob, convention).noise_gains()
    Kc = continuous_gains(ens, prob).noise_gains()
    grid = prob.grid
    gaps = []
    for j in range(k):
        if prob.t_f - grid[j] < 10 * prob.dt - 1e-12:
            continue
        ref = np.linalg.norm(Kc[j + 1:, j], axis=(1, 2))
        gap = np.linalg.norm(Kd[j + 1:, j] - Kc[j + 1:, j], axis=(1, 2))
        gaps.append((j, np.max(gap / ref)))
    return prob, gaps


AGREEMENT_FAMILIES = [("brownian", {}), ("scalar_theta_drift", {}), ("shifted_drift", {"dim": 2})]


class TestContinuousDiscreteAgreement:
    @pytest.mark.parametrize("name,params", AGREEMENT_FAMILIES)
    def test_truncated_within_tolerance(self, name, params):
        prob, gaps = _agreement_gaps(make_family(name, **params), 256, "truncated")
        tol = max(1e-3, 5 * prob.dt)
        assert max(g for _, g in gaps) <= tol

    @pytest.mark.parametrize("name,params", AGREEMENT_FAMILIES)
    def test_optimal_within_one_step_shift(self, name, params):
        # the causal optimum lags the continuous law by one step: relative gap ~ dt / (t_f - t_{j+1})
        prob, gaps = _agreement_gaps(make_family(name, **params), 256, "optimal")
        tol = max(1e-3, 5 * prob.dt)
        for j, g in gaps:
            assert g <= tol + 1.05 * prob.dt / (prob.t_f - prob.grid[j + 1])

    def test_open_loop_agrees(self, scalar_theta):
        prob = BridgeProblem([0.2], [1.0], penalty_a=1e6, steps_k=256)
        vd = synthesize_discrete(scalar_theta, prob).open_loop
        vc = continuous_gains(scalar_theta, prob).open_loop
        assert np.max(np.abs(vd - vc) / np.abs(vc)) <= max(1e-3, 5 * prob.dt)


class TestCausality:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 31), st.sampled_from(["optimal", "truncated", "continuous"]))
    def test_future_noise_ignored(self, i, kind):
        ens = make_family("coupled_3x2")
        prob = BridgeProblem([0.0, 0.0, 0.0], [1.0, 0.0, -1.0], penalty_a=1e4, steps_k=32)
        g = (continuous_gains(ens, prob) if kind == "continuous"
             else synthesize_discrete(ens, prob, kind))
        dW = make_noise(1, 32, 1.0, 2).increments.copy()
        u = g.controls(dW)
        dW[i:] = np.random.default_rng(i).normal(scale=5.0, size=dW[i:].shape)
        np.testing.assert_array_equal(g.controls(dW)[: i + 1], u[: i + 1])

    def test_no_gain_on_or_above_diagonal(self, scalar_theta):
        g = synthesize_discrete(scalar_theta, BridgeProblem([0.0], [1.0], steps_k=8))
        for i, j in [(3, 3), (2, 5), (8, 1)]:
            with pytest.raises(InvalidInputError):
                g.noise_gain(i, j)

    def test_streaming_matches_batch(self):
        ens = make_family("coupled_3x2")
        prob = BridgeProblem([0.3, 0.0, 0.0], [0.0, 1.0, 0.0], steps_k=40)
        g = synthesize_discrete(ens, prob)
        dW = np.stack([make_noise(s, 40, 1.0, 2).increments for s in range(3)])
        step = g.start(prob, 3)
        streamed = np.stack([step(i, None, dW[:, i - 1] if i else None) for i in range(40)], axis=1)
        np.testing.assert_allclose(streamed, g.controls(dW), atol=1e-12)
        K = g.noise_gains()
        direct = g.open_loop - math.sqrt(prob.eps) * np.einsum("ijab,pjb->pia", K, dW)
        np.testing.assert_allclose(g.controls(dW), direct, atol=1e-12)


class TestContinuousFeedforward:
    def test_first_step_is_steering(self, scalar_theta):
        prob = BridgeProblem([0.0], [1.0], steps_k=64)
        u0 = continuous_feedforward(scalar_theta, prob, make_noise(0, 64, 1.0), 0)
        assert u0[0] == pytest.approx(oracles.scalar_phi(1.0) / oracles.G_SCALAR, rel=1e-9)

    def test_brownian_special_case(self, brownian):
        prob = BridgeProblem([0.0], [0.0], steps_k=128)
        noise = make_noise(11, 128, 1.0)
        gains = continuous_gains(brownian, prob)
        for i in (1, 40, 117):
            expected = -sum(noise.increments[j, 0] / (1.0 - prob.grid[j]) for j in range(i))
            got = continuous_feedforward(brownian, prob, noise, i, gains=gains)
            assert got[0] == pytest.approx(expected, rel=1e-12, abs=1e-14)

    def test_noise_free_is_steering(self):
        ens = make_family("oscillator")
        prob = BridgeProblem([0.5, -0.2], [1.0, 1.0], eps=0.0, steps_k=64)
        steer = deterministic_steer(ens, prob.x0, prob.xf, 1.0)
        noise = make_noise(2, 64, 1.0)
        gains = continuous_gains(ens, prob)
        for i in (0, 17, 63):
            np.testing.assert_allclose(continuous_feedforward(ens, prob, noise, i, gains=gains),
                                       steer(prob.grid[i]), rtol=1e-8, atol=1e-12)

    def test_rejects_bad_index_and_shape(self, brownian):
        prob = BridgeProblem([0.0], [0.0], steps_k=16)
        with pytest.raises(InvalidInputError):
            continuous_feedforward(brownian, prob, make_noise(0, 16, 1.0), 16)
        with pytest.raises(InvalidInputError):
            continuous_feedforward(brownian, prob, np.zeros((8, 1)), 2)

    def test_singular_gramian_names_time(self):
        with pytest.raises(ControllabilityError) as info:
            continuous_gains(make_family("rank_deficient"), BridgeProblem([0, 0], [1, 0], steps_k=8))
        assert info.value.time == 0.0


class TestMarkov:
    def test_examples(self):
        assert markov_bridge_control(0.0, 0.3, 1.0) == 0.0
        assert markov_bridge_control(0.3, 0.5, 1.0) == pytest.approx(-0.6)
        np.testing.assert_allclose(markov_bridge_control([1.0, 2.0], 0.5, 1.0, target=[1.0, 0.0]),
                                   [0.0, -4.0])

    def test_diverges_near_horizon(self):
        assert abs(markov_bridge_control(0.1, 1.0 - 1e-9, 1.0)) > 1e7

    @pytest.mark.parametrize("t", [1.0, 1.5])
    def test_at_or_after_horizon(self, t):
        with pytest.raises(InvalidInputError):
            markov_bridge_control(0.1, t, 1.0)

    def test_requires_brownian(self, scalar_theta):
        with pytest.raises(InvalidInputError):
            MarkovBridge(scalar_theta)
