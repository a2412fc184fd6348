"""Message machinery: sampling laws, gating, KL closed forms vs Monte Carlo."""

import numpy as np
import pytest

from commlight import commchannel as cc
from commlight.diffcore import Tape, Tensor, backward


class TestSampleMessage:
    def test_mean_mode_returns_mu(self):
        rng = np.random.default_rng(0)
        mu = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        out = cc.sample_message(mu, np.zeros(5), rng, mode="mean")
        np.testing.assert_array_equal(out, mu)

    def test_tiny_variance_collapses_to_mu(self):
        rng = np.random.default_rng(0)
        mu = np.array([1.0, -2.0, 0.5, 0.0, 3.0])
        out = cc.sample_message(mu, np.full(5, -80.0), rng)
        np.testing.assert_allclose(out, mu, atol=1e-12)

    def test_sampling_moments(self):
        rng = np.random.default_rng(1)
        draws = np.stack([cc.sample_message(np.zeros(5), np.zeros(5), rng)
                          for _ in range(100_000)])
        assert np.all(np.abs(draws.mean(axis=0)) < 0.02)
        assert np.all(np.abs(draws.var(axis=0) - 1.0) < 0.03)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            cc.sample_message(np.zeros(5), np.zeros(5),
                              np.random.default_rng(0), mode="argmax")

    def test_reparameterized_gradient_through_mu(self):
        # grad of E[(m - a)^2] wrt mu is 2(mu - a); check the sampled
        # estimator against finite differences through the same noise
        rng = np.random.default_rng(2)
        noise = rng.standard_normal((20_000, 5))
        a = np.array([0.3, -0.7, 1.1, 0.0, 2.0])
        mu0 = np.array([0.5, 0.5, 0.5, 0.5, 0.5])
        logvar0 = np.full(5, -1.0)

        def estimator(mu):
            t = Tape()
            mu_t = t.leaf(np.tile(mu, (noise.shape[0], 1)))
            lv_t = t.leaf(np.tile(logvar0, (noise.shape[0], 1)))
            m = cc.sample_message_t(t, mu_t, lv_t, noise)
            loss = t.mean(t.sqerr(m, t.leaf(np.tile(a, (noise.shape[0], 1)))))
            g = backward(t, loss)[id(mu_t)]
            return loss.item(), g.sum(axis=0)

        loss0, grad = estimator(mu0)
        h = 1e-5
        for k in range(5):
            up, dn = mu0.copy(), mu0.copy()
            up[k] += h
            dn[k] -= h
            fd = (estimator(up)[0] - estimator(dn)[0]) / (2 * h)
            assert abs(grad[k] - fd) <= 1e-6 * max(1.0, abs(grad[k]))
        # and the analytic expectation is in Monte-Carlo range
        np.testing.assert_allclose(grad, 2 * (mu0 - a) / 5.0, atol=0.02)


class TestGumbelSigmoid:
    def test_rejects_bad_temperature(self):
        with pytest.raises(ValueError):
            cc.gumbel_sigmoid(0.0, 0.0, np.random.default_rng(0))

    def test_huge_temperature_collapses_to_half(self):
        rng = np.random.default_rng(3)
        out = cc.gumbel_sigmoid(np.full(1000, 3.0), 1e9, rng)
        np.testing.assert_allclose(out, 0.5, atol=1e-6)

    @pytest.mark.parametrize("logit", [-2.0, -1.0, 0.0, 1.0, 2.0])
    def test_exceedance_law_matches_logistic_cdf(self, logit):
        # P(c > 1/2) = sigmoid(logit) for every temperature
        rng = np.random.default_rng(4)
        n = 100_000
        draws = cc.gumbel_sigmoid(np.full(n, logit), 0.67, rng)
        p = 1.0 / (1.0 + np.exp(-logit))
        frac = float(np.mean(draws > 0.5))
        assert abs(frac - p) <= 3.0 * np.sqrt(p * (1 - p) / n)

    def test_sigma_of_one(self):
        rng = np.random.default_rng(5)
        n = 100_000
        draws = cc.gumbel_sigmoid(np.full(n, 1.0), 0.67, rng)
        assert abs(float(np.mean(draws > 0.5)) - 0.7311) <= 0.005

    def test_differentiable_in_logit(self):
        rng = np.random.default_rng(6)
        noise = cc.logistic_noise(rng, (7,))

        def f(x, t):
            return t.sum(cc.gumbel_sigmoid_t(t, x, 0.67, noise))

        from commlight.diffcore import finite_difference_check
        err = finite_difference_check(f, Tensor(rng.normal(size=7)), 1e-5)
        assert err <= 1e-6


class TestHardGateAndGate:
    def test_threshold_strictly_above_half(self):
        np.testing.assert_array_equal(
            cc.hard_gate(np.array([0.51, 0.5, 0.49])), [1, 0, 0])

    def test_pattern(self):
        np.testing.assert_array_equal(
            cc.hard_gate(np.array([0.9, 0.1, 0.6, 0.4, 0.5])), [1, 0, 1, 0, 0])

    def test_bit_rate_at_zero_logit(self):
        rng = np.random.default_rng(7)
        draws = cc.gumbel_sigmoid(np.zeros(100_000), 0.67, rng)
        assert abs(cc.hard_gate(draws).mean() - 0.5) <= 0.01

    def test_gate_identity_and_zero(self):
        m = np.array([1.0, -2.0, 3.0, -4.0, 5.0])
        np.testing.assert_array_equal(cc.gate(m, np.ones(5)), m)
        np.testing.assert_array_equal(cc.gate(m, np.zeros(5)), np.zeros(5))
        np.testing.assert_array_equal(
            cc.gate(m, np.array([1.0, 0, 1.0, 0, 0])), [1.0, 0, 3.0, 0, 0])

    def test_gate_length_mismatch(self):
        with pytest.raises(ValueError):
            cc.gate(np.ones(5), np.ones(4))


class TestInbox:
    def test_no_neighbors_is_zero_vector(self):
        out = cc.assemble_inbox({})
        assert out.shape == (20,)
        assert not out.any()

    def test_single_north_slot(self):
        out = cc.assemble_inbox({0: np.ones(5)})
        np.testing.assert_array_equal(out[:5], 1.0)
        assert not out[5:].any()

    def test_order_independence(self):
        a = {0: np.full(5, 1.0), 2: np.full(5, 2.0)}
        b = {2: np.full(5, 2.0), 0: np.full(5, 1.0)}
        np.testing.assert_array_equal(cc.assemble_inbox(a), cc.assemble_inbox(b))

    def test_duplicate_slot_rejected(self):
        with pytest.raises(ValueError):
            cc.assemble_inbox({5: np.ones(5)})


class TestGaussianKL:
    def test_standard_normal_is_zero(self):
        assert cc.gaussian_kl(np.zeros(5), np.zeros(5)) == 0.0

    def test_mean_shift_two(self):
        assert cc.gaussian_kl([2, 0, 0, 0, 0], np.zeros(5)) == pytest.approx(2.0)

    def test_nonnegative(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            mu = rng.normal(size=5) * 3
            lv = rng.normal(size=5) * 2
            assert cc.gaussian_kl(mu, lv) >= -1e-12

    def test_matches_monte_carlo_log_ratio(self):
        rng = np.random.default_rng(9)
        n = 1_000_000
        for _ in range(20):
            mu = rng.uniform(0.5, 2.0, size=5) * rng.choice([-1.0, 1.0], size=5)
            lv = rng.uniform(-1.0, 1.0, size=5)
            std = np.exp(0.5 * lv)
            x = mu + std * rng.standard_normal((n, 5))
            log_q = -0.5 * (((x - mu) / std) ** 2 + lv + np.log(2 * np.pi))
            log_p = -0.5 * (x ** 2 + np.log(2 * np.pi))
            mc = float(np.mean(np.sum(log_q - log_p, axis=1)))
            closed = cc.gaussian_kl(mu, lv)
            assert abs(closed - mc) <= 0.01 * abs(closed)


class TestBernoulliKL:
    def test_matched_prior_zero(self):
        assert cc.bernoulli_kl(0.5, 0.5) == 0.0

    def test_degenerate_one(self):
        assert cc.bernoulli_kl(1.0, 0.5) == pytest.approx(np.log(2.0))

    def test_quarter(self):
        assert cc.bernoulli_kl(0.75, 0.5) == pytest.approx(0.1308, abs=1e-4)

    def test_rejects_degenerate_prior(self):
        with pytest.raises(ValueError):
            cc.bernoulli_kl(0.5, 0.0)

    def test_matches_monte_carlo_log_ratio(self):
        rng = np.random.default_rng(10)
        n = 1_000_000
        for _ in range(20):
            # keep p away from 1/2 so the MC oracle resolves 1% reliably
            p = 0.5 + rng.uniform(0.2, 0.47) * rng.choice([-1.0, 1.0])
            x = rng.random(n) < p
            log_ratio = np.where(x, np.log(p / 0.5), np.log((1 - p) / 0.5))
            mc = float(np.mean(log_ratio))
            closed = cc.bernoulli_kl(p, 0.5)
            assert abs(closed - mc) <= 0.01 * abs(closed)

    def test_logit_space_form_agrees_with_probability_form(self):
        rng = np.random.default_rng(11)
        logits = rng.normal(size=40) * 6
        t = Tape()
        out = cc.bernoulli_kl_from_logits_t(t, t.leaf(logits))
        p = 1.0 / (1.0 + np.exp(-logits))
        expect = np.array([cc.bernoulli_kl(pi, 0.5) for pi in p])
        np.testing.assert_allclose(out.data, expect, atol=1e-12)
        # stays finite far beyond where the p-form degenerates
        big = cc.bernoulli_kl_from_logits_t(t, t.leaf(np.array([200.0, -200.0])))
        np.testing.assert_allclose(big.data, np.log(2.0), atol=1e-9)


class TestMessagePacket:
    def test_invariants(self):
        rng = np.random.default_rng(12)
        m = rng.normal(size=5)
        gates = {1: rng.random(5), 3: rng.random(5)}
        pkt = cc.MessagePacket.build(0, np.zeros(5), np.zeros(5), m, gates)
        for j, c in pkt.gates.items():
            np.testing.assert_array_equal(pkt.gated[j], m * c)
            np.testing.assert_array_equal(pkt.hard_bits[j], (c > 0.5).astype(int))
        assert set(pkt.gates) == {1, 3}
