"""Tests for the categorical straight-through reparameterization and the
Gumbel-softmax baseline."""

import numpy as np
import pytest

from e2ebt import autodiff as ad
from e2ebt import reparam as rp


class _ScriptedRng:
    """Feeds predetermined uniform draws; enough for forcing branches."""

    def __init__(self, draws):
        self.draws = list(draws)

    def random(self, size=None):
        if size is None:
            return self.draws.pop(0)
        return np.array([self.draws.pop(0) for _ in range(size)])


class TestBinaryReparam:
    def test_drawn_one(self):
        z = rp.binary_reparam(ad.tensor(0.7, requires_grad=True), _ScriptedRng([0.0]))
        assert abs(float(z.values) - 1.0) <= 1e-12

    def test_drawn_zero(self):
        z = rp.binary_reparam(ad.tensor(0.7, requires_grad=True), _ScriptedRng([0.99]))
        assert abs(float(z.values) - 0.0) <= 1e-12

    def test_unit_gradient(self):
        p = ad.tensor(0.4, requires_grad=True)
        z = rp.binary_reparam(p, _ScriptedRng([0.9]))
        ad.backward(ad.sum_all(z))
        assert float(p.grad) == 1.0

    def test_empirical_mean(self):
        rng = np.random.default_rng(11)
        draws = [float(rp.binary_reparam(ad.tensor(0.3), rng).values)
                 for _ in range(10_000)]
        assert abs(np.mean(draws) - 0.3) < 0.01 * np.sqrt(10)  # 1e4 draws

    def test_domain_error(self):
        with pytest.raises(ValueError):
            rp.binary_reparam(ad.tensor(1.2), np.random.default_rng(0))


class TestSampleToken:
    def test_greedy_argmax(self):
        s = rp.sample_token(np.array([0.2, 0.5, 0.3]),
                            rp.SamplingStrategy(rp.GREEDY),
                            np.random.default_rng(0))
        np.testing.assert_array_equal(s, [0, 1, 0])

    def test_greedy_tie_breaks_low_index(self):
        s = rp.sample_token(np.array([0.5, 0.5]),
                            rp.SamplingStrategy(rp.GREEDY),
                            np.random.default_rng(0))
        np.testing.assert_array_equal(s, [1, 0])

    def test_stochastic_frequencies(self):
        p = np.array([0.2, 0.5, 0.3])
        n = 100_000
        ids = rp.sample_ids(np.tile(p, (n, 1)),
                            rp.SamplingStrategy(rp.STOCHASTIC),
                            np.random.default_rng(42))
        freqs = np.bincount(ids, minlength=3) / n
        np.testing.assert_allclose(freqs, p, atol=0.01)

    def test_mixed_ratio(self):
        # index 1 is the argmax; stochastic draws pick others 50% of the time
        p = np.array([0.25, 0.5, 0.25])
        n = 40_000
        ids = rp.sample_ids(np.tile(p, (n, 1)),
                            rp.SamplingStrategy(rp.MIXED, stochastic_ratio=0.5),
                            np.random.default_rng(7))
        non_argmax = (ids != 1).mean()
        # P(non-argmax) = ratio * 0.5
        assert abs(non_argmax - 0.25) < 0.01

    def test_invalid_distribution_rejected(self):
        with pytest.raises(ValueError):
            rp.sample_token(np.array([0.9, 0.3]),
                            rp.SamplingStrategy(rp.GREEDY),
                            np.random.default_rng(0))

    def test_strategy_validation(self):
        with pytest.raises(ValueError):
            rp.SamplingStrategy("beamish")
        with pytest.raises(ValueError):
            rp.SamplingStrategy(rp.MIXED, stochastic_ratio=1.5)


class TestCrt:
    def test_conjugate_matches_hand_computation(self):
        c = rp.conjugate(np.array([0.2, 0.5, 0.3]), np.array([0.0, 1.0, 0.0]))
        np.testing.assert_allclose(c, [-0.2, 0.5, -0.3], atol=1e-15)

    def test_forward_is_the_sample(self):
        p = ad.tensor([0.2, 0.5, 0.3], requires_grad=True)
        out = rp.crt(p, np.array([0, 1, 0]), lam=1.0)
        np.testing.assert_array_equal(out.z.values, [0.0, 1.0, 0.0])
        assert int(out.token_id) == 1

    def test_assembled_identity(self):
        # lam*p + conjugate reassembles the sample within float rounding
        rng = np.random.default_rng(3)
        for _ in range(200):
            dim = rng.integers(2, 65)
            raw = rng.random(dim) + 1e-3
            p = raw / raw.sum()
            s = np.zeros(dim)
            s[rng.integers(dim)] = 1.0
            lam = rng.choice([0.0, 0.01, 0.5, 1.0])
            z = lam * p + rp.conjugate(p, s, lam)
            assert np.abs(z - s).max() <= 1e-9

    def test_gradient_scales_with_lambda(self):
        w = np.array([0.3, -1.2, 2.0])
        p = ad.tensor([0.2, 0.5, 0.3], requires_grad=True)
        out = rp.crt(p, np.array([0, 1, 0]), lam=0.01)
        ad.backward(ad.sum_all(ad.mul(out.z, ad.constant(w))))
        np.testing.assert_allclose(p.grad, 0.01 * w, rtol=1e-12)

    def test_lambda_zero_gives_zero_gradient(self):
        p = ad.tensor([0.2, 0.5, 0.3], requires_grad=True)
        out = rp.crt(p, np.array([1, 0, 0]), lam=0.0)
        ad.backward(ad.sum_all(ad.mul(out.z, ad.constant(np.ones(3)))))
        assert not p.grad.any()

    def test_lambda_linearity_is_exact(self):
        rng = np.random.default_rng(5)
        w = rng.normal(size=6)
        raw = rng.random(6)
        pv = raw / raw.sum()
        s = np.zeros(6)
        s[2] = 1
        grads = {}
        for lam in (0.01, 0.02):
            p = ad.tensor(pv.copy(), requires_grad=True)
            out = rp.crt(p, s, lam=lam)
            ad.backward(ad.sum_all(ad.mul(out.z, ad.constant(w))))
            grads[lam] = p.grad.copy()
        np.testing.assert_array_equal(grads[0.02], 2.0 * grads[0.01])

    def test_any_sample_not_only_argmax(self):
        p = ad.tensor([0.7, 0.2, 0.1], requires_grad=True)
        out = rp.crt(p, np.array([0, 0, 1]), lam=0.5)  # lowest-probability token
        np.testing.assert_array_equal(out.z.values, [0, 0, 1])
        ad.backward(ad.sum_all(ad.mul(out.z, ad.constant(np.array([1.0, 2.0, 3.0])))))
        np.testing.assert_allclose(p.grad, 0.5 * np.array([1.0, 2.0, 3.0]))

    def test_forward_independent_of_lambda(self):
        p = ad.tensor([0.25, 0.75], requires_grad=True)
        z_a = rp.crt(p, np.array([1, 0]), lam=0.0).z.values
        z_b = rp.crt(p, np.array([1, 0]), lam=1.0).z.values
        np.testing.assert_array_equal(z_a, z_b)

    def test_batched(self):
        rng = np.random.default_rng(9)
        raw = rng.random((4, 5)) + 0.1
        pv = raw / raw.sum(axis=1, keepdims=True)
        ids = rng.integers(0, 5, size=4)
        s = rp.one_hot(ids, 5)
        p = ad.tensor(pv, requires_grad=True)
        out = rp.crt(p, s, lam=0.3)
        np.testing.assert_array_equal(out.z.values, s)
        np.testing.assert_array_equal(out.token_id, ids)
        w = rng.normal(size=(4, 5))
        ad.backward(ad.sum_all(ad.mul(out.z, ad.constant(w))))
        np.testing.assert_allclose(p.grad, 0.3 * w, rtol=1e-12)

    def test_errors(self):
        p = ad.tensor([0.5, 0.5])
        with pytest.raises(ValueError):
            rp.crt(p, np.array([1, 0, 0]))  # dimension mismatch
        with pytest.raises(ValueError):
            rp.crt(p, np.array([1, 1]))  # not one-hot
        with pytest.raises(ValueError):
            rp.crt(p, np.array([1, 0]), lam=-0.1)

    def test_gradient_matches_surrogate_finite_differences(self):
        # FD oracle on the surrogate loss L(lam*p + const)
        rng = np.random.default_rng(21)
        dim = 8
        raw = rng.random(dim) + 0.1
        pv = raw / raw.sum()
        s = np.zeros(dim)
        s[3] = 1.0
        lam = 0.37
        w = rng.normal(size=dim)
        p = ad.tensor(pv.copy(), requires_grad=True)
        out = rp.crt(p, s, lam=lam)
        loss = ad.sum_all(ad.exp(ad.mul(out.z, ad.constant(w))))
        ad.backward(loss)
        const = s - lam * pv
        h = 1e-6

        def surrogate():
            z = lam * p.values + const
            return np.exp(z * w).sum()

        for i in range(dim):
            orig = p.values[i]
            p.values[i] = orig + h
            up = surrogate()
            p.values[i] = orig - h
            down = surrogate()
            p.values[i] = orig
            fd = (up - down) / (2 * h)
            assert abs(p.grad[i] - fd) <= 1e-4 * max(abs(fd), 1e-8)


class TestGumbelSoftmax:
    def test_two_softmax_invocations(self):
        logits = ad.tensor(np.random.default_rng(0).normal(size=7))
        with ad.count_softmax() as counter:
            rp.gumbel_softmax(logits, tau=1.0, rng=np.random.default_rng(1))
        assert counter.count == 2

    def test_crt_path_uses_one_softmax(self):
        logits = ad.tensor(np.random.default_rng(2).normal(size=7), requires_grad=True)
        rng = np.random.default_rng(3)
        with ad.count_softmax() as counter:
            p = ad.softmax(logits)
            s = rp.sample_token(p, rp.SamplingStrategy(rp.STOCHASTIC), rng)
            rp.crt(p, s, lam=0.01)
        assert counter.count == 1

    def test_batched_counts(self):
        logits = ad.tensor(np.random.default_rng(4).normal(size=(6, 9)))
        with ad.count_softmax() as counter:
            rp.gumbel_softmax(logits, tau=1.0, rng=np.random.default_rng(5))
        assert counter.count == 12

    def test_forward_exactly_one_hot(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            logits = ad.tensor(rng.normal(size=11))
            out = rp.gumbel_softmax(logits, tau=0.7, rng=rng)
            values = out.z.values
            assert sorted(np.unique(values)) in ([0.0, 1.0], [1.0])
            assert values.sum() == 1.0

    def test_low_temperature_concentrates(self):
        logits = ad.tensor(np.array([10.0, 0.0, 0.0]))
        rng = np.random.default_rng(7)
        hits = sum(
            int(rp.gumbel_softmax(logits, tau=0.1, rng=rng).token_id) == 0
            for _ in range(10_000))
        assert hits / 10_000 > 0.99

    def test_gradient_reaches_logits(self):
        logits = ad.tensor(np.random.default_rng(8).normal(size=5), requires_grad=True)
        out = rp.gumbel_softmax(logits, tau=1.0, rng=np.random.default_rng(9))
        ad.backward(ad.sum_all(ad.mul(out.z, ad.constant(np.arange(5.0)))))
        assert logits.grad is not None and np.abs(logits.grad).sum() > 0

    def test_tau_validation(self):
        with pytest.raises(ValueError):
            rp.gumbel_softmax(ad.tensor([0.0, 1.0]), tau=0.0,
                              rng=np.random.default_rng(0))
