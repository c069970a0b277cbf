"""Soft quantization, entropies, and the position regularizer vs formula oracles."""

import numpy as np
import pytest

from splinecnn import tensor as T
from splinecnn.decisions import PositionState
from splinecnn.regularizer import (
    Quantizer,
    RegConfig,
    bin_probs,
    cond_bin_probs,
    cond_entropy,
    entropy,
    mixture_marginal,
    reg_loss,
    soft_bin,
    soft_bin_matrix,
)
from splinecnn.tensor import DTensor

from conftest import finite_difference, rel_err


# ----------------------------------------------------------------------
# high-precision formula oracles, written independently in float64 numpy
# ----------------------------------------------------------------------

def _oracle_memberships(phi, q):
    centers = (np.arange(q.bins) + 0.5) / q.bins
    z = 2.0 * (np.asarray(phi, dtype=np.float64)[:, None] - centers[None, :]) * q.bins
    exponent = np.minimum((z * z - 1.0) * np.log(float(q.slope)), 700.0)
    return 1.0 / (1.0 + np.exp(exponent))


def _oracle_bin_probs(phi, q):
    u = _oracle_memberships(phi, q)
    return u.sum(axis=0) / u.sum()


def _oracle_entropy(p, eps=1e-8):
    return -np.sum(p * np.log(p + eps))


def _oracle_cond(phi, labels, q):
    u = _oracle_memberships(phi, q)
    classes = np.unique(labels)
    cond = np.stack([u[labels == c].sum(axis=0) / u[labels == c].sum() for c in classes])
    priors = np.array([(labels == c).mean() for c in classes])
    return cond, priors


def _oracle_reg_loss(phi, labels, q, w_u, w_s):
    cond, priors = _oracle_cond(phi, labels, q)
    marginal = priors @ cond
    h = _oracle_entropy(marginal)
    h_cond = np.sum(priors * np.array([_oracle_entropy(row) for row in cond]))
    return -w_u * h + w_s * h_cond


class TestSoftBin:
    def test_center_value(self):
        q = Quantizer(bins=50, slope=100.0)
        u = soft_bin(DTensor(np.array([q.centers[7]])), 7, q)
        assert u.values[0] == pytest.approx(100.0 / 101.0, abs=1e-9)

    def test_edge_is_half(self):
        q = Quantizer(bins=50, slope=100.0)
        edge = q.centers[3] + q.width / 2  # z = 1
        u = soft_bin(DTensor(np.array([edge])), 3, q)
        assert u.values[0] == pytest.approx(0.5, abs=1e-9)

    def test_one_bin_width_away(self):
        q = Quantizer(bins=50, slope=100.0)
        away = q.centers[10] + q.width  # z = 2
        u = soft_bin(DTensor(np.array([away])), 10, q)
        assert u.values[0] == pytest.approx(1.0 / (1.0 + 100.0 ** 3), rel=1e-6)

    def test_matrix_matches_oracle(self, rng):
        q = Quantizer()
        phi = rng.random(40)
        got = soft_bin_matrix(DTensor(phi), q).values
        np.testing.assert_allclose(got, _oracle_memberships(phi, q), atol=1e-12)

    def test_no_overflow_far_from_bin(self):
        q = Quantizer(bins=50, slope=100.0)
        u = soft_bin(DTensor(np.array([0.999])), 0, q)
        assert np.isfinite(u.values).all()
        assert u.values[0] == pytest.approx(0.0, abs=1e-30)

    def test_quantizer_validation(self):
        with pytest.raises(ValueError):
            Quantizer(bins=1)
        with pytest.raises(ValueError):
            Quantizer(slope=1.0)


class TestBinProbs:
    def test_collapsed_samples_concentrate(self):
        q = Quantizer()
        phi = np.full(30, q.centers[20])
        p = bin_probs(DTensor(phi), q).values
        assert p[20] >= 0.98

    def test_center_per_bin_is_near_uniform(self):
        q = Quantizer()
        p = bin_probs(DTensor(q.centers.copy()), q).values
        np.testing.assert_allclose(p, 1.0 / q.bins, rtol=1e-6)

    def test_matches_formula_oracle(self, rng):
        q = Quantizer()
        phi = rng.random(100)
        p = bin_probs(DTensor(phi), q).values
        np.testing.assert_allclose(p, _oracle_bin_probs(phi, q), atol=1e-10)

    def test_sums_to_one_and_nonnegative(self, rng):
        q = Quantizer()
        p = bin_probs(DTensor(rng.random(64)), q).values
        assert p.sum() == pytest.approx(1.0, abs=1e-12)
        assert p.min() >= 0.0


class TestEntropy:
    def test_uniform_is_log_b(self):
        p = DTensor(np.full(50, 0.02))
        assert float(entropy(p).values) == pytest.approx(np.log(50), abs=1e-6)

    def test_one_hot_is_near_zero(self):
        p = np.zeros(50)
        p[3] = 1.0
        assert float(entropy(DTensor(p)).values) == pytest.approx(0.0, abs=1e-6)

    def test_two_point(self):
        assert float(entropy(DTensor(np.array([0.5, 0.5]))).values) == pytest.approx(
            np.log(2), abs=1e-7)

    def test_bounds_on_random_histograms(self, rng):
        q = Quantizer()
        for _ in range(20):
            p = bin_probs(DTensor(rng.random(rng.integers(1, 100))), q)
            h = float(entropy(p).values)
            assert 0.0 <= h <= np.log(q.bins) + 1e-6


class TestConditional:
    def test_single_class_reduces_to_bin_probs(self, rng):
        q = Quantizer()
        phi = rng.random(30)
        cond, priors, classes = cond_bin_probs(DTensor(phi), np.zeros(30, dtype=int), q)
        np.testing.assert_allclose(cond.values[0], bin_probs(DTensor(phi), q).values,
                                   atol=1e-12)
        assert priors.tolist() == [1.0]

    def test_perfect_specialization(self):
        q = Quantizer()
        phi = np.concatenate([np.full(10, q.centers[5]), np.full(10, q.centers[40])])
        labels = np.array([0] * 10 + [1] * 10)
        cond, priors, _ = cond_bin_probs(DTensor(phi), labels, q)
        h = float(cond_entropy(cond, priors).values)
        assert h <= 0.1  # each conditional is ~one-hot

    def test_matches_formula_oracle(self, rng):
        q = Quantizer()
        phi = rng.random(120)
        labels = rng.integers(0, 5, size=120)
        cond, priors, _ = cond_bin_probs(DTensor(phi), labels, q)
        oc, op = _oracle_cond(phi, labels, q)
        np.testing.assert_allclose(cond.values, oc, atol=1e-10)
        np.testing.assert_allclose(priors, op, atol=1e-12)

    def test_count_mismatch(self, rng):
        with pytest.raises(ValueError):
            cond_bin_probs(DTensor(rng.random(5)), np.zeros(4, dtype=int), Quantizer())


class TestMutualInformationStructure:
    def test_consistent_joint_inequality(self, rng):
        """H(bin | class) <= H(bin) when the marginal is the prior mixture."""
        q = Quantizer()
        for _ in range(10):
            phi = rng.random(80)
            labels = rng.integers(0, 7, size=80)
            cond, priors, _ = cond_bin_probs(DTensor(phi), labels, q)
            h_marg = float(entropy(mixture_marginal(cond, priors)).values)
            h_cond = float(cond_entropy(cond, priors).values)
            assert h_cond <= h_marg + 1e-9

    def test_mixture_marginal_matches_oracle(self, rng):
        q = Quantizer()
        phi = rng.random(60)
        labels = rng.integers(0, 4, size=60)
        cond, priors, _ = cond_bin_probs(DTensor(phi), labels, q)
        got = mixture_marginal(cond, priors).values
        oc, op = _oracle_cond(phi, labels, q)
        np.testing.assert_allclose(got, op @ oc, atol=1e-12)


class TestRegLoss:
    def _states(self, phi):
        return [PositionState(DTensor(phi, requires_grad=True), layer=1)]

    def test_zero_weights_give_zero_loss(self, rng):
        q = Quantizer()
        states = self._states(rng.random(20))
        loss, entropies = reg_loss(states, rng.integers(0, 3, 20), q,
                                   RegConfig(w_u=0.0, w_s=0.0))
        assert float(loss.values) == 0.0
        assert not loss.requires_grad
        assert len(entropies) == 1

    def test_uniform_positions_hand_value(self):
        q = Quantizer()
        phi = np.tile(q.centers, 4)  # perfectly uniform over the bins
        labels = np.arange(phi.size) % 10
        loss, entropies = reg_loss(self._states(phi), labels, q, RegConfig(0.2, 0.2))
        # both entropies near log B: loss ~ -0.2 log B + 0.2 H(cond) with
        # H(cond) <= log B, so the loss is bounded by weights * log B
        assert abs(float(loss.values)) <= 0.2 * np.log(q.bins) + 1e-6
        assert entropies[0] >= 0.95 * np.log(q.bins)

    def test_matches_end_to_end_oracle(self, rng):
        q = Quantizer()
        phi = rng.random(250)
        labels = rng.integers(0, 10, size=250)
        loss, _ = reg_loss(self._states(phi), labels, q, RegConfig(0.2, 0.2))
        expect = _oracle_reg_loss(phi, labels, q, 0.2, 0.2)
        assert float(loss.values) == pytest.approx(expect, abs=1e-8)

    def test_unlabeled_path_uses_direct_histogram(self, rng):
        q = Quantizer()
        phi = rng.random(50)
        loss, _ = reg_loss(self._states(phi), None, q, RegConfig(0.3, 0.2))
        expect = -0.3 * _oracle_entropy(_oracle_bin_probs(phi, q))
        assert float(loss.values) == pytest.approx(expect, abs=1e-10)

    def test_rank3_positions_pooled(self, rng):
        q = Quantizer()
        phi = rng.random((10, 4))
        labels = rng.integers(0, 3, size=10)
        loss, _ = reg_loss([PositionState(DTensor(phi), layer=1)], labels, q,
                           RegConfig(0.2, 0.2))
        expect = _oracle_reg_loss(phi.reshape(-1), np.repeat(labels, 4), q, 0.2, 0.2)
        assert float(loss.values) == pytest.approx(expect, abs=1e-8)

    def test_empty_states(self):
        loss, entropies = reg_loss([], None, Quantizer(), RegConfig())
        assert float(loss.values) == 0.0
        assert entropies == []

    def test_gradient_vs_finite_differences(self, rng):
        q = Quantizer(bins=10)
        phi0 = rng.random(12)
        labels = rng.integers(0, 3, size=12)

        def loss_of(v):
            state = [PositionState(DTensor(v), layer=1)]
            return float(reg_loss(state, labels, q, RegConfig(0.2, 0.2))[0].values)

        pos = DTensor(phi0, requires_grad=True)
        loss, _ = reg_loss([PositionState(pos, layer=1)], labels, q, RegConfig(0.2, 0.2))
        T.backward(loss)
        fd = finite_difference(loss_of, phi0)
        assert rel_err(pos.grad, fd, floor=1e-6) <= 1e-4


class TestUniformizationFixture:
    def test_entropy_ascent_spreads_collapsed_positions(self):
        """Collapsed positions driven by the utilization term alone spread out."""
        q = Quantizer()
        rng = np.random.default_rng(0)
        phi = DTensor(0.5 + 0.02 * rng.standard_normal(200), requires_grad=True)
        initial = float(entropy(bin_probs(DTensor(phi.values.copy()), q)).values)
        velocities = {}
        for _ in range(200):
            h = entropy(bin_probs(T.clamp(phi, 1e-6, 1 - 1e-6), q))
            loss = T.neg(h)
            T.backward(loss)
            T.sgd_momentum_step([phi], velocities, lr=0.2, momentum=0.0)
            phi.zero_grad()
            phi.values = np.clip(phi.values, 1e-6, 1 - 1e-6)
        final = float(entropy(bin_probs(DTensor(phi.values), q)).values)
        assert initial < 0.9 * np.log(q.bins)
        assert final >= 0.9 * np.log(q.bins)
