import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lysep.softmax_ce import ce_grad, ce_loss_mean, ce_loss_vec, check_labels, one_hot, softmax_cols
from oracles import fd_errors, loop_softmax_ce

seeds = st.integers(0, 2**32 - 1)


def random_pair(r, J=None, N=None):
    J = J or int(r.integers(2, 7))
    N = N or int(r.integers(1, 6))
    return r.normal(scale=3.0, size=(J, N)), one_hot(r.integers(0, J, N), J)


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(softmax_cols(np.zeros((3, 1))), 1 / 3, atol=1e-15)

    @pytest.mark.parametrize("c", [-500.0, -1.0, 0.0, 3.0, 700.0])
    def test_shift_invariant_pair(self, c):
        p = softmax_cols(np.array([[c], [c + math.log(2)]]))
        assert np.allclose(p.ravel(), [1 / 3, 2 / 3], atol=1e-12)

    def test_large_logits_stay_finite(self):
        p = softmax_cols(np.array([[1000.0], [999.0]])).ravel()
        e = mpmath.e
        ref = [float(1 / (1 + e**-1)), float(e**-1 / (1 + e**-1))]
        assert np.all(np.isfinite(p))
        assert np.allclose(p, ref, atol=1e-15)

    @given(seeds)
    def test_columns_sum_to_one(self, seed):
        z = np.random.default_rng(seed).normal(scale=50, size=(6, 5))
        assert np.all(np.abs(softmax_cols(z).sum(axis=0) - 1) <= 1e-12)


class TestLossVec:
    def test_uniform_prediction_is_log_J(self):
        a = one_hot([0, 3, 1], 4)
        assert np.allclose(ce_loss_vec(np.full((4, 3), 2.5), a), math.log(4), atol=1e-15)

    def test_confident_correct_high_precision(self):
        got = ce_loss_vec(np.array([[10.0], [-10.0]]), one_hot([0], 2))[0]
        mpmath.mp.dps = 50
        ref = float(mpmath.log(1 + mpmath.e ** (-20)))
        assert abs(got - ref) <= 1e-20 + 1e-6 * ref
        assert abs(ref - 2.06e-9) < 1e-11

    def test_closed_form(self):
        got = ce_loss_vec(np.array([[0.0], [math.log(3)]]), one_hot([1], 2))[0]
        assert abs(got - math.log(4 / 3)) <= 1e-15

    def test_matches_loop_oracle(self, rng):
        z, a = random_pair(rng, 5, 8)
        assert np.allclose(ce_loss_vec(z, a), loop_softmax_ce(z, a)[1], atol=1e-14)

    def test_nonnegative_when_saturated(self):
        a = one_hot([0, 1], 2)
        assert np.all(ce_loss_vec(800 * a, a) >= 0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ce_loss_vec(np.zeros((3, 2)), one_hot([0, 1, 1], 3))


class TestLossMean:
    def test_all_equal_logits(self):
        assert abs(ce_loss_mean(np.ones((3, 4)), one_hot([0, 1, 2, 0], 3)) - math.log(3)) <= 1e-15

    def test_single_sample_equals_scalar_loss(self, rng):
        z, a = random_pair(rng, 4, 1)
        assert ce_loss_mean(z, a) == ce_loss_vec(z, a)[0]

    def test_equals_mean_of_vector(self, rng):
        z, a = random_pair(rng, 5, 9)
        assert abs(ce_loss_mean(z, a) - math.fsum(ce_loss_vec(z, a)) / 9) <= 1e-14

    @given(seeds)
    def test_cauchy_schwarz_bound(self, seed):
        z, a = random_pair(np.random.default_rng(seed))
        v = ce_loss_vec(z, a)
        assert ce_loss_mean(z, a) <= np.linalg.norm(v) / math.sqrt(z.shape[1]) + 1e-15


class TestGrad:
    def test_saturated_correct_prediction(self):
        a = one_hot([2, 0], 3)
        assert np.max(np.linalg.norm(ce_grad(50 * a, a), axis=0)) <= 1e-9

    def test_two_class_uniform(self):
        assert np.allclose(ce_grad(np.zeros((2, 1)), one_hot([0], 2)).ravel(), [-0.5, 0.5], atol=1e-15)

    def test_finite_differences(self, rng):
        z, a = random_pair(rng, 4, 3)
        g = ce_grad(z, a)
        for n in range(z.shape[1]):
            col = z[:, [n]].copy()
            errs = fd_errors(lambda: ce_loss_vec(col, a[:, [n]])[0], col, g[:, [n]], rng, count=8)
            assert max(errs) <= 1e-6

    @given(seeds)
    def test_column_norm_at_most_sqrt2(self, seed):
        z, a = random_pair(np.random.default_rng(seed))
        assert np.all(np.linalg.norm(ce_grad(z, a), axis=0) <= math.sqrt(2) + 1e-15)


class TestLipschitz:
    @given(seeds)
    def test_scalar_lipschitz(self, seed):
        r = np.random.default_rng(seed)
        z1, a = random_pair(r, N=1)
        z2 = z1 + r.normal(scale=r.uniform(0.01, 10), size=z1.shape)
        lhs = abs(ce_loss_vec(z1, a)[0] - ce_loss_vec(z2, a)[0])
        assert lhs <= math.sqrt(2) * np.linalg.norm(z1 - z2) + 1e-12

    @given(seeds)
    def test_matrix_lipschitz(self, seed):
        r = np.random.default_rng(seed)
        z1, a = random_pair(r)
        z2 = r.normal(scale=3, size=z1.shape)
        lhs = np.linalg.norm(ce_loss_vec(z1, a) - ce_loss_vec(z2, a))
        assert lhs <= math.sqrt(2) * np.linalg.norm(z1 - z2) + 1e-12

    @given(seeds)
    def test_squared_mean_bound(self, seed):
        r = np.random.default_rng(seed)
        z1, a = random_pair(r)
        z2 = r.normal(scale=3, size=z1.shape)
        n = z1.shape[1]
        rhs = (2 * np.sum(ce_loss_vec(z2, a) ** 2) + 4 * np.sum((z1 - z2) ** 2)) / n
        assert ce_loss_mean(z1, a) ** 2 <= rhs + 1e-12

    @given(seeds, st.floats(-100, 100))
    def test_shift_invariance(self, seed, c):
        z, a = random_pair(np.random.default_rng(seed))
        shift = z + c
        assert np.allclose(ce_loss_vec(shift, a), ce_loss_vec(z, a), atol=1e-12)
        assert np.allclose(ce_grad(shift, a), ce_grad(z, a), atol=1e-12)


def test_check_labels_rejects_non_one_hot():
    with pytest.raises(ValueError):
        check_labels([[1.0, 0.5], [0.0, 0.5]])
    with pytest.raises(ValueError):
        one_hot([0, 3], 3)
