"""Taped reverse-mode engine: exactness against finite differences."""

import numpy as np
import pytest

from lndsm import autodiff as ad
from lndsm.autodiff import Tape
from lndsm.checks import primitive_gradient_error
from lndsm.errors import NumericalError


class TestBasics:
    def test_sum_of_squares_gradient(self):
        tape = Tape()
        x = tape.param(np.array([1.0, 2.0, 3.0]))
        tape.backward(ad.tsum(ad.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_exp_log_composition_gradient_is_one(self):
        tape = Tape()
        x = tape.param(np.array([0.5, 1.7, 3.2]))
        tape.backward(ad.tsum(ad.exp(ad.log(x))))
        np.testing.assert_allclose(x.grad, 1.0, atol=1e-12)

    def test_backward_requires_scalar(self):
        tape = Tape()
        x = tape.param(np.ones((2, 2)))
        with pytest.raises(ValueError):
            tape.backward(ad.mul(x, 2.0))

    def test_gradient_accumulates_over_reuse(self):
        tape = Tape()
        x = tape.param(np.array([2.0]))
        y = ad.add(ad.mul(x, 3.0), ad.mul(x, x))
        tape.backward(ad.tsum(y))
        np.testing.assert_allclose(x.grad, [3.0 + 2.0 * 2.0])


class TestMatmul:
    def test_matmul_gradient_vs_finite_differences(self):
        rng = np.random.default_rng(0)
        b = rng.normal(size=(4, 2))

        def loss(x):
            return ad.tsum(ad.square(ad.matmul(x, b)))

        err = primitive_gradient_error(loss, rng.normal(size=(3, 4)))
        assert err < 1e-6

    def test_matmul_right_operand_gradient(self):
        rng = np.random.default_rng(1)
        a = rng.normal(size=(3, 4))

        def loss(x):
            return ad.tsum(ad.square(ad.matmul(a, x)))

        err = primitive_gradient_error(loss, rng.normal(size=(4, 2)))
        assert err < 1e-6


class TestBroadcasting:
    def test_bias_add_reduces_over_batch(self):
        tape = Tape()
        b = tape.param(np.array([1.0, 2.0]))
        x = np.ones((5, 2))
        tape.backward(ad.tsum(ad.add(x, b)))
        np.testing.assert_array_equal(b.grad, [5.0, 5.0])

    def test_row_scale_gradient(self):
        rng = np.random.default_rng(2)
        scale = rng.normal(size=(6, 1))

        def loss(x):
            return ad.tsum(ad.square(ad.mul(x, scale)))

        err = primitive_gradient_error(loss, rng.normal(size=(6, 3)))
        assert err < 1e-6


class TestClip:
    def test_clip_masks_gradient_outside_range(self):
        tape = Tape()
        x = tape.param(np.array([-9.0, 0.0, 9.0]))
        tape.backward(ad.tsum(ad.clip(x, -1.0, 1.0)))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


class TestStructureOps:
    def test_take_rows_scatter_adds_duplicates(self):
        tape = Tape()
        x = tape.param(np.arange(6.0).reshape(3, 2))
        tape.backward(ad.tsum(ad.take_rows(x, np.array([1, 1, 2]))))
        np.testing.assert_array_equal(x.grad, [[0, 0], [2, 2], [1, 1]])

    def test_concat_splits_gradient(self):
        tape = Tape()
        a = tape.param(np.ones((2, 2)))
        b = tape.param(np.ones((2, 3)))
        out = ad.concat([a, b], axis=1)
        tape.backward(ad.tsum(ad.mul(out, np.arange(10.0).reshape(2, 5))))
        np.testing.assert_array_equal(a.grad, [[0, 1], [5, 6]])
        np.testing.assert_array_equal(b.grad, [[2, 3, 4], [7, 8, 9]])

    def test_slice_cols_gradient_zero_elsewhere(self):
        tape = Tape()
        x = tape.param(np.ones((2, 4)))
        tape.backward(ad.tsum(ad.slice_cols(x, 1, 3)))
        np.testing.assert_array_equal(x.grad, [[0, 1, 1, 0], [0, 1, 1, 0]])


class TestDeterminism:
    def test_identical_runs_bitwise_equal(self):
        def run():
            rng = np.random.default_rng(33)
            tape = Tape()
            x = tape.param(rng.normal(size=(8, 4)))
            w = tape.param(rng.normal(size=(4, 4)))
            loss = ad.tmean(ad.square(ad.silu(ad.matmul(x, w))))
            tape.backward(loss)
            return float(loss.data), x.grad.copy(), w.grad.copy()

        la, xa, wa = run()
        lb, xb, wb = run()
        assert la == lb
        assert np.array_equal(xa, xb)
        assert np.array_equal(wa, wb)


class TestFiniteGuard:
    def test_debug_mode_rejects_nan(self):
        ad.DEBUG_CHECK_FINITE = True
        try:
            tape = Tape()
            x = tape.param(np.array([1.0, -1.0]))
            with pytest.raises(NumericalError):
                ad.log(x)
        finally:
            ad.DEBUG_CHECK_FINITE = False
