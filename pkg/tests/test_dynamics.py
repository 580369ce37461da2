"""One gradient-descent step and its Taylor-expanded predictions."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from _support import make_instance
from pqrlab.dynamics import (
    LossModel,
    backprop,
    default_scan_problem,
    eta_scan,
    gd_step,
    residual_norm,
    taylor_predict_ntk,
    taylor_predict_outputs,
)
from pqrlab.errors import InvalidArgumentError
from pqrlab.family import derive_meta_family
from pqrlab.kernels import compute_kernels
from pqrlab.network import Dataset, NetworkConfig, NetworkParams, forward, parameter_count
from pqrlab.numerics import relative_error
from pqrlab.oracle import directional_derivatives, parameter_rates


def hand_net():
    c = NetworkConfig([1, 1, 1], "linear", eta0=0.1)
    p = NetworkParams([[0.5], [-1.0]], [[[2.0]], [[3.0]]])
    return c, p, derive_meta_family(0.0, 2)


class TestLoss:
    def test_residual_only_on_batch(self):
        d = Dataset(np.zeros((3, 2)), labels=[[1.0], [2.0], [3.0]])
        eps = LossModel([0, 2]).residual(np.array([[1.5, 0.0, 0.0]]), d)
        assert_array_equal(eps, [[0.5, 0.0, -3.0]])
        assert LossModel([0, 2]).value(np.array([[1.5, 0.0, 0.0]]), d) == pytest.approx(0.5 * (0.25 + 9))

    def test_missing_labels(self):
        with pytest.raises(InvalidArgumentError):
            LossModel([0]).residual(np.zeros((1, 1)), Dataset(np.zeros((1, 2))))

    @pytest.mark.parametrize("batch", [[], [5]])
    def test_bad_batch(self, batch):
        with pytest.raises(InvalidArgumentError):
            LossModel(batch).residual(np.zeros((1, 2)), Dataset(np.zeros((2, 1)), labels=[[0.0], [0.0]]))


class TestGradientStep:
    def test_hand_example(self):
        """f = 6.5, y = 0: gradients (b1, W1, b2, W2) = 6.5 * (3, 3, 1, 2.5), all rates 1, eta 0.1."""
        c, p, S = hand_net()
        new = gd_step(p, c, S, Dataset([[1.0]], labels=[[0.0]]), LossModel([0]))
        assert_allclose(new.flat(), [-1.45, 0.05, -1.65, 1.375], rtol=0, atol=1e-15)

    def test_zero_residual_is_fixed_point(self):
        c, S, d, p = make_instance([3, 4, 2], "tanh", samples=2)
        d = Dataset(d.inputs, forward(p, c, d).output.T)
        assert_array_equal(gd_step(p, c, S, d, LossModel([0, 1])).flat(), p.flat())

    def test_zero_learning_rate(self):
        c, S, d, p = make_instance([3, 4, 2], "gelu", samples=2, eta0=0.0)
        assert_array_equal(gd_step(p, c, S, d, LossModel([0, 1])).flat(), p.flat())

    @pytest.mark.parametrize("act", ["linear", "tanh", "gelu"])
    def test_backprop_matches_jets(self, act):
        c, S, d, p = make_instance([3, 4, 3, 2], act, samples=2, seed=3)
        g = np.random.default_rng(0).normal(size=(2, 2))
        grad = backprop(p, c, d, g).flat()
        P = parameter_count(c.widths)
        ref = np.array([np.sum(directional_derivatives(p, c, d, e, 1)[0] * g) for e in np.eye(P)])
        assert relative_error(grad, ref) <= 1e-13

    def test_first_order_term_two_ways(self):
        """eta H.eps equals the parameter-space step pushed through the Jacobian."""
        c, S, d, p = make_instance([3, 4, 2], "tanh", s=0.5, samples=3, seed=4)
        loss = LossModel([0, 2])
        f = forward(p, c, d).output
        eps = loss.residual(f, d)
        H = compute_kernels(p, c, S, d, "ntk").output.H
        via_kernel = np.einsum("ijab,jb->ia", H, eps)
        step = parameter_rates(c, S) * backprop(p, c, d, eps).flat()
        via_jacobian = directional_derivatives(p, c, d, step, 1)[0]
        assert relative_error(via_kernel, via_jacobian) <= 1e-13


class TestTaylor:
    def test_single_linear_layer_is_exact(self):
        c, S, d, p = make_instance([4, 3], "linear", samples=3, eta0=0.7)
        loss = LossModel([0, 1, 2])
        kern = compute_kernels(p, c, S, d, "ddntk").output
        f = forward(p, c, d).output
        new = gd_step(p, c, S, d, loss)
        eta = c.eta(S)
        pred = taylor_predict_outputs(kern, f, loss.residual(f, d), eta, 1)
        assert residual_norm(pred, forward(new, c, d).output) <= 1e-13
        H_new = compute_kernels(new, c, S, d, "ntk").output.H
        assert_array_equal(H_new, kern.H)
        assert_array_equal(taylor_predict_ntk(kern, kern.H, loss.residual(f, d), eta, 2), kern.H)

    def test_orders_need_kernels(self):
        c, S, d, p = make_instance([3, 4, 2], "tanh")
        kern = compute_kernels(p, c, S, d, "dntk").output
        f = forward(p, c, d).output
        with pytest.raises(InvalidArgumentError):
            taylor_predict_outputs(kern, f, f, 0.1, 3)
        with pytest.raises(InvalidArgumentError):
            taylor_predict_ntk(kern, kern.H, f, 0.1, 2)
        with pytest.raises(InvalidArgumentError):
            taylor_predict_outputs(kern, f, f, 0.1, 4)

    def test_scan_slopes(self):
        config, S, data, params, loss = default_scan_problem(seed=1, n=8, L=3)
        scan = eta_scan(params, config, S, data, loss)
        for k, expected in {1: 2.0, 2: 3.0, 3: 4.0}.items():
            assert scan.output_slopes[k].slope == pytest.approx(expected, abs=0.2)
        for k, expected in {1: 2.0, 2: 3.0}.items():
            assert scan.ntk_slopes[k].slope == pytest.approx(expected, abs=0.2)
