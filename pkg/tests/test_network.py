"""The finite-width MLP: activations, criticality presets, initialization and forward pass."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import integrate, optimize, special

from pqrlab.errors import InvalidArgumentError, NumericOverflowError, ShapeError
from pqrlab.family import ScalingStrategy, derive_meta_family
from pqrlab.network import (
    Dataset,
    NetworkConfig,
    NetworkParams,
    critical_hyperparameters,
    forward,
    get_activation,
    init_params,
    learning_rates,
    parameter_count,
)
from pqrlab.numerics import Jet, RngStream

Z = np.linspace(-3.0, 3.0, 13)


def gelu_closed_forms(z):
    phi, Phi = np.exp(-z * z / 2) / math.sqrt(2 * math.pi), special.ndtr(z)
    return [z * Phi, Phi + z * phi, phi * (2 - z * z), phi * (z**3 - 4 * z)]


def tanh_closed_forms(z):
    t = np.tanh(z)
    return [t, 1 - t * t, -2 * t * (1 - t * t), -2 * (1 - t * t) * (1 - 3 * t * t)]


def richardson(f, z, h=1e-3):
    """Fourth-order central difference."""
    return (-f(z + 2 * h) + 8 * f(z + h) - 8 * f(z - h) + f(z - 2 * h)) / (12 * h)


class TestActivations:
    @pytest.mark.parametrize("name, closed", [("tanh", tanh_closed_forms), ("gelu", gelu_closed_forms)])
    def test_low_orders_match_closed_forms(self, name, closed):
        d = get_activation(name).derivatives(Z, 5)
        assert d.shape == (6, Z.size)
        assert_allclose(d[:4], np.stack(closed(Z)), rtol=1e-13, atol=1e-14)

    @pytest.mark.parametrize("name", ["tanh", "gelu"])
    @pytest.mark.parametrize("k", [4, 5])
    def test_high_orders_by_differencing(self, name, k):
        act = get_activation(name)
        fd = richardson(lambda z: act.derivatives(z, 5)[k - 1], Z)
        assert_allclose(act.derivatives(Z, 5)[k], fd, atol=1e-8)

    def test_linear(self):
        d = get_activation("linear").derivatives(Z, 5)
        assert_array_equal(d[0], Z)
        assert_array_equal(d[1], np.ones_like(Z))
        assert not d[2:].any()

    @pytest.mark.parametrize("name", ["linear", "tanh", "gelu"])
    def test_jet_agrees_with_derivatives(self, name):
        act = get_activation(name)
        z0, direction = 0.37, 1.0
        jet = act.jet(Jet.variable(z0, direction, 5))
        assert_allclose(jet.derivatives(), act.derivatives(np.float64(z0), 5), rtol=1e-9, atol=1e-12)

    def test_unknown(self):
        with pytest.raises(InvalidArgumentError):
            get_activation("relu")


class TestCriticality:
    @pytest.mark.parametrize("name", ["linear", "tanh"])
    def test_presets(self, name):
        assert critical_hyperparameters(name) == (0.0, 1.0)

    def test_gelu_frozen_value(self):
        cb, cw = critical_hyperparameters("gelu")
        assert cb == pytest.approx(0.17292239075607085, rel=1e-9)
        assert cw == pytest.approx(1.983058257437547, rel=1e-9)

    def test_gelu_susceptibilities_are_one(self):
        """Both susceptibilities at the fixed point, by adaptive quadrature."""
        cb, cw = critical_hyperparameters("gelu")

        def gauss(fn, K):
            return integrate.quad(lambda u: fn(u) * math.exp(-u * u / (2 * K)) / math.sqrt(2 * math.pi * K),
                                  -np.inf, np.inf, epsabs=1e-13)[0]

        s, ds, dds = (lambda z, i=i: gelu_closed_forms(np.float64(z))[i] for i in range(3))
        # the fixed point is marginal, so locate it by the vanishing of <s s''> rather than by iteration
        K = optimize.brentq(lambda K: gauss(lambda z: s(z) * dds(z), K), 0.5, 20.0, xtol=1e-13)
        assert cb + cw * gauss(lambda z: s(z) ** 2, K) == pytest.approx(K, rel=1e-7)
        assert cw * gauss(lambda z: ds(z) ** 2, K) == pytest.approx(1.0, abs=1e-7)
        assert cw * gauss(lambda z: ds(z) ** 2 + s(z) * dds(z), K) == pytest.approx(1.0, abs=1e-7)


class TestConfig:
    def test_broadcast(self):
        c = NetworkConfig([3, 4, 5], "tanh", Cb=0.1, Cw=[1.0, 2.0])
        assert c.L == 2 and c.n == 4
        assert_array_equal(c.Cb, [0.1, 0.1])
        assert_array_equal(c.Cw, [1.0, 2.0])

    @pytest.mark.parametrize(
        "kwargs",
        [dict(widths=[3]), dict(widths=[3, 0, 1]), dict(widths=[3, 4, 1], Cb=-1.0), dict(widths=[3, 4, 1], Cw=[1, 2, 3]),
         dict(widths=[3, 4, 1], eta0=-0.1), dict(widths=[3, 4, 1], lam_w=np.nan)],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(InvalidArgumentError):
            NetworkConfig(**kwargs)

    def test_dict_round_trip(self):
        c = NetworkConfig.critical([2, 6, 6, 1], "gelu", lam_b=0.5, eta0=0.01)
        d = NetworkConfig.from_dict(c.to_dict())
        assert d.to_dict() == c.to_dict()

    def test_eta_and_rates(self):
        c = NetworkConfig([2, 9, 1], lam_b=2.0, lam_w=3.0, eta0=0.5)
        S = ScalingStrategy(2, (0, 0.5), (1.0, 0.5), 0.5)
        assert c.eta(S) == pytest.approx(1.5)
        (b1, w1), (b2, w2) = learning_rates(c, S)
        assert (b1, w1) == pytest.approx((2 / 9, 3 / 9 / 2))
        assert (b2, w2) == pytest.approx((2 / 3, 3 / 3 / 9))


class TestInit:
    def test_zero_variances_give_zero_params(self):
        c = NetworkConfig([3, 4, 2], Cb=0.0, Cw=0.0)
        p = init_params(c, derive_meta_family(0.5, 2), RngStream(0))
        assert not p.flat().any()
        assert p.flat().size == parameter_count(c.widths)

    def test_variances(self):
        c = NetworkConfig([200, 400, 50], Cb=0.7, Cw=1.3)
        S = derive_meta_family(0.5, 2)
        p = init_params(c, S, RngStream(5))
        n = 400
        assert np.var(p.weights[0]) == pytest.approx(1.3 / 200, rel=0.05)
        assert np.var(p.weights[1]) == pytest.approx(1.3 / (math.sqrt(n) * 400), rel=0.05)
        assert np.mean(p.biases[0] ** 2) == pytest.approx(0.7, rel=0.2)

    def test_replay(self):
        c = NetworkConfig.critical([3, 5, 2], "tanh")
        S = derive_meta_family(0.25, 2)
        a, b = (init_params(c, S, RngStream(9, 4)) for _ in range(2))
        assert_array_equal(a.flat(), b.flat())

    def test_depth_mismatch(self):
        with pytest.raises(InvalidArgumentError):
            init_params(NetworkConfig([2, 2, 2]), derive_meta_family(0, 3), RngStream(0))

    def test_flat_round_trip(self):
        c = NetworkConfig([3, 4, 2])
        p = init_params(c, derive_meta_family(0, 2), RngStream(1))
        q = NetworkParams.from_flat(p.flat(), c.widths)
        assert_array_equal(q.flat(), p.flat())
        with pytest.raises(ShapeError):
            NetworkParams.from_flat(p.flat()[:-1], c.widths)


class TestForward:
    def test_hand_example(self):
        c = NetworkConfig([1, 1, 1], "linear")
        p = NetworkParams([[0.5], [-1.0]], [[[2.0]], [[3.0]]])
        tr = forward(p, c, Dataset([[1.0]]))
        assert tr.z[0].item() == 2.5
        assert tr.output.item() == 6.5

    def test_zero_params_tanh(self):
        c = NetworkConfig([3, 4, 4, 2], "tanh")
        p = init_params(NetworkConfig([3, 4, 4, 2], Cw=0.0), derive_meta_family(0, 3), RngStream(0))
        tr = forward(p, c, Dataset(np.ones((2, 3))))
        assert all(not z.any() for z in tr.z)

    def test_hidden_permutation_invariance(self):
        c = NetworkConfig.critical([3, 6, 2], "gelu")
        p = init_params(c, derive_meta_family(0, 2), RngStream(2))
        perm = np.random.default_rng(0).permutation(6)
        q = NetworkParams([p.biases[0][perm], p.biases[1]], [p.weights[0][perm], p.weights[1][:, perm]])
        x = Dataset(np.random.default_rng(1).normal(size=(4, 3)))
        assert_allclose(forward(q, c, x).output, forward(p, c, x).output, rtol=1e-14)

    def test_overflow_names_layer(self):
        c = NetworkConfig([1, 1, 1, 1], "linear")
        p = NetworkParams([[0.0]] * 3, [[[1e200]]] * 3)
        with pytest.raises(NumericOverflowError) as err:
            forward(p, c, Dataset([[1.0]]))
        assert err.value.layer == 2

    def test_shape_errors(self):
        c = NetworkConfig([3, 4, 1])
        p = init_params(c, derive_meta_family(0, 2), RngStream(0))
        with pytest.raises(ShapeError):
            forward(p, c, Dataset(np.ones((1, 2))))
        with pytest.raises(ShapeError):
            forward(p, NetworkConfig([3, 5, 1]), Dataset(np.ones((1, 3))))


class TestDataset:
    def test_unit_norm(self):
        d = Dataset.unit_norm(8, 5, np.random.default_rng(0), n_out=2)
        assert_allclose(np.sum(d.inputs**2, axis=1) / 8, 1.0)
        assert d.labels.shape == (5, 2)

    def test_csv_round_trip(self, tmp_path):
        d = Dataset.unit_norm(3, 4, np.random.default_rng(0), n_out=2)
        d.to_csv(tmp_path / "d.csv")
        e = Dataset.from_csv(tmp_path / "d.csv", 3)
        assert_array_equal(e.inputs, d.inputs)
        assert_array_equal(e.labels, d.labels)
