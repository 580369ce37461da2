"""The definition-based oracle: jets, polarization and brute-force kernel sums."""

import itertools

import numpy as np
import pytest

from _support import make_instance
from pqrlab.errors import InvalidArgumentError, ResourceError, UnsupportedError
from pqrlab.family import random_strategy
from pqrlab.kernels import compute_kernels, ntk_first_layer
from pqrlab.network import Dataset, NetworkConfig, NetworkParams, forward, parameter_count
from pqrlab.numerics import relative_error
from pqrlab.oracle import (
    ParameterIndex,
    derivative_tensor,
    directional_derivatives,
    flat_position,
    kernels_from_definition,
    mixed_partial,
    onehidden_typeI,
    parameter_indices,
    typeI_from_definition,
)

ACTS = ["linear", "tanh", "gelu"]


def output_along(params, config, data, v, t):
    theta = params.flat() + t * v
    return forward(NetworkParams.from_flat(theta, config.widths), config, data).output


class TestIndexing:
    def test_flat_positions_enumerate(self):
        c = NetworkConfig([3, 4, 2])
        idx = parameter_indices(c)
        assert len(idx) == parameter_count(c.widths)
        assert [flat_position(c, i) for i in idx] == list(range(len(idx)))

    def test_flat_layout_matches_params(self):
        c, S, d, p = make_instance([2, 3, 2])
        theta = p.flat()
        assert theta[flat_position(c, ParameterIndex(2, "weight", 1, 2))] == p.weights[1][1, 2]
        assert theta[flat_position(c, ParameterIndex(1, "bias", 2))] == p.biases[0][2]

    @pytest.mark.parametrize("bad", [ParameterIndex(1, "bias", 9), ParameterIndex(2, "weight", 0, None),
                                     ParameterIndex(2, "gain", 0, 0)])
    def test_bad_index(self, bad):
        with pytest.raises(InvalidArgumentError):
            flat_position(NetworkConfig([2, 3, 2]), bad)


class TestDirectional:
    def test_linear_last_layer_weight(self):
        c, S, d, p = make_instance([3, 4, 2], "linear", samples=2)
        v = np.zeros(parameter_count(c.widths))
        v[flat_position(c, ParameterIndex(2, "weight", 1, 3))] = 1.0
        out = directional_derivatives(p, c, d, v, 5)
        assert np.array_equal(out[0, 1], forward(p, c, d).z[0][3])
        assert not out[0, 0].any()
        assert not out[1:].any()

    def test_zero_direction(self):
        c, S, d, p = make_instance([3, 4, 2], "gelu")
        assert not directional_derivatives(p, c, d, np.zeros(parameter_count(c.widths)), 5).any()

    @pytest.mark.parametrize("act", ["tanh", "gelu"])
    def test_against_finite_differences(self, act):
        c, S, d, p = make_instance([2, 3, 3, 2], act, samples=2, seed=5)
        v = np.random.default_rng(0).normal(size=parameter_count(c.widths))
        h = 1e-3
        f = {k: output_along(p, c, d, v, k * h) for k in (-2, -1, 0, 1, 2)}
        fd1 = (-f[2] + 8 * f[1] - 8 * f[-1] + f[-2]) / (12 * h)
        fd2 = (-f[2] + 16 * f[1] - 30 * f[0] + 16 * f[-1] - f[-2]) / (12 * h * h)
        out = directional_derivatives(p, c, d, v, 2)
        assert relative_error(out[0], fd1) < 1e-9
        assert relative_error(out[1], fd2) < 1e-6

    def test_order_limit(self):
        c, S, d, p = make_instance([2, 2, 1])
        with pytest.raises(UnsupportedError):
            directional_derivatives(p, c, d, np.ones(parameter_count(c.widths)), 6)

    def test_direction_length(self):
        c, S, d, p = make_instance([2, 2, 1])
        with pytest.raises(InvalidArgumentError):
            directional_derivatives(p, c, d, np.ones(3), 1)


class TestMixedPartial:
    def test_repeated_last_layer_index_linear(self):
        c, S, d, p = make_instance([3, 3, 2], "linear")
        i = ParameterIndex(2, "weight", 0, 1)
        assert not mixed_partial(p, c, d, [i, i]).any()

    def test_permutation_symmetry_is_exact(self):
        c, S, d, p = make_instance([2, 3, 2], "gelu", samples=2, seed=1)
        idx = [1, 7, 7, 12, 4]
        ref = mixed_partial(p, c, d, idx)
        for perm in itertools.permutations(idx):
            assert np.array_equal(mixed_partial(p, c, d, list(perm)), ref)

    def test_second_order_by_differencing_gradients(self):
        c, S, d, p = make_instance([2, 3, 2], "tanh", samples=1, seed=2)
        a, b = 3, 10
        e_a = np.eye(parameter_count(c.widths))[a]
        e_b = np.eye(parameter_count(c.widths))[b]
        h = 1e-4
        grad_b = lambda t: directional_derivatives(  # noqa: E731
            NetworkParams.from_flat(p.flat() + t * e_a, c.widths), c, d, e_b, 1)[0]
        fd = (grad_b(h) - grad_b(-h)) / (2 * h)
        assert relative_error(mixed_partial(p, c, d, [a, b]), fd) < 1e-6

    def test_tensor_matches_mixed_partials(self):
        c, S, d, p = make_instance([2, 2, 1], "tanh", samples=2, seed=3)
        T = derivative_tensor(p, c, d, 3)  # (nL, D, P, P, P)
        for idx in [(0, 1, 2), (4, 4, 8), (8, 8, 8)]:
            np.testing.assert_allclose(T[(slice(None), slice(None)) + idx], mixed_partial(p, c, d, idx),
                                       rtol=1e-13, atol=1e-15)

    def test_tensor_budget(self):
        c, S, d, p = make_instance([3, 5, 2], "tanh")
        with pytest.raises(ResourceError):
            derivative_tensor(p, c, d, 4, budget=10_000)


class TestKernelsFromDefinition:
    def test_single_layer(self):
        c, S, d, p = make_instance([3, 4], "tanh", samples=2)
        np.testing.assert_allclose(kernels_from_definition(p, c, S, d)["H"], ntk_first_layer(c, S, d),
                                   rtol=1e-14, atol=1e-16)

    def test_dntk_slot_symmetry(self):
        c, S, d, p = make_instance([3, 3, 3], "tanh", samples=2, seed=4)
        dH = kernels_from_definition(p, c, S, d, "dntk")["dH"]
        anti = dH - dH.transpose(0, 2, 1, 3, 5, 4)
        assert np.abs(anti).max() <= 1e-12 * np.abs(dH).max()

    @pytest.mark.parametrize("act", ACTS)
    def test_matches_recursions(self, act):
        rng = np.random.default_rng(11)
        c, S, d, p = make_instance([3, 4, 4, 2], act, samples=2, seed=9, strategy=random_strategy(rng, 3))
        ref = kernels_from_definition(p, c, S, d, "ddntk")
        rec = compute_kernels(p, c, S, d, "ddntk").output
        for name, t in ref.items():
            assert relative_error(rec.get(name), t) <= 1e-10, name

    def test_ntk_is_psd(self):
        c, S, d, p = make_instance([2, 3, 2], "gelu", samples=3, seed=6)
        H = kernels_from_definition(p, c, S, d)["H"].transpose(0, 2, 1, 3).reshape(6, 6)
        assert np.linalg.eigvalsh(H).min() >= -1e-12 * np.abs(H).max()

    def test_cap(self):
        c, S, d, p = make_instance([8, 8, 8, 1], "tanh")
        with pytest.raises(ResourceError) as err:
            kernels_from_definition(p, c, S, d, cap=100)
        assert "compute_kernels" in str(err.value)


class TestOneHidden:
    @pytest.mark.parametrize("act", ACTS)
    @pytest.mark.parametrize("k, name", [(2, "dH"), (3, "ddI")])
    def test_low_orders_reproduce_recursions(self, act, k, name):
        c, S, d, p = make_instance([3, 5, 2], act, s=0.5, samples=2, seed=12)
        rec = compute_kernels(p, c, S, d, "ddntk1").output.get(name)
        assert relative_error(onehidden_typeI(p, c, S, d, k), rec) <= 1e-12

    @pytest.mark.parametrize("act", ACTS)
    @pytest.mark.parametrize("k", [2, 3, 4, 5])
    def test_matches_definition(self, act, k):
        rng = np.random.default_rng(k)
        c, S, d, p = make_instance([2, 3, 2], act, samples=2, seed=k, strategy=random_strategy(rng, 2))
        ref = typeI_from_definition(p, c, S, d, k)
        assert relative_error(onehidden_typeI(p, c, S, d, k), ref) <= 1e-9

    def test_needs_one_hidden_layer(self):
        c, S, d, p = make_instance([2, 3, 3, 1], "tanh")
        with pytest.raises(UnsupportedError):
            onehidden_typeI(p, c, S, d, 2)

    @pytest.mark.parametrize("k", [1, 6])
    def test_order_range(self, k):
        c, S, d, p = make_instance([2, 3, 1], "tanh")
        with pytest.raises(UnsupportedError):
            onehidden_typeI(p, c, S, d, k)

    def test_zero_input_linear_odd_structures(self):
        """With x = 0 and no biases every hidden unit is exactly zero, so every differential vanishes."""
        c = NetworkConfig([3, 4, 1], "linear", Cb=0.0)
        from pqrlab import RngStream, derive_meta_family, init_params

        S = derive_meta_family(0.0, 2)
        p = init_params(c, S, RngStream(0))
        d = Dataset(np.zeros((1, 3)))
        assert not onehidden_typeI(p, c, S, d, 3).any()
