"""Brute-force ground truth for NTK differentials.

Every derivative here comes from truncated Taylor jets pushed through the
forward pass along straight lines in parameter space; mixed partials follow by
polarization. Nothing in this module shares code with the layer recursions of
:mod:`pqrlab.kernels`, which is the point.
"""

from __future__ import annotations

import itertools
import math
import string
from typing import NamedTuple

import numpy as np

from .errors import InvalidArgumentError, ResourceError, UnsupportedError
from .family import ScalingStrategy
from .kernels import ORDERS, _resolve_order, memory_budget
from .network import Dataset, NetworkConfig, NetworkParams, forward, learning_rates, parameter_count
from .numerics import MAX_JET_ORDER, Jet

DEFAULT_PARAMETER_CAP = 500
_CHUNK = 2048


class ParameterIndex(NamedTuple):
    layer: int  # 1-based
    kind: str  # "bias" | "weight"
    row: int
    col: int | None = None


def parameter_indices(config: NetworkConfig) -> list[ParameterIndex]:
    """All parameters in flat order: per layer the bias vector, then weights row-major."""
    out = []
    for l in range(config.L):
        m, n = config.widths[l + 1], config.widths[l]
        out += [ParameterIndex(l + 1, "bias", i) for i in range(m)]
        out += [ParameterIndex(l + 1, "weight", i, j) for i in range(m) for j in range(n)]
    return out


def flat_position(config: NetworkConfig, idx: ParameterIndex) -> int:
    pos = 0
    for l in range(idx.layer - 1):
        pos += config.widths[l + 1] * (config.widths[l] + 1)
    m, n = config.widths[idx.layer], config.widths[idx.layer - 1]
    if not 0 <= idx.row < m:
        raise InvalidArgumentError(f"row {idx.row} out of range for layer {idx.layer}")
    if idx.kind == "bias":
        return pos + idx.row
    if idx.kind != "weight" or idx.col is None or not 0 <= idx.col < n:
        raise InvalidArgumentError(f"bad parameter index {idx}")
    return pos + m + idx.row * n + idx.col


def parameter_rates(config: NetworkConfig, strategy: ScalingStrategy) -> np.ndarray:
    """Diagonal learning-rate tensor entries per flat parameter (without ``eta``)."""
    parts = []
    for l, (rb, rw) in enumerate(learning_rates(config, strategy)):
        m, n = config.widths[l + 1], config.widths[l]
        parts += [np.full(m, rb), np.full(m * n, rw)]
    return np.concatenate(parts)


def _jet_outputs(params: NetworkParams, config: NetworkConfig, data: Dataset, directions, order):
    """Taylor coefficients ``c_k`` of ``f(theta + t v)`` for a batch of directions.

    Returns an array ``(order + 1, n_dirs, n_L, D)``.
    """
    V = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    nb = V.shape[0]
    act = config.activation
    x = data.inputs.T  # (n0, D)
    a = None  # jet coefficients of the layer input, (K+1, nb, n, D); None means the constant x
    pos = 0
    for l in range(config.L):
        m, n = config.widths[l + 1], config.widths[l]
        db = V[:, pos:pos + m]
        pos += m
        dW = V[:, pos:pos + m * n].reshape(nb, m, n)
        pos += m * n
        b0, W0 = params.biases[l], params.weights[l]
        z = np.zeros((order + 1, nb, m, data.size))
        if a is None:
            z[0] = (b0[:, None] + W0 @ x)[None]
            z[1] = db[:, :, None] + np.einsum("bmn,nd->bmd", dW, x)
        else:
            z[0] = b0[None, :, None] + np.einsum("mn,bnd->bmd", W0, a[0])
            z[1] = db[:, :, None]
            for k in range(1, order + 1):
                z[k] += np.einsum("mn,bnd->bmd", W0, a[k])
            for k in range(1, order + 1):
                z[k] += np.einsum("bmn,bnd->bmd", dW, a[k - 1])
        if l == config.L - 1:
            return z
        a = act.jet(Jet(z)).coeffs


def directional_derivatives(params, config, data, direction, order: int) -> np.ndarray:
    """``d^k/dt^k f(theta + t v)`` at ``t = 0`` for ``k = 1..order``; shape ``(order, n_L, D)``."""
    if not 1 <= order <= MAX_JET_ORDER:
        raise UnsupportedError(f"directional derivative order must lie in [1, {MAX_JET_ORDER}], got {order}")
    v = np.asarray(direction, dtype=np.float64).ravel()
    if v.size != parameter_count(config.widths):
        raise InvalidArgumentError(f"direction has {v.size} entries, network has {parameter_count(config.widths)}")
    params.check(config)
    c = _jet_outputs(params, config, data, v[None], order)[:, 0]
    fact = np.array([math.factorial(k) for k in range(order + 1)])
    return (c * fact[:, None, None])[1:]


def mixed_partial(params, config, data, indices) -> np.ndarray:
    """``d^k f / d theta_{a_1} ... d theta_{a_k}`` by polarization; shape ``(n_L, D)``."""
    k = len(indices)
    if not 1 <= k <= MAX_JET_ORDER:
        raise UnsupportedError(f"mixed partial order must lie in [1, {MAX_JET_ORDER}], got {k}")
    P = parameter_count(config.widths)
    # sorting makes the polarization sum, and hence the float result, order-independent
    pos = sorted(flat_position(config, i) if isinstance(i, ParameterIndex) else int(i) for i in indices)
    subsets = [T for r in range(1, k + 1) for T in itertools.combinations(range(k), r)]
    V = np.zeros((len(subsets), P))
    for row, T in enumerate(subsets):
        for t in T:
            V[row, pos[t]] += 1.0
    ck = _jet_outputs(params, config, data, V, k)[k]
    signs = np.array([(-1.0) ** (k - len(T)) for T in subsets])
    return np.tensordot(signs, ck, axes=(0, 0))


def _multisets(P, k):
    return np.array(list(itertools.combinations_with_replacement(range(P), k)), dtype=np.int64).reshape(-1, k)


def _encode(sorted_rows, P):
    # sorted index tuples padded on the left with -1 -> unique integer codes
    base = P + 1
    code = np.zeros(sorted_rows.shape[0], dtype=np.int64)
    for col in range(sorted_rows.shape[1]):
        code = code * base + (sorted_rows[:, col] + 1)
    return code


def derivative_tensor(params, config, data, k: int, budget: int | None = None) -> np.ndarray:
    """All order-``k`` partials ``T[i, d, mu_1, ..., mu_k]`` of the network output."""
    if not 1 <= k <= MAX_JET_ORDER:
        raise UnsupportedError(f"derivative order must lie in [1, {MAX_JET_ORDER}], got {k}")
    params.check(config)
    P = parameter_count(config.widths)
    nL, D = config.widths[-1], data.size
    budget = memory_budget() if budget is None else budget
    need = 8 * nL * D * P**k * 2
    if need > budget:
        raise ResourceError(need, budget, hint="the definition oracle is brute force; use the recursions instead")

    # every sub-multiset of a size-k multiset is itself a multiset of size 1..k
    dirs = [_multisets(P, r) for r in range(1, k + 1)]
    codes = np.concatenate([_encode(np.pad(d, ((0, 0), (k - d.shape[1], 0)), constant_values=-1), P) for d in dirs])
    order = np.argsort(codes)
    codes = codes[order]
    ck = np.empty((codes.size, nL, D))
    flat_dirs = [row for d in dirs for row in d]
    flat_dirs = [flat_dirs[i] for i in order]
    for start in range(0, codes.size, _CHUNK):
        rows = flat_dirs[start:start + _CHUNK]
        V = np.zeros((len(rows), P))
        for r, idx in enumerate(rows):
            np.add.at(V[r], idx, 1.0)
        ck[start:start + len(rows)] = _jet_outputs(params, config, data, V, k)[k]

    full = _multisets(P, k)
    partial = np.zeros((full.shape[0], nL, D))
    for r in range(1, k + 1):
        for T in itertools.combinations(range(k), r):
            sub = np.full((full.shape[0], k), -1, dtype=np.int64)
            sub[:, k - r:] = full[:, list(T)]  # columns of a sorted row stay sorted
            pos = np.searchsorted(codes, _encode(sub, P))
            partial += (-1.0) ** (k - r) * ck[pos]

    # scatter the symmetric values onto the full grid
    grid = np.indices((P,) * k).reshape(k, -1).T
    pos = np.searchsorted(_encode(full, P), _encode(np.sort(grid, axis=1), P))
    T = partial[pos].reshape((P,) * k + (nL, D))
    return np.moveaxis(T, (k, k + 1), (0, 1))


def _check_cap(config, cap):
    P = parameter_count(config.widths)
    if P > cap:
        raise ResourceError(P, cap, what="parameters", hint="use compute_kernels (layer recursions) at this size")


def kernels_from_definition(params, config, strategy, data, order="ntk", cap: int = DEFAULT_PARAMETER_CAP) -> dict:
    """Output-layer ``H``/``dH``/``ddI``/``ddII`` assembled from explicit parameter sums."""
    want = _resolve_order(order)
    _check_cap(config, cap)
    lam = parameter_rates(config, strategy)
    T1 = derivative_tensor(params, config, data, 1)
    U = T1 * lam
    out = {"H": np.einsum("iam,jbm->ijab", T1, U)}
    if want & {"dH", "ddII"}:
        T2 = derivative_tensor(params, config, data, 2)
    if "dH" in want:
        out["dH"] = np.einsum("iamn,jbm,kcn->ijkabc", T2, U, U, optimize=True)
    if "ddI" in want:
        T3 = derivative_tensor(params, config, data, 3)
        out["ddI"] = np.einsum("iamnr,jbm,kcn,ldr->ijklabcd", T3, U, U, U, optimize=True)
    if "ddII" in want:
        out["ddII"] = np.einsum("iamn,jbmr,kcn,ldr,m->ijklabcd", T2, T2, U, U, lam, optimize=True)
    return out


def _legs_einsum(k, A0, legs, extra=None):
    """Sum over a shared hidden index of a slot-0 factor and ``k`` leg factors.

    ``A0`` is ``(n_L, n1, D)`` and each leg ``(n_L, n1, D, D)`` indexed
    ``(i_a, j, d_0, d_a)``. Output ``(n_L,)*(k+1) + (D,)*(k+1)``.
    """
    I = string.ascii_lowercase[: k + 1]
    Dl = string.ascii_uppercase[: k + 1]
    terms = [f"{I[0]}j{Dl[0]}"] + [f"{I[a]}j{Dl[0]}{Dl[a]}" for a in range(1, k + 1)]
    return np.einsum(",".join(terms) + "->" + I + Dl, A0, *legs, optimize=True)


def typeI_from_definition(params, config, strategy, data, k: int, cap: int = DEFAULT_PARAMETER_CAP) -> np.ndarray:
    """``sum lam^k d^k f_0 df_1 ... df_k`` -- the type-I order-``(k-1)`` differential."""
    if not 2 <= k <= MAX_JET_ORDER:
        raise UnsupportedError(f"k must lie in [2, {MAX_JET_ORDER}], got {k}")
    _check_cap(config, cap)
    lam = parameter_rates(config, strategy)
    U = derivative_tensor(params, config, data, 1) * lam
    Tk = derivative_tensor(params, config, data, k)
    I = string.ascii_lowercase[: k + 1]
    Dl = string.ascii_uppercase[: k + 1]
    mus = string.ascii_lowercase[10: 10 + k]
    subscripts = f"{I[0]}{Dl[0]}{mus}," + ",".join(f"{I[a]}{Dl[a]}{mus[a - 1]}" for a in range(1, k + 1))
    return np.einsum(subscripts + "->" + I + Dl, Tk, *([U] * k), optimize=True)


def first_layer_scalar(config: NetworkConfig, strategy: ScalingStrategy, data: Dataset) -> np.ndarray:
    """Neural-index-stripped first-layer NTK ``H1[d0, d1]``."""
    rb, rw = learning_rates(config, strategy)[0]
    return rb + rw * (data.inputs @ data.inputs.T)


def onehidden_typeI(params, config, strategy, data, k: int) -> np.ndarray:
    """Closed-form type-I order-``(k-1)`` differential of a one-hidden-layer net.

    Sum of the first-kind term (all ``k`` derivatives on first-layer
    parameters) and, for each slot ``a = 1..k``, the second-kind term where
    the derivative paired with slot ``a`` hits a second-layer weight.
    """
    if config.L != 2:
        raise UnsupportedError(f"closed forms need exactly one hidden layer (L=2), got L={config.L}")
    if not 2 <= k <= MAX_JET_ORDER:
        raise UnsupportedError(f"k must lie in [2, {MAX_JET_ORDER}], got {k}")
    z = forward(params, config, data).z[0]  # (n1, D)
    sig = config.activation.derivatives(z, k)  # (k+1, n1, D)
    W2 = params.weights[1]  # (nL, n1)
    H1 = first_layer_scalar(config, strategy, data)  # (D, D)
    _, rw2 = learning_rates(config, strategy)[1]

    leg = W2[:, :, None, None] * sig[1][None, :, None, :] * H1[None, None, :, :]
    out = _legs_einsum(k, W2[:, :, None] * sig[k][None], [leg] * k)

    nL = config.widths[-1]
    eye = np.eye(nL)
    A0 = sig[k - 1][None]  # slot 0 lost its weight: size-1 neural axis
    leg_a = sig[0][None, :, None, :] * np.ones((1, 1, data.size, 1))  # slot a: sigma(z), no weight
    for a in range(1, k + 1):
        legs = [leg] * k
        legs[a - 1] = leg_a
        t = _legs_einsum(k, A0, legs)  # size-1 axes at slots 0 and a
        delta = eye.reshape((nL,) + (1,) * (a - 1) + (nL,) + (1,) * (2 * k + 1 - a))
        out = out + rw2 * delta * t
    return out
