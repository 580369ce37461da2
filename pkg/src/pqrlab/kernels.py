"""Per-instance NTK, dNTK and ddNTK tensors by layer-wise forward recursion.

Tensors for layer ``l`` carry neural indices first and sample indices last:

* ``H[i0, i1, d0, d1]``
* ``dH[i0, i1, i2, d0, d1, d2]`` -- slot 0 carries the second derivative
* ``ddI[i0, i1, i2, i3, d0, ..., d3]`` -- slot 0 carries the third derivative
* ``ddII[i0, i1, i2, i3, d0, ..., d3]`` -- slots 0 and 1 carry second
  derivatives sharing one parameter, slots 2 and 3 pair with 0 and 1.

Each step maps layer ``l`` to ``l+1`` given the layer-``l`` preactivations
and the layer-``(l+1)`` weights. Sample tuples are looped over outermost and
every contraction inside is a dense neural-index ``tensordot``/``einsum``,
one neural axis at a time.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import InternalContractError, InvalidArgumentError, ResourceError
from .family import ScalingStrategy
from .network import Dataset, NetworkConfig, NetworkParams, forward, learning_rates

ORDERS = {
    "ntk": frozenset({"H"}),
    "dntk": frozenset({"H", "dH"}),
    "ddntk1": frozenset({"H", "dH", "ddI"}),
    "ddntk2": frozenset({"H", "dH", "ddII"}),
    "ddntk": frozenset({"H", "dH", "ddI", "ddII"}),
}
TENSOR_NAMES = ("H", "dH", "ddI", "ddII")
_RANK = {"H": 2, "dH": 3, "ddI": 4, "ddII": 4}

DEFAULT_MEMORY_BUDGET = 2 * 1024**3


def memory_budget() -> int:
    """Byte budget for one kernel computation (env ``PQRLAB_MEMORY_BUDGET`` overrides)."""
    env = os.environ.get("PQRLAB_MEMORY_BUDGET")
    return int(float(env)) if env else DEFAULT_MEMORY_BUDGET


def _resolve_order(order) -> frozenset:
    try:
        return ORDERS[order]
    except KeyError:
        raise InvalidArgumentError(f"unknown kernel order {order!r}; choose from {sorted(ORDERS)}") from None


@dataclass
class LayerKernels:
    """Kernel tensors of one layer.

    ``computed`` lists the tensors that are known; a name in ``computed``
    whose attribute is ``None`` is identically zero (first-layer differentials).
    """

    H: np.ndarray
    dH: np.ndarray | None = None
    ddI: np.ndarray | None = None
    ddII: np.ndarray | None = None
    computed: frozenset = field(default_factory=lambda: frozenset({"H"}))

    @property
    def width(self) -> int:
        return self.H.shape[0]

    @property
    def samples(self) -> int:
        return self.H.shape[2]

    def get(self, name) -> np.ndarray:
        """Tensor ``name`` with zeros materialized for identically-zero entries."""
        if name not in self.computed:
            raise InvalidArgumentError(f"{name} was not computed at this order")
        t = getattr(self, name)
        if t is None:
            r = _RANK[name]
            t = np.zeros((self.width,) * r + (self.samples,) * r)
        return t

    def scaled(self, eta: float) -> "LayerKernels":
        """``eta H, eta^2 dH, eta^3 ddI, eta^3 ddII``."""
        sc = lambda t, k: None if t is None else t * eta**k  # noqa: E731
        return LayerKernels(sc(self.H, 1), sc(self.dH, 2), sc(self.ddI, 3), sc(self.ddII, 3), self.computed)


@dataclass
class KernelStack:
    """Per-layer kernels; ``layers[l]`` is layer ``l+1`` or ``None`` if not retained."""

    order: str
    layers: list

    @property
    def output(self) -> LayerKernels:
        return self.layers[-1]

    @property
    def L(self) -> int:
        return len(self.layers)


def ntk_first_layer(config: NetworkConfig, strategy: ScalingStrategy, data: Dataset) -> np.ndarray:
    """First-layer NTK: diagonal in neurons, ``(lam_b + lam_W x.x'/n0) / n^q1``."""
    cb, cw = learning_rates(config, strategy)[0]
    x = data.inputs
    if x.shape[1] != config.widths[0]:
        raise InvalidArgumentError(f"inputs have dimension {x.shape[1]}, expected {config.widths[0]}")
    # cw already includes 1/n0
    gram = cb + cw * (x @ x.T)
    n1 = config.widths[1]
    return np.eye(n1)[:, :, None, None] * gram[None, None, :, :]


def estimate_step_bytes(n: int, m: int, D: int, names) -> int:
    """Projected peak bytes of one recursion step ``n -> m`` over ``D`` samples."""
    words = 0
    for name in names:
        r = _RANK[name]
        words += (n**r + m**r) * D**r
    if names & {"ddI", "ddII"}:
        words += 4 * n * m**3 + 3 * n * n * m * D**3
    elif "dH" in names:
        words += 3 * n * m * m + 2 * n * n * m * D**3
    words += D * D * n * m
    return 8 * words


def _check_budget(bytes_needed, budget):
    budget = memory_budget() if budget is None else budget
    if bytes_needed > budget:
        raise ResourceError(bytes_needed, budget, hint="reduce widths/samples or raise PQRLAB_MEMORY_BUDGET")


def kernel_step(z_prev, weights, activation, rates, prev: LayerKernels, order="ntk") -> LayerKernels:
    """Advance the kernel tensors from layer ``l`` to layer ``l+1``.

    ``z_prev`` is the ``(n_l, D)`` block of layer-``l`` preactivations,
    ``weights`` the ``(n_{l+1}, n_l)`` matrix of layer ``l+1`` and ``rates``
    its ``(bias_rate, weight_rate)`` pair. Evaluation order is H, then dH,
    then ddI/ddII, each consuming only lower orders.
    """
    want = _resolve_order(order)
    missing = want - prev.computed
    if missing:
        raise InternalContractError(f"previous layer lacks {sorted(missing)} needed for order {order!r}")
    W = np.asarray(weights, dtype=np.float64)
    m, n = W.shape
    D = z_prev.shape[1]
    cb, cW = rates
    sg, p1, p2, p3 = activation.derivatives(z_prev, 3)
    H = prev.H
    dH, ddI, ddII = prev.dH, prev.ddI, prev.ddII
    samples = range(D)
    # Kronecker deltas between neural slots are applied by updating diagonals in place
    ar = np.arange(m)

    # B[d] = W diag(sigma'(z_d)) is the chain-rule factor for a first derivative leg
    B = [W * p1[None, :, d] for d in samples]
    # G[a][b][j, i] = sum_k H[j, k; a, b] B[b][i, k]
    G = [[H[:, :, a, b] @ B[b].T for b in samples] for a in samples]

    Hn = np.empty((m, m, D, D))
    for a, b in itertools.product(samples, repeat=2):
        h = B[a] @ G[a][b]
        h[ar, ar] += cb + cW * (sg[:, a] @ sg[:, b])
        Hn[:, :, a, b] = h
    out = LayerKernels(Hn, computed=want)
    if want == ORDERS["ntk"]:
        return out

    DH12 = {}

    def dh12(a, b, c):
        # dH[j, k, l; a, b, c] with legs 1 and 2 pushed through B
        key = (a, b, c)
        if key not in DH12:
            if dH is None:
                DH12[key] = None
            else:
                t = np.tensordot(dH[:, :, :, a, b, c], B[c], axes=([2], [1]))  # j, k, i2
                DH12[key] = np.einsum("qk,jks->jqs", B[b], t, optimize=True)
        return DH12[key]

    V = {}

    def v(a, b, c):
        # sum over the second-derivative leg of a hidden neuron j, before the W_{i0 j} factor
        key = (a, b, c)
        if key not in V:
            t = p2[:, a, None, None] * G[a][b][:, :, None] * G[a][c][:, None, :]
            d12 = dh12(a, b, c)
            if d12 is not None:
                t = t + p1[:, a, None, None] * d12
            V[key] = t
        return V[key]

    dHn = np.empty((m, m, m, D, D, D))
    for a, b, c in itertools.product(samples, repeat=3):
        t = np.tensordot(W, v(a, b, c), axes=([1], [0]))
        t[ar, ar, :] += cW * ((p1[:, a] * sg[:, b]) @ G[a][c])[None]  # new weight pairs slots 0, 1
        t[ar, :, ar] += cW * ((p1[:, a] * sg[:, c]) @ G[a][b])[None]  # new weight pairs slots 0, 2
        dHn[..., a, b, c] = t
    out.dH = dHn

    if "ddI" in want:
        ddIn = np.empty((m,) * 4 + (D,) * 4)
        for a, b, c, d in itertools.product(samples, repeat=4):
            # all three legs on earlier layers: S[j, i1, i2, i3] before the W_{i0 j} factor
            inner = p3[:, a, None, None] * G[a][c][:, :, None] * G[a][d][:, None, :]
            if dH is not None:
                inner += p2[:, a, None, None] * dh12(a, c, d)
            S = G[a][b][:, :, None, None] * inner[:, None, :, :]
            if dH is not None:
                S += dh12(a, b, c)[:, :, :, None] * (p2[:, a, None] * G[a][d])[:, None, None, :]
                S += dh12(a, b, d)[:, :, None, :] * (p2[:, a, None] * G[a][c])[:, None, :, None]
            t = np.tensordot(W, S, axes=([1], [0]))
            if ddI is not None:
                u = np.tensordot(ddI[:, :, :, :, a, b, c, d], B[b], axes=([1], [1]))  # j, l, r, i1
                u = np.tensordot(u, B[c], axes=([1], [1]))  # j, r, i1, i2
                u = np.tensordot(u, B[d], axes=([1], [1]))  # j, i1, i2, i3
                t += np.tensordot(B[a], u, axes=([1], [0]))
            # one derivative on a new-layer weight, paired with slot 1, 2 or 3
            t[ar, ar, :, :] += cW * np.tensordot(sg[:, b], v(a, c, d), axes=([0], [0]))[None]
            t[ar, :, ar, :] += cW * np.tensordot(sg[:, c], v(a, b, d), axes=([0], [0]))[None]
            t[ar, :, :, ar] += cW * np.tensordot(sg[:, d], v(a, b, c), axes=([0], [0]))[None]
            ddIn[..., a, b, c, d] = t
        out.ddI = ddIn

    if "ddII" in want:
        DH2 = {}

        def dh2(x, y, z):
            # dH[j, l, k; x, y, z] with only leg 2 pushed through B
            key = (x, y, z)
            if key not in DH2:
                DH2[key] = None if dH is None else np.tensordot(dH[:, :, :, x, y, z], B[z], axes=([2], [1]))
            return DH2[key]

        P = {}

        def pp(x, y, z):
            # P[i, l, i'] = sum_j W_ij [s''_jx H_jl;xy G_ji';xz + s'_jx DH2_jli';xyz]
            key = (x, y, z)
            if key not in P:
                t = np.einsum("ij,jl,jk->ilk", W * p2[None, :, x], H[:, :, x, y], G[x][z], optimize=True)
                d2 = dh2(x, y, z)
                if d2 is not None:
                    t = t + np.tensordot(W * p1[None, :, x], d2, axes=([1], [0]))
                P[key] = t
            return P[key]

        ddIIn = np.empty((m,) * 4 + (D,) * 4)
        for a, b, c, d in itertools.product(samples, repeat=4):
            t = np.einsum("pj,jr,qjs->pqrs", W * p2[None, :, a], G[a][c], pp(b, a, d), optimize=True)
            d2 = dh2(a, b, c)
            if d2 is not None:
                Z = np.einsum("jks,qk,kt->jqst", d2, W * p2[None, :, b], G[b][d], optimize=True)
                t += np.tensordot(B[a], Z, axes=([1], [0]))
            if ddII is not None:
                u = np.tensordot(ddII[:, :, :, :, a, b, c, d], B[b], axes=([1], [1]))  # j, l, r, i1
                u = np.tensordot(u, B[c], axes=([1], [1]))  # j, r, i1, i2
                u = np.tensordot(u, B[d], axes=([1], [1]))  # j, i1, i2, i3
                t += np.tensordot(B[a], u, axes=([1], [0]))
            # one new-layer weight shared by the two second-derivative legs
            t[ar, ar, :, :] += cW * np.einsum("l,lr,ls->rs", p1[:, a] * p1[:, b], G[a][c], G[b][d])[None]
            # new-layer weight in leg 2 (pairs slots 0, 2) or leg 3 (pairs slots 1, 3)
            cc = np.tensordot(p1[:, a] * sg[:, c], pp(b, a, d), axes=([0], [1]))  # i1, i3
            t[ar, :, ar, :] += cW * cc[None]
            dd = np.tensordot(p1[:, b] * sg[:, d], pp(a, b, c), axes=([0], [1]))  # i0, i2
            t[:, ar, :, ar] += cW * dd[None]  # advanced axis (i1 = i3) comes first
            # new-layer weights in both leg 2 and leg 3
            aa = cW * cW * ((p1[:, a] * sg[:, c]) @ H[:, :, a, b] @ (p1[:, b] * sg[:, d]))
            t[ar[:, None], ar[None, :], ar[:, None], ar[None, :]] += aa
            ddIIn[..., a, b, c, d] = t
        out.ddII = ddIIn
    return out


def compute_kernels(
    params: NetworkParams,
    config: NetworkConfig,
    strategy: ScalingStrategy,
    data: Dataset,
    order="ntk",
    keep_layers: bool = True,
    budget: int | None = None,
) -> KernelStack:
    """Full kernel stack through the output layer.

    The projected peak memory of every step is checked against ``budget``
    (default :func:`memory_budget`) before anything is allocated.
    """
    want = _resolve_order(order)
    if strategy.L != config.L:
        raise InvalidArgumentError(f"strategy depth {strategy.L} != network depth {config.L}")
    D = data.size
    for l in range(config.L - 1):
        _check_budget(estimate_step_bytes(config.widths[l + 1], config.widths[l + 2], D, want), budget)
    trace = forward(params, config, data)
    rates = learning_rates(config, strategy)
    layer = LayerKernels(ntk_first_layer(config, strategy, data), computed=want)
    layers = [layer]
    for l in range(1, config.L):
        layer = kernel_step(trace.z[l - 1], params.weights[l], config.activation, rates[l], layer, order)
        if not keep_layers:
            layers[-1] = None
        layers.append(layer)
    return KernelStack(order, layers)
