"""Finite-width MLP: smooth activations, configuration, scaled init, forward pass."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial import hermite_e, polynomial
from scipy.optimize import brentq
from scipy.special import ndtr

from .errors import InvalidArgumentError, NumericOverflowError, ShapeError
from .family import ScalingStrategy
from .numerics import MAX_JET_ORDER, Jet, RngStream, gaussian_sample

# ---------------------------------------------------------------- activations


def _linear_derivs(z, order):
    z = np.asarray(z, dtype=np.float64)
    out = np.zeros((order + 1,) + z.shape)
    out[0] = z
    if order >= 1:
        out[1] = 1.0
    return out


@functools.lru_cache(maxsize=None)
def _tanh_polys(order):
    # d^k tanh / dz^k = P_k(tanh z) with P_{k+1}(t) = P_k'(t) (1 - t^2)
    polys = [np.array([0.0, 1.0])]
    one_minus_t2 = np.array([1.0, 0.0, -1.0])
    for _ in range(order):
        polys.append(polynomial.polymul(polynomial.polyder(polys[-1]), one_minus_t2))
    return tuple(polys)


def _tanh_derivs(z, order):
    t = np.tanh(np.asarray(z, dtype=np.float64))
    return np.stack([polynomial.polyval(t, c) for c in _tanh_polys(order)])


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu_derivs(z, order):
    # gelu = z * Phi(z); by Leibniz, gelu^(k) = z Phi^(k) + k Phi^(k-1),
    # with Phi^(m) = (-1)^(m-1) He_{m-1}(z) phi(z) for m >= 1
    z = np.asarray(z, dtype=np.float64)
    phi = np.exp(-0.5 * z * z) * _INV_SQRT_2PI
    cdf_derivs = [ndtr(z)]
    for m in range(1, order + 1):
        he = hermite_e.hermeval(z, [0.0] * (m - 1) + [1.0])
        cdf_derivs.append((-1.0) ** (m - 1) * he * phi)
    out = [z * cdf_derivs[0]]
    for k in range(1, order + 1):
        out.append(z * cdf_derivs[k] + k * cdf_derivs[k - 1])
    return np.stack(out)


@dataclass(frozen=True)
class Activation:
    name: str
    _derivs: Callable = field(repr=False, compare=False)

    def __call__(self, z):
        return self._derivs(z, 0)[0]

    def derivatives(self, z, order: int = MAX_JET_ORDER) -> np.ndarray:
        """Stack ``[sigma(z), sigma'(z), ..., sigma^(order)(z)]``."""
        if not 0 <= order <= MAX_JET_ORDER:
            raise InvalidArgumentError(f"derivative order must lie in [0, {MAX_JET_ORDER}]")
        return self._derivs(z, order)

    def jet(self, x: Jet) -> Jet:
        return x.compose(self.derivatives(x.coeffs[0], x.order))


ACTIVATIONS = {
    "linear": Activation("linear", _linear_derivs),
    "tanh": Activation("tanh", _tanh_derivs),
    "gelu": Activation("gelu", _gelu_derivs),
}


def get_activation(name) -> Activation:
    if isinstance(name, Activation):
        return name
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise InvalidArgumentError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


# ------------------------------------------------------------ criticality


def _gauss_expect(fn, K, nodes=200):
    x, w = hermite_e.hermegauss(nodes)
    return float(np.sum(w * fn(math.sqrt(K) * x)) / np.sum(w))


@functools.lru_cache(maxsize=None)
def critical_hyperparameters(activation) -> tuple[float, float]:
    """``(C_b, C_W)`` tuning a deep stack of this activation to criticality.

    Solved on the single-input variance recursion ``K' = C_b + C_W <s(z)^2>_K``:
    both susceptibilities ``C_W <s'^2>_K`` and ``d K'/dK = C_W <s'^2 + s s''>_K``
    must equal one at the fixed point ``K*``. That forces ``<s s''>_{K*} = 0``.
    Activations whose ``<s s''>`` never vanishes for ``K > 0`` (tanh) sit in
    the ``K* = 0`` class, where the conditions reduce to ``C_b = 0`` and
    ``C_W = 1 / s'(0)^2``.
    """
    act = get_activation(activation)
    if act.name == "linear":
        return (0.0, 1.0)

    def sss(K):
        return _gauss_expect(lambda z: (lambda d: d[0] * d[2])(act.derivatives(z, 2)), K)

    grid = np.geomspace(1e-3, 50.0, 60)
    vals = np.array([sss(K) for K in grid])
    sign_change = np.nonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0)[0]
    if sign_change.size == 0:
        slope0 = float(act.derivatives(0.0, 1)[1])
        return (0.0, 1.0 / slope0**2)
    i = sign_change[0]
    K_star = brentq(sss, grid[i], grid[i + 1], xtol=1e-14)
    cw = 1.0 / _gauss_expect(lambda z: act.derivatives(z, 1)[1] ** 2, K_star)
    cb = K_star - cw * _gauss_expect(lambda z: act(z) ** 2, K_star)
    return (float(cb), float(cw))


# ------------------------------------------------------------------ network


def _per_layer(values, L, name):
    try:
        arr = np.broadcast_to(np.asarray(values, dtype=np.float64), (L,)).copy()
    except ValueError:
        raise InvalidArgumentError(f"{name} must be a scalar or have length L={L}") from None
    if np.any(~np.isfinite(arr)) or np.any(arr < 0):
        raise InvalidArgumentError(f"{name} must be finite and >= 0")
    return arr


@dataclass(frozen=True)
class NetworkConfig:
    """Widths ``n_0..n_L`` and the order-one hyperparameters of every layer.

    Scalars passed for the per-layer arrays are broadcast to all ``L`` layers.
    """

    widths: tuple
    activation: Activation
    Cb: np.ndarray
    Cw: np.ndarray
    lam_b: np.ndarray
    lam_w: np.ndarray
    eta0: float = 1.0

    def __init__(self, widths, activation="tanh", Cb=0.0, Cw=1.0, lam_b=1.0, lam_w=1.0, eta0=1.0):
        widths = tuple(int(n) for n in widths)
        if len(widths) < 2:
            raise InvalidArgumentError("need at least an input and an output width (L >= 1)")
        if any(n < 1 for n in widths):
            raise InvalidArgumentError(f"all widths must be >= 1, got {widths}")
        L = len(widths) - 1
        set_ = object.__setattr__
        set_(self, "widths", widths)
        set_(self, "activation", get_activation(activation))
        set_(self, "Cb", _per_layer(Cb, L, "Cb"))
        set_(self, "Cw", _per_layer(Cw, L, "Cw"))
        set_(self, "lam_b", _per_layer(lam_b, L, "lam_b"))
        set_(self, "lam_w", _per_layer(lam_w, L, "lam_w"))
        if not eta0 >= 0 or not np.isfinite(eta0):
            raise InvalidArgumentError(f"eta0 must be finite and >= 0, got {eta0}")
        set_(self, "eta0", float(eta0))

    @property
    def L(self) -> int:
        return len(self.widths) - 1

    @property
    def n(self) -> int:
        """Typical width that every width power refers to: ``n_{L-1}``."""
        return self.widths[-2]

    def eta(self, strategy: ScalingStrategy) -> float:
        return float(self.n) ** strategy.r * self.eta0

    def with_eta0(self, eta0):
        return NetworkConfig(self.widths, self.activation, self.Cb, self.Cw, self.lam_b, self.lam_w, eta0)

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths),
            "activation": self.activation.name,
            "Cb": self.Cb.tolist(),
            "Cw": self.Cw.tolist(),
            "lam_b": self.lam_b.tolist(),
            "lam_w": self.lam_w.tolist(),
            "eta0": self.eta0,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["widths"], d["activation"], d["Cb"], d["Cw"], d["lam_b"], d["lam_w"], d.get("eta0", 1.0))

    @classmethod
    def critical(cls, widths, activation="tanh", lam_b=1.0, lam_w=1.0, eta0=1.0):
        cb, cw = critical_hyperparameters(get_activation(activation).name)
        return cls(widths, activation, cb, cw, lam_b, lam_w, eta0)


def learning_rates(config: NetworkConfig, strategy: ScalingStrategy):
    """Per-layer diagonal learning-rate tensor entries ``(bias_rate, weight_rate)``
    (without the global ``eta``)."""
    n = float(config.n)
    out = []
    for l in range(config.L):
        scale = n ** (-strategy.q[l])
        out.append((config.lam_b[l] * scale, config.lam_w[l] * scale / config.widths[l]))
    return out


@dataclass(frozen=True)
class NetworkParams:
    biases: tuple
    weights: tuple

    def __post_init__(self):
        object.__setattr__(self, "biases", tuple(np.asarray(b, dtype=np.float64) for b in self.biases))
        object.__setattr__(self, "weights", tuple(np.asarray(W, dtype=np.float64) for W in self.weights))
        if len(self.biases) != len(self.weights):
            raise ShapeError("need one bias vector per weight matrix")
        for l, (b, W) in enumerate(zip(self.biases, self.weights)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise ShapeError(f"layer {l + 1}: bias {b.shape} inconsistent with weights {W.shape}")

    @property
    def L(self):
        return len(self.weights)

    def check(self, config: NetworkConfig):
        if self.L != config.L:
            raise ShapeError(f"params have {self.L} layers, config has {config.L}")
        for l, W in enumerate(self.weights):
            if W.shape != (config.widths[l + 1], config.widths[l]):
                raise ShapeError(f"layer {l + 1} weights {W.shape} do not match widths {config.widths}")
        return self

    def flat(self) -> np.ndarray:
        """Per layer: bias vector then row-major weights."""
        return np.concatenate([np.concatenate([b, W.ravel()]) for b, W in zip(self.biases, self.weights)])

    @classmethod
    def from_flat(cls, theta, widths):
        theta = np.asarray(theta, dtype=np.float64).ravel()
        if theta.size != parameter_count(widths):
            raise ShapeError(f"flat vector has {theta.size} entries, widths need {parameter_count(widths)}")
        biases, weights, pos = [], [], 0
        for l in range(len(widths) - 1):
            m, n = widths[l + 1], widths[l]
            biases.append(theta[pos:pos + m])
            pos += m
            weights.append(theta[pos:pos + m * n].reshape(m, n))
            pos += m * n
        if pos != theta.size:
            raise ShapeError(f"flat vector has {theta.size} entries, widths need {pos}")
        return cls(biases, weights)

    def map(self, fn):
        return NetworkParams([fn(b) for b in self.biases], [fn(W) for W in self.weights])


def parameter_count(widths) -> int:
    return sum(widths[l + 1] * (widths[l] + 1) for l in range(len(widths) - 1))


def init_params(config: NetworkConfig, strategy: ScalingStrategy, stream: RngStream) -> NetworkParams:
    """Draw biases and weights with variances ``C_b / n^p`` and ``C_W / (n^p n_{l-1})``."""
    if strategy.L != config.L:
        raise InvalidArgumentError(f"strategy depth {strategy.L} != network depth {config.L}")
    n = float(config.n)
    biases, weights = [], []
    for l in range(config.L):
        m, fan_in = config.widths[l + 1], config.widths[l]
        scale = n ** (-strategy.p[l])
        biases.append(gaussian_sample(stream, 0.0, config.Cb[l] * scale, m))
        weights.append(gaussian_sample(stream, 0.0, config.Cw[l] * scale / fan_in, m * fan_in).reshape(m, fan_in))
    return NetworkParams(biases, weights)


@dataclass(frozen=True)
class Dataset:
    """Inputs ``x[delta, j]`` (one row per sample) and optional labels ``y[delta, i]``."""

    inputs: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        if x.shape[0] < 1:
            raise InvalidArgumentError("dataset needs at least one sample")
        object.__setattr__(self, "inputs", x)
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.float64).reshape(x.shape[0], -1)
            object.__setattr__(self, "labels", y)

    @property
    def size(self):
        return self.inputs.shape[0]

    @classmethod
    def unit_norm(cls, n0: int, count: int, rng: np.random.Generator, n_out: int | None = None):
        """Random inputs rescaled so that ``sum_j x_j^2 / n0 = 1`` per sample."""
        x = rng.standard_normal((count, n0))
        x *= np.sqrt(n0) / np.linalg.norm(x, axis=1, keepdims=True)
        y = rng.standard_normal((count, n_out)) if n_out else None
        return cls(x, y)

    @classmethod
    def from_csv(cls, path, n0: int):
        raw = np.loadtxt(path, delimiter=",", ndmin=2)
        if raw.shape[1] < n0:
            raise ShapeError(f"CSV has {raw.shape[1]} columns, need at least n0={n0}")
        labels = raw[:, n0:] if raw.shape[1] > n0 else None
        return cls(raw[:, :n0], labels)

    def to_csv(self, path):
        rows = self.inputs if self.labels is None else np.hstack([self.inputs, self.labels])
        np.savetxt(path, rows, delimiter=",", fmt="%.17g")


@dataclass(frozen=True)
class ForwardTrace:
    """``z[l]`` holds layer ``l+1`` preactivations with shape ``(n_{l+1}, |D|)``."""

    z: tuple

    @property
    def output(self) -> np.ndarray:
        return self.z[-1]


def forward(params: NetworkParams, config: NetworkConfig, data: Dataset) -> ForwardTrace:
    params.check(config)
    x = data.inputs
    if x.shape[1] != config.widths[0]:
        raise ShapeError(f"inputs have dimension {x.shape[1]}, network expects n0={config.widths[0]}")
    zs = []
    act = config.activation
    a = x.T
    for l in range(config.L):
        with np.errstate(over="ignore", invalid="ignore"):
            z = params.biases[l][:, None] + params.weights[l] @ a
        if not np.all(np.isfinite(z)):
            raise NumericOverflowError(l + 1)
        zs.append(z)
        a = act(z)
    return ForwardTrace(tuple(zs))
