"""Numerical kit: counter-based Gaussian streams, truncated Taylor jets,
checked tensor contraction and log-log slope fitting."""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np
from scipy import stats

from .errors import DomainError, InvalidArgumentError, ShapeError

MAX_JET_ORDER = 5

_MASK64 = (1 << 64) - 1


class RngStream:
    """Reproducible Gaussian stream keyed by ``(root_seed, stream_index)``.

    Backed by Philox4x64, a counter-based generator: the 128-bit key is the
    pair ``(root_seed, stream_index)`` and the counter starts at zero, so a
    stream's output depends only on its key and how much has been drawn from
    it. Streams are never shared between threads; parallel tasks build their
    own via :meth:`spawn`-style keys ``(root_seed, task_index)``.
    """

    def __init__(self, root_seed: int, stream_index: int = 0):
        self.root_seed = int(root_seed)
        self.stream_index = int(stream_index)
        key = np.array([self.root_seed & _MASK64, self.stream_index & _MASK64], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))
        self.draws = 0

    def standard_normal(self, count: int) -> np.ndarray:
        out = self._gen.standard_normal(int(count))
        self.draws += int(count)
        return out

    def __repr__(self):
        return f"RngStream(root_seed={self.root_seed}, stream_index={self.stream_index}, draws={self.draws})"


def gaussian_sample(stream: RngStream, mean: float, variance: float, count: int) -> np.ndarray:
    """I.i.d. normal draws with the given mean and variance."""
    if variance < 0 or not np.isfinite(variance):
        raise InvalidArgumentError(f"variance must be finite and >= 0, got {variance}")
    if count < 0:
        raise InvalidArgumentError(f"count must be >= 0, got {count}")
    x = stream.standard_normal(count)
    if variance == 0:
        return np.full(count, float(mean))
    return mean + math.sqrt(variance) * x


def check_finite(array: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(array)):
        raise DomainError(f"{what} contains NaN or Inf")
    return array


def relative_error(actual, expected) -> float:
    """``max|actual - expected| / max|expected|``; 0 when both vanish identically."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    if actual.shape != expected.shape:
        raise ShapeError(f"shapes differ: {actual.shape} vs {expected.shape}")
    diff = float(np.max(np.abs(actual - expected), initial=0.0))
    scale = float(np.max(np.abs(expected), initial=0.0))
    if scale == 0.0:
        return 0.0 if diff == 0.0 else math.inf
    return diff / scale


def contract(a: np.ndarray, b: np.ndarray, axes: Sequence[tuple[int, int]]) -> np.ndarray:
    """Sum-of-products contraction over paired axes ``[(axis_in_a, axis_in_b), ...]``.

    The result carries the unpaired axes of ``a`` followed by those of ``b``,
    each in their original order.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    axes = [(int(i), int(j)) for i, j in axes]
    ia = [i % a.ndim if a.ndim else i for i, _ in axes]
    ib = [j % b.ndim if b.ndim else j for _, j in axes]
    if len(set(ia)) != len(ia) or len(set(ib)) != len(ib):
        raise ShapeError("an axis may be paired at most once")
    for i, j in zip(ia, ib):
        if not (0 <= i < a.ndim and 0 <= j < b.ndim):
            raise ShapeError(f"axis pair ({i}, {j}) out of range for shapes {a.shape}, {b.shape}")
        if a.shape[i] != b.shape[j]:
            raise ShapeError(f"axis {i} of a has length {a.shape[i]} but axis {j} of b has length {b.shape[j]}")
    check_finite(a, "left operand")
    check_finite(b, "right operand")
    return np.tensordot(a, b, axes=(ia, ib))


class LogLogFit(NamedTuple):
    slope: float
    intercept: float
    stderr: float


def fit_loglog_slope(points: Sequence[tuple[float, float]]) -> LogLogFit:
    """Ordinary least squares of ``log y`` on ``log x``."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
        raise InvalidArgumentError("need at least 3 (x, y) points")
    if np.any(~np.isfinite(pts)) or np.any(pts <= 0):
        raise DomainError("log-log fit needs strictly positive, finite x and y")
    res = stats.linregress(np.log(pts[:, 0]), np.log(pts[:, 1]))
    return LogLogFit(float(res.slope), float(res.intercept), float(res.stderr))


class Jet:
    """Truncated power series ``c_0 + c_1 e + ... + c_K e^K`` with ``e^(K+1) = 0``.

    ``coeffs`` has shape ``(K + 1, *batch)`` so that one Jet can carry a whole
    batch of independent series; all arithmetic broadcasts over the batch.
    """

    __slots__ = ("coeffs",)

    def __init__(self, coeffs):
        c = np.asarray(coeffs, dtype=np.float64)
        if c.ndim == 0:
            raise ShapeError("jet coefficients need a leading order axis")
        if not 1 <= c.shape[0] - 1 <= MAX_JET_ORDER:
            raise InvalidArgumentError(f"jet order must lie in [1, {MAX_JET_ORDER}], got {c.shape[0] - 1}")
        self.coeffs = c

    @classmethod
    def constant(cls, value, order: int) -> "Jet":
        value = np.asarray(value, dtype=np.float64)
        c = np.zeros((order + 1,) + value.shape)
        c[0] = value
        return cls(c)

    @classmethod
    def variable(cls, value, direction, order: int) -> "Jet":
        """The jet of ``value + t * direction``."""
        value, direction = np.broadcast_arrays(np.asarray(value, float), np.asarray(direction, float))
        c = np.zeros((order + 1,) + value.shape)
        c[0] = value
        c[1] = direction
        return cls(c)

    @property
    def order(self) -> int:
        return self.coeffs.shape[0] - 1

    def derivatives(self) -> np.ndarray:
        """``d^k/dt^k`` at ``t = 0`` for ``k = 0..K`` (coefficients times ``k!``)."""
        fact = np.array([math.factorial(k) for k in range(self.order + 1)], dtype=np.float64)
        return self.coeffs * fact.reshape((-1,) + (1,) * (self.coeffs.ndim - 1))

    def _coerce(self, other):
        if isinstance(other, Jet):
            if other.order != self.order:
                raise InvalidArgumentError("jet orders differ")
            return other.coeffs
        return None

    def __add__(self, other):
        oc = self._coerce(other)
        if oc is not None:
            return Jet(self.coeffs + oc)
        c = self.coeffs.copy()
        c[0] = c[0] + np.asarray(other, dtype=np.float64)
        return Jet(c)

    __radd__ = __add__

    def __neg__(self):
        return Jet(-self.coeffs)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        oc = self._coerce(other)
        if oc is None:
            return Jet(self.coeffs * np.asarray(other, dtype=np.float64))
        a, b = self.coeffs, oc
        K = self.order
        out = [sum(a[i] * b[m - i] for i in range(m + 1)) for m in range(K + 1)]
        return Jet(np.stack(out))

    __rmul__ = __mul__

    def compose(self, derivs) -> "Jet":
        """Jet of ``f(self)`` given ``derivs[k] = f^(k)(c_0)`` for ``k = 0..K``."""
        K = self.order
        derivs = np.asarray(derivs, dtype=np.float64)
        if derivs.shape[0] < K + 1:
            raise InvalidArgumentError(f"need {K + 1} derivatives, got {derivs.shape[0]}")
        h = self.coeffs.copy()
        h[0] = 0.0
        h = Jet(h)
        power = Jet.constant(np.ones(self.coeffs.shape[1:]), K)
        out = derivs[0] * power.coeffs
        for k in range(1, K + 1):
            power = power * h
            out = out + (derivs[k] / math.factorial(k)) * power.coeffs
        return Jet(out)

    def __repr__(self):
        return f"Jet(order={self.order}, shape={self.coeffs.shape[1:]})"
