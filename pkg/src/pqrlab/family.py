"""Algebra of p/q/r width-scaling strategies.

A strategy fixes, per layer, the width exponent ``p`` of the initialization
variances and ``q`` of the learning-rate tensor, plus the exponent ``r`` of
the global learning rate ``eta = n**r * eta0``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InvalidArgumentError


def _as_tuple(values, L, name):
    t = tuple(float(v) for v in values)
    if len(t) != L:
        raise InvalidArgumentError(f"{name} must have length L={L}, got {len(t)}")
    return t


@dataclass(frozen=True)
class ScalingStrategy:
    L: int
    p: tuple
    q: tuple
    r: float
    provenance: str = field(default="raw", compare=False)

    def __post_init__(self):
        if int(self.L) < 1:
            raise InvalidArgumentError(f"depth L must be >= 1, got {self.L}")
        object.__setattr__(self, "L", int(self.L))
        object.__setattr__(self, "p", _as_tuple(self.p, self.L, "p"))
        object.__setattr__(self, "q", _as_tuple(self.q, self.L, "q"))
        object.__setattr__(self, "r", float(self.r))

    def to_dict(self) -> dict:
        return {"L": self.L, "p": list(self.p), "q": list(self.q), "r": self.r, "provenance": self.provenance}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "ScalingStrategy":
        return cls(int(d["L"]), d["p"], d["q"], d["r"], d.get("provenance", "raw"))

    @classmethod
    def from_json(cls, text: str) -> "ScalingStrategy":
        return cls.from_dict(json.loads(text))


class AbcParams(NamedTuple):
    a: tuple
    b: tuple
    c: float


class ConstraintReport(NamedTuple):
    criticality: bool
    equivalence: bool
    finite_learning: bool

    @property
    def ok(self) -> bool:
        return self.criticality and self.equivalence and self.finite_learning


def derive_meta_family(s: float, L: int) -> ScalingStrategy:
    """Member ``s`` of the one-parameter family: only the last layer scales.

    ``s = 0`` is neural-tangent scaling, ``s = 1`` maximal-update scaling.
    """
    if int(L) < 1:
        raise InvalidArgumentError(f"depth L must be >= 1, got {L}")
    s = float(s)
    if not 0.0 <= s <= 1.0:
        warnings.warn(f"s={s} lies outside [0, 1]", stacklevel=2)
    L = int(L)
    p = [0.0] * (L - 1) + [s]
    return ScalingStrategy(L, p, list(p), s, provenance=f"meta-family({s!r})")


def gauge_transform(strategy: ScalingStrategy, g: float) -> ScalingStrategy:
    """Shift every ``q`` and ``r`` by ``g``; leaves ``eta*H`` etc. unchanged."""
    g = float(g)
    return ScalingStrategy(
        strategy.L,
        strategy.p,
        [q + g for q in strategy.q],
        strategy.r + g,
        provenance=f"gauge({strategy.provenance}, {g!r})",
    )


def validate_meta_principles(strategy: ScalingStrategy) -> ConstraintReport:
    """Exact-equality checks of criticality, learning-rate equivalence and finite learning."""
    p, q = strategy.p, strategy.q
    criticality = all(v == 0.0 for v in p[:-1])
    equivalence = all(q[l + 1] == p[l + 1] + q[l] for l in range(strategy.L - 1))
    finite_learning = strategy.r == q[-1]
    return ConstraintReport(criticality, equivalence, finite_learning)


def to_abc(strategy: ScalingStrategy) -> AbcParams:
    """Convert to abc-parametrization exponents (``c`` is the learning-rate exponent)."""
    a = [strategy.q[0] / 2.0] + [(1.0 + q) / 2.0 for q in strategy.q[1:]]
    # 2a+2b fixes b once a is known
    b = [(p - q) / 2.0 for p, q in zip(strategy.p, strategy.q)]
    return AbcParams(tuple(a), tuple(b), -strategy.r)


def from_abc(abc: AbcParams, L: int) -> ScalingStrategy:
    a, b = list(abc.a), list(abc.b)
    if len(a) != L or len(b) != L:
        raise InvalidArgumentError(f"abc arrays must have length L={L}")
    q = [2.0 * a[0]] + [2.0 * x - 1.0 for x in a[1:]]
    p = [2.0 * (a[0] + b[0])] + [2.0 * (x + y) - 1.0 for x, y in zip(a[1:], b[1:])]
    return ScalingStrategy(L, p, q, -abc.c, provenance="abc")


def gamma(n: int, L: int, s: float) -> float:
    """Aspect-ratio scale ``L / n**(1 - s)`` controlling representation learning."""
    if n < 1:
        raise InvalidArgumentError(f"n must be >= 1, got {n}")
    return L / float(n) ** (1.0 - s)


def random_strategy(rng: np.random.Generator, L: int, low: float = -0.5, high: float = 1.5) -> ScalingStrategy:
    """Unconstrained strategy with i.i.d. uniform exponents (test and oracle fodder)."""
    return ScalingStrategy(L, rng.uniform(low, high, L), rng.uniform(low, high, L), rng.uniform(low, high))
