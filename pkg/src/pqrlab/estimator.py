"""Monte Carlo ensembles over initializations and width/depth sweeps.

Each ensemble member ``k`` draws its parameters from the stream
``(root_seed, k)``, so a member's value never depends on which worker ran
it. Aggregation is a sequential fold over member index.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import DomainError, InvalidArgumentError, NumericOverflowError
from .family import ScalingStrategy, derive_meta_family, gamma
from .kernels import compute_kernels
from .network import Dataset, NetworkConfig, critical_hyperparameters, forward, init_params
from .numerics import RngStream, fit_loglog_slope
from .oracle import onehidden_typeI

DATA_STREAM = 2**63  # reserved stream index for the frozen sweep input
MAX_EXCLUDED_FRACTION = 0.10
CSV_HEADER = ("s", "n", "L", "M", "observable", "mean", "stderr")

_KERNEL_NEED = {"ntk_mean": "ntk", "z_dntk": "dntk", "ddntk1_mean": "ddntk1", "ddntk2_mean": "ddntk2"}
_LEVEL = {"ntk": {"H"}, "dntk": {"H", "dH"}, "ddntk1": {"H", "dH", "ddI"}, "ddntk2": {"H", "dH", "ddII"}}
_PATTERN = re.compile(r"^(preact_sq|ntk_mean|hodiff_even|hodiff_odd)\((\d+|L)\)$|^(z_dntk|ddntk1_mean|ddntk2_mean)$")


@dataclass(frozen=True)
class Observable:
    """A scalar per network instance.

    ``arg`` is a layer (``preact_sq``, ``ntk_mean``; ``"L"`` means the output
    layer) or the hierarchy level ``m`` (``hodiff_even``, ``hodiff_odd``).
    Multi-index tensors are reduced by averaging their diagonal components
    (all neural indices equal, all sample indices equal); with one output and
    one sample that is the single component.
    """

    name: str
    arg: object = None

    @classmethod
    def parse(cls, text) -> "Observable":
        if isinstance(text, Observable):
            return text
        m = _PATTERN.match(str(text).replace(" ", ""))
        if not m:
            raise InvalidArgumentError(
                f"unknown observable {text!r}; expected preact_sq(l), ntk_mean(l), z_dntk, ddntk1_mean, "
                "ddntk2_mean, hodiff_even(m) or hodiff_odd(m)"
            )
        if m.group(3):
            return cls(m.group(3))
        arg = m.group(2)
        arg = "L" if arg == "L" else int(arg)
        if arg == 0 or (m.group(1).startswith("hodiff") and arg not in (1, 2)):
            raise InvalidArgumentError(f"bad argument in observable {text!r}")
        return cls(m.group(1), arg)

    def __str__(self):
        return self.name if self.arg is None else f"{self.name}({self.arg})"

    def layer(self, L) -> int:
        l = L if self.arg == "L" else int(self.arg)
        if not 1 <= l <= L:
            raise InvalidArgumentError(f"{self} refers to layer {l} of an L={L} network")
        return l

    @property
    def k(self) -> int:
        """Derivative order of the type-I differential behind a ``hodiff`` observable."""
        return 2 * self.arg + 1 if self.name == "hodiff_even" else 2 * self.arg


def _diag(t, rank):
    """Mean over components with all ``rank`` neural and all sample indices equal."""
    n, D = t.shape[0], t.shape[-1]
    i, d = np.arange(n), np.arange(D)
    idx = (i[:, None],) * rank + (d[None, :],) * rank
    return t[idx]  # (n, D)


def evaluate(observables, params, config: NetworkConfig, strategy: ScalingStrategy, data: Dataset) -> np.ndarray:
    """Values of several observables on one instance, sharing one kernel computation."""
    obs = [Observable.parse(o) for o in observables]
    L = config.L
    trace = forward(params, config, data)
    f = trace.output
    eta = config.eta(strategy)

    want = set()
    for o in obs:
        if o.name in _KERNEL_NEED:
            want |= _LEVEL[_KERNEL_NEED[o.name]]
    stack = None
    if want:
        order = {frozenset(v): k for k, v in _LEVEL.items()}.get(frozenset(want), "ddntk")
        keep = any(o.name == "ntk_mean" and o.layer(L) < L for o in obs)
        stack = compute_kernels(params, config, strategy, data, order, keep_layers=keep)
    out = stack.output if stack else None

    values = []
    for o in obs:
        if o.name == "preact_sq":
            v = np.mean(trace.z[o.layer(L) - 1] ** 2)
        elif o.name == "ntk_mean":
            v = np.mean(_diag(stack.layers[o.layer(L) - 1].H, 2))
        elif o.name == "z_dntk":
            v = eta**2 * np.mean(f * _diag(out.get("dH"), 3))
        elif o.name == "ddntk1_mean":
            v = eta**3 * np.mean(_diag(out.get("ddI"), 4))
        elif o.name == "ddntk2_mean":
            v = eta**3 * np.mean(_diag(out.get("ddII"), 4))
        else:
            t = _diag(onehidden_typeI(params, config, strategy, data, o.k), o.k + 1)
            v = eta**o.k * np.mean(t if o.name == "hodiff_even" else f * t)
        values.append(float(v))
    return np.array(values)


class EnsembleStat(NamedTuple):
    mean: float
    stderr: float
    count: int
    excluded: int


def _member_values(observables, config, strategy, data, root_seed, index):
    stream = RngStream(root_seed, index)
    params = init_params(config, strategy, stream)
    try:
        return evaluate(observables, params, config, strategy, data)
    except NumericOverflowError:
        return np.full(len(observables), np.nan)


def _chunk_values(args):
    observables, config_d, strategy_d, inputs, root_seed, indices = args
    config = NetworkConfig.from_dict(config_d)
    strategy = ScalingStrategy.from_dict(strategy_d)
    data = Dataset(inputs)
    with threadpool_limits(1):
        return np.array([_member_values(observables, config, strategy, data, root_seed, i) for i in indices])


def default_threads() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1))


def ensemble_values(observables, config, strategy, data, M, root_seed, threads=1) -> np.ndarray:
    """Per-member values, shape ``(M, len(observables))``, in member order."""
    obs = [str(Observable.parse(o)) for o in observables]
    if int(M) < 2:
        raise InvalidArgumentError(f"ensemble size M must be >= 2, got {M}")
    M = int(M)
    threads = default_threads() if threads is None else int(threads)
    if threads <= 1:
        return _chunk_values((obs, config.to_dict(), strategy.to_dict(), data.inputs, root_seed, range(M)))
    bounds = np.linspace(0, M, min(M, 4 * threads) + 1).astype(int)
    jobs = [(obs, config.to_dict(), strategy.to_dict(), data.inputs, root_seed, range(a, b))
            for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(_chunk_values, jobs))
    return np.concatenate(parts, axis=0)


def aggregate(values) -> EnsembleStat:
    """Mean and standard error over the finite members (fixed summation order)."""
    values = np.asarray(values, dtype=np.float64)
    ok = np.isfinite(values)
    excluded = int(values.size - ok.sum())
    if excluded > MAX_EXCLUDED_FRACTION * values.size:
        raise DomainError(f"{excluded} of {values.size} ensemble members were non-finite (> 10%)")
    v = values[ok]
    if v.size < 2:
        raise DomainError("fewer than two finite ensemble members")
    mean = math.fsum(v) / v.size
    stderr = 0.0 if np.ptp(v) == 0 else float(np.std(v, ddof=1) / math.sqrt(v.size))
    return EnsembleStat(float(mean), stderr, int(v.size), excluded)


def ensemble_expectation(observable, config, strategy, data, M, root_seed, threads=1):
    """Mean and stderr over ``M`` initializations.

    With a single observable returns an :class:`EnsembleStat`; with a list,
    a dict keyed by observable name.
    """
    single = isinstance(observable, (str, Observable))
    obs = [observable] if single else list(observable)
    vals = ensemble_values(obs, config, strategy, data, M, root_seed, threads)
    stats = {str(Observable.parse(o)): aggregate(vals[:, j]) for j, o in enumerate(obs)}
    return next(iter(stats.values())) if single else stats


# --------------------------------------------------------------------- sweeps


def sweep_input(root_seed: int, n0: int = 8, samples: int = 1) -> Dataset:
    """Unit-norm input(s) frozen per root seed, shared across a whole sweep."""
    rng = np.random.Generator(np.random.Philox(key=[root_seed & (2**64 - 1), DATA_STREAM]))
    return Dataset.unit_norm(n0, samples, rng)


def sweep_config(n, L, activation="tanh", preset="critical", n0=8, n_out=1, lam=1.0) -> NetworkConfig:
    if preset == "critical":
        cb, cw = critical_hyperparameters(NetworkConfig([1, 1], activation).activation.name)
    elif isinstance(preset, (tuple, list)) and len(preset) == 2:
        cb, cw = preset
    else:
        raise InvalidArgumentError(f"preset must be 'critical' or a (Cb, Cw) pair, got {preset!r}")
    return NetworkConfig([n0] + [n] * (L - 1) + [n_out], activation, cb, cw, lam, lam)


class SweepRow(NamedTuple):
    s: float
    n: int
    L: int
    M: int
    observable: str
    mean: float
    stderr: float
    flagged: bool
    excluded: int = 0


class SweepFit(NamedTuple):
    observable: str
    s: float
    axis: str  # "n" or "L"
    fixed: int  # L for width sweeps, n for depth sweeps
    slope: float
    slope_stderr: float
    points: int
    sign: int


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)
    fits: list = field(default_factory=list)

    def fit(self, observable, s=None) -> SweepFit | None:
        for f in self.fits:
            if f.observable == str(Observable.parse(observable)) and (s is None or f.s == s):
                return f
        return None

    def extend(self, other: "SweepResult"):
        self.rows += other.rows
        self.fits += other.fits
        return self

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow([repr(r.s), r.n, r.L, r.M, r.observable, repr(r.mean), repr(r.stderr)])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "fits": [f._asdict() for f in self.fits],
            "flagged": [
                {"s": r.s, "n": r.n, "L": r.L, "observable": r.observable} for r in self.rows if r.flagged
            ],
            "gamma": [{"s": r.s, "n": r.n, "L": r.L, "gamma": gamma(r.n, r.L, r.s)} for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2)


def _fit_rows(rows, axis, observable, s, fixed):
    usable = [r for r in rows if not r.flagged]
    if len(usable) < 3:
        return None
    xs = [r.n if axis == "n" else r.L for r in usable]
    fit = fit_loglog_slope([(x, abs(r.mean)) for x, r in zip(xs, usable)])
    sign = int(np.sign(np.sum(np.sign([r.mean for r in usable]))))
    return SweepFit(observable, s, axis, fixed, fit.slope, fit.stderr, len(usable), sign)


def _run_points(observables, s, points, M, root_seed, threads, activation, preset, n0, n_out, samples, lam_for):
    obs = [str(Observable.parse(o)) for o in observables]
    data = sweep_input(root_seed, n0, samples)
    rows = {o: [] for o in obs}
    for n, L in points:
        config = sweep_config(n, L, activation, preset, n0, n_out, lam_for(L))
        strategy = derive_meta_family(s, L)
        stats = ensemble_expectation(obs, config, strategy, data, M, root_seed, threads)
        for o in obs:
            st = stats[o]
            flagged = abs(st.mean) <= 2.0 * st.stderr
            rows[o].append(SweepRow(float(s), n, L, st.count, o, st.mean, st.stderr, bool(flagged), st.excluded))
    return rows


def _as_list(observable):
    return [observable] if isinstance(observable, (str, Observable)) else list(observable)


def width_sweep(observable, s, L, widths, M, root_seed, threads=1, activation="tanh", preset="critical",
                n0=8, n_out=1, samples=1) -> SweepResult:
    """Ensemble means at each hidden width ``n`` and the fitted slope of ``log|mean|`` vs ``log n``."""
    widths = [int(n) for n in widths]
    if len(widths) < 3 or any(b <= a for a, b in zip(widths, widths[1:])):
        raise InvalidArgumentError("widths must be strictly increasing with at least 3 values")
    rows = _run_points(_as_list(observable), s, [(n, L) for n in widths], M, root_seed, threads,
                       activation, preset, n0, n_out, samples, lambda _L: 1.0)
    result = SweepResult()
    for o, rs in rows.items():
        result.rows += rs
        fit = _fit_rows(rs, "n", o, float(s), L)
        if fit:
            result.fits.append(fit)
    return result


def depth_sweep(observable, s, n, depths, M, root_seed, threads=1, activation="tanh", n0=8, n_out=1,
                samples=1) -> SweepResult:
    """Ensemble means at each depth with ``lam_b = lam_W = 1/L`` at criticality; slope vs ``log L``."""
    depths = [int(L) for L in depths]
    if len(depths) < 3 or any(b <= a for a, b in zip(depths, depths[1:])):
        raise InvalidArgumentError("depths must be strictly increasing with at least 3 values")
    if depths[0] < 1:
        raise InvalidArgumentError("depths must be >= 1")
    rows = _run_points(_as_list(observable), s, [(n, L) for L in depths], M, root_seed, threads,
                       activation, "critical", n0, n_out, samples, lambda L: 1.0 / L)
    result = SweepResult()
    for o, rs in rows.items():
        result.rows += rs
        fit = _fit_rows(rs, "L", o, float(s), n)
        if fit:
            result.fits.append(fit)
    return result


def expected_hodiff_slope(m: int, parity: str, s: float) -> float:
    """``-m(1-s)`` for the even hierarchy, ``-(m(1-s)+s)`` for the odd one."""
    return -m * (1 - s) if parity == "even" else -(m * (1 - s) + s)


def hodiff_sweep(m, parity, s, widths, M, root_seed, threads=1, activation="tanh", preset="critical",
                 n0=8, n_out=1) -> SweepResult:
    """Width sweep of the one-hidden-layer type-I hierarchy observables."""
    if parity not in ("even", "odd"):
        raise InvalidArgumentError("parity must be 'even' or 'odd'")
    ms = [m] if isinstance(m, int) else list(m)
    obs = [f"hodiff_{parity}({mm})" for mm in ms]
    return width_sweep(obs, s, 2, widths, M, root_seed, threads, activation, preset, n0, n_out)
