"""Shared builders for the test-suite."""

import numpy as np

from pqrlab import Dataset, NetworkConfig, RngStream, ScalingStrategy, derive_meta_family, init_params


def make_instance(widths, activation="tanh", s=0.0, samples=2, seed=0, strategy=None, lam=1.0, eta0=1.0):
    """Small critical network with unit-norm inputs, reproducible from ``seed``."""
    config = NetworkConfig.critical(widths, activation, lam_b=lam, lam_w=lam, eta0=eta0)
    strategy = strategy if strategy is not None else derive_meta_family(s, len(widths) - 1)
    rng = np.random.default_rng(seed + 1000)
    data = Dataset.unit_norm(widths[0], samples, rng, n_out=widths[-1])
    params = init_params(config, strategy, RngStream(seed, 0))
    return config, strategy, data, params


def break_one_constraint(rng, s, L, which):
    """A meta-family(s) strategy perturbed so that exactly ``which`` fails.

    Perturbations are dyadic so every sum stays exact in binary floating point.
    """
    delta = float(rng.integers(1, 16)) / 8.0 * rng.choice([-1.0, 1.0])
    base = derive_meta_family(s, L)
    p, q, r = list(base.p), list(base.q), base.r
    if which == "criticality":
        j = int(rng.integers(0, L - 1))
        p[j] += delta
        q = list(np.cumsum(p))  # keep q_{l+1} = p_{l+1} + q_l and q_1 = p_1
        r = q[-1]
    elif which == "equivalence":
        j = int(rng.integers(0, L - 1))
        q[j] += delta
    elif which == "finite_learning":
        r += delta
    else:
        raise ValueError(which)
    return ScalingStrategy(L, p, q, r)
