"""Gradient descent with the diagonal learning-rate tensor, and the Taylor
predictions of how outputs and the NTK move in one step."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidArgumentError
from .family import ScalingStrategy, derive_meta_family
from .kernels import LayerKernels, compute_kernels
from .network import Dataset, NetworkConfig, NetworkParams, forward, init_params, learning_rates
from .numerics import RngStream, fit_loglog_slope


@dataclass(frozen=True)
class LossModel:
    """Mean-squared error ``1/2 sum_{i, a in batch} (f - y)^2``."""

    batch: tuple

    def __init__(self, batch):
        batch = tuple(sorted({int(b) for b in batch}))
        if not batch:
            raise InvalidArgumentError("loss batch must be non-empty")
        object.__setattr__(self, "batch", batch)

    def _check(self, data: Dataset):
        if data.labels is None:
            raise InvalidArgumentError("loss needs labels")
        if self.batch[0] < 0 or self.batch[-1] >= data.size:
            raise InvalidArgumentError(f"batch {self.batch} out of range for {data.size} samples")

    def residual(self, f: np.ndarray, data: Dataset) -> np.ndarray:
        """``dL/df[i, d]``: ``f - y`` on the batch and zero elsewhere."""
        self._check(data)
        eps = np.zeros_like(f)
        idx = list(self.batch)
        eps[:, idx] = f[:, idx] - data.labels[idx].T
        return eps

    def value(self, f: np.ndarray, data: Dataset) -> float:
        return 0.5 * float(np.sum(self.residual(f, data) ** 2))


def backprop(params: NetworkParams, config: NetworkConfig, data: Dataset, gout: np.ndarray) -> NetworkParams:
    """Gradient of ``sum_{i,d} gout[i, d] f[i, d]`` by reverse accumulation."""
    zs = forward(params, config, data).z
    act = config.activation
    x = data.inputs.T
    g = np.asarray(gout, dtype=np.float64)
    gb, gW = [None] * config.L, [None] * config.L
    for l in range(config.L - 1, -1, -1):
        a_in = x if l == 0 else act(zs[l - 1])
        gb[l] = g.sum(axis=1)
        gW[l] = g @ a_in.T
        if l > 0:
            g = (params.weights[l].T @ g) * act.derivatives(zs[l - 1], 1)[1]
    return NetworkParams(gb, gW)


def gd_step(params, config: NetworkConfig, strategy: ScalingStrategy, data: Dataset, loss: LossModel) -> NetworkParams:
    """``theta <- theta - eta * lam_theta * dL/dtheta`` with ``eta = n^r eta0``."""
    f = forward(params, config, data).output
    grad = backprop(params, config, data, loss.residual(f, data))
    eta = config.eta(strategy)
    rates = learning_rates(config, strategy)
    return NetworkParams(
        [b - eta * rb * g for b, g, (rb, _) in zip(params.biases, grad.biases, rates)],
        [W - eta * rw * g for W, g, (_, rw) in zip(params.weights, grad.weights, rates)],
    )


def _need(kernels: LayerKernels, names, what):
    missing = set(names) - kernels.computed
    if missing:
        raise InvalidArgumentError(f"{what} needs kernel tensors {sorted(missing)}")


def taylor_predict_outputs(kernels: LayerKernels, f, eps, eta: float, truncation_order: int) -> np.ndarray:
    """Output after one step, expanded to ``eta^truncation_order``.

    ``f' = f - eta H.eps + eta^2/2 dH.eps.eps - eta^3/6 ddI.eps.eps.eps``
    """
    if truncation_order not in (1, 2, 3):
        raise InvalidArgumentError("truncation order must be 1, 2 or 3")
    _need(kernels, ["H", "dH", "ddI"][:truncation_order], "output prediction")
    out = f - eta * np.einsum("ijab,jb->ia", kernels.get("H"), eps)
    if truncation_order >= 2:
        out = out + 0.5 * eta**2 * np.einsum("ijkabc,jb,kc->ia", kernels.get("dH"), eps, eps)
    if truncation_order >= 3:
        out = out - eta**3 / 6.0 * np.einsum("ijklabcd,jb,kc,ld->ia", kernels.get("ddI"), eps, eps, eps, optimize=True)
    return out


def taylor_predict_ntk(kernels: LayerKernels, H, eps, eta: float, truncation_order: int) -> np.ndarray:
    """Output-layer NTK after one step, expanded to ``eta^truncation_order``."""
    if truncation_order not in (1, 2):
        raise InvalidArgumentError("truncation order must be 1 or 2")
    _need(kernels, ["dH"] if truncation_order == 1 else ["dH", "ddI", "ddII"], "NTK prediction")
    dH = np.einsum("ijkabc,kc->ijab", kernels.get("dH"), eps)
    out = H - eta * (dH + dH.transpose(1, 0, 3, 2))
    if truncation_order == 2:
        ddI = np.einsum("ijklabcd,kc,ld->ijab", kernels.get("ddI"), eps, eps, optimize=True)
        ddII = np.einsum("ijklabcd,kc,ld->ijab", kernels.get("ddII"), eps, eps, optimize=True)
        out = out + eta**2 * (0.5 * (ddI + ddI.transpose(1, 0, 3, 2)) + ddII)
    return out


class EtaScan(NamedTuple):
    eta0: np.ndarray
    output_residuals: dict  # truncation order -> array over eta0
    ntk_residuals: dict
    output_slopes: dict
    ntk_slopes: dict


def default_scan_problem(seed: int = 0, n: int = 16, L: int = 3, n0: int = 4, n_out: int = 2, samples: int = 3,
                         activation="tanh", s: float = 0.0):
    """The tanh problem used for truncation scans: batch = first two samples,
    the last sample held out."""
    config = NetworkConfig.critical([n0] + [n] * (L - 1) + [n_out], activation)
    strategy = derive_meta_family(s, L)
    rng = np.random.Generator(np.random.Philox(key=[seed, 1]))
    data = Dataset.unit_norm(n0, samples, rng, n_out=n_out)
    params = init_params(config, strategy, RngStream(seed, 0))
    return config, strategy, data, params, LossModel(range(min(2, samples)))


def residual_norm(a, b) -> float:
    """Max-abs discrepancy over every output component and sample."""
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def eta_scan(params, config, strategy, data, loss, eta0s=None) -> EtaScan:
    """Compare one actual GD step with its Taylor predictions over a range of ``eta0``."""
    eta0s = np.logspace(-2, -1, 8) if eta0s is None else np.asarray(eta0s, dtype=np.float64)
    kern = compute_kernels(params, config, strategy, data, "ddntk", keep_layers=False).output
    f = forward(params, config, data).output
    eps = loss.residual(f, data)
    out_res = {k: [] for k in (1, 2, 3)}
    ntk_res = {k: [] for k in (1, 2)}
    for e0 in eta0s:
        cfg = config.with_eta0(e0)
        eta = cfg.eta(strategy)
        new = gd_step(params, cfg, strategy, data, loss)
        f_new = forward(new, cfg, data).output
        H_new = compute_kernels(new, cfg, strategy, data, "ntk", keep_layers=False).output.H
        for k in out_res:
            out_res[k].append(residual_norm(taylor_predict_outputs(kern, f, eps, eta, k), f_new))
        for k in ntk_res:
            ntk_res[k].append(residual_norm(taylor_predict_ntk(kern, kern.H, eps, eta, k), H_new))
    out_res = {k: np.array(v) for k, v in out_res.items()}
    ntk_res = {k: np.array(v) for k, v in ntk_res.items()}
    slope = lambda r: fit_loglog_slope(np.column_stack([eta0s, r]))  # noqa: E731
    return EtaScan(
        eta0s,
        out_res,
        ntk_res,
        {k: slope(v) for k, v in out_res.items()},
        {k: slope(v) for k, v in ntk_res.items()},
    )
