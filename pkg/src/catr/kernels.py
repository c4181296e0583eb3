"""Gram matrices and the biased empirical HSIC.

All functions accept numpy arrays or tape :class:`~catr.autodiff.Var` values;
with a ``Var`` input the result stays on the tape, so gradients reach the
residuals that produced it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var


@dataclass(frozen=True)
class KernelConfig:
    treatment_kernel: str = "linear"
    outcome_kernel: str = "rbf"
    bandwidth_mode: str = "median_heuristic"
    sigma: float | None = None
    bandwidth_floor: float = 1e-3

    def __post_init__(self):
        if self.treatment_kernel != "linear":
            raise ValueError("treatment kernel must be 'linear'")
        if self.outcome_kernel not in ("rbf", "linear"):
            raise ValueError(f"unknown outcome kernel {self.outcome_kernel!r}")
        if self.bandwidth_mode not in ("median_heuristic", "fixed"):
            raise ValueError(f"unknown bandwidth mode {self.bandwidth_mode!r}")
        if self.bandwidth_floor <= 0:
            raise ValueError("bandwidth_floor must be > 0")
        if self.bandwidth_mode == "fixed" and (self.sigma is None or self.sigma <= 0):
            raise ValueError("fixed bandwidth needs sigma > 0")


def _as_input(u):
    if isinstance(u, Var):
        return u
    return np.asarray(u, dtype=np.float64)


def _check_n(u) -> int:
    n = u.shape[0]
    if n < 2:
        raise ValueError(f"HSIC needs at least 2 samples, got {n}")
    return n


def gram_linear(u):
    """K[i, j] = <u_i, u_j> for n scalars or n row vectors."""
    u = _as_input(u)
    n = _check_n(u)
    if u.ndim == 1:
        return u.reshape(n, 1) * u.reshape(1, n)
    return u @ u.T


def _sq_dists(u):
    n = u.shape[0]
    if u.ndim == 1:
        diff = u.reshape(n, 1) - u.reshape(1, n)
        return diff * diff
    p = u.shape[1]
    diff = u.reshape(n, 1, p) - u.reshape(1, n, p)
    return (diff * diff).sum(axis=2)


def gram_rbf(u, sigma: float):
    """L[i, j] = exp(-||u_i - u_j||^2 / (2 sigma^2))."""
    if not sigma > 0:
        raise ValueError(f"RBF bandwidth must be > 0, got {sigma}")
    u = _as_input(u)
    _check_n(u)
    return ad.exp(_sq_dists(u) * (-1.0 / (2.0 * sigma * sigma)))


def median_heuristic(u, floor: float = 1e-3) -> float:
    """sqrt of the median pairwise squared distance over i < j, floored."""
    u = ad.value(u)
    n = _check_n(u)
    d2 = _sq_dists(u)
    iu = np.triu_indices(n, k=1)
    med = float(np.median(d2[iu]))
    return max(float(np.sqrt(med)), floor)


def center(K):
    """HKH via row, column and grand mean subtraction."""
    return K - K.mean(axis=0, keepdims=True) - K.mean(axis=1, keepdims=True) + K.mean()


def hsic_empirical(K, L):
    """tr(KHLH) / (n - 1)^2."""
    if K.shape != L.shape or K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ValueError(f"Gram matrices must be square and equal-sized, got {K.shape} and {L.shape}")
    n = K.shape[0]
    if n < 2:
        raise ValueError("HSIC needs at least 2 samples")
    if not isinstance(K, Var) and not isinstance(L, Var):
        K = np.asarray(K, dtype=np.float64)
        L = np.asarray(L, dtype=np.float64)
        return float((center(K) * center(L)).sum() / (n - 1) ** 2)
    return (center(K) * center(L)).sum() * (1.0 / (n - 1) ** 2)


def outcome_bandwidth(rY, cfg: KernelConfig) -> float:
    if cfg.bandwidth_mode == "fixed":
        return float(cfg.sigma)
    return median_heuristic(rY, cfg.bandwidth_floor)


def hsic_residual(rT, rY, cfg: KernelConfig | None = None):
    """Residual HSIC with a linear kernel on rT and (by default) an RBF kernel on rY.

    The RBF bandwidth is computed from the current residual values and treated
    as a constant for differentiation.
    """
    cfg = cfg or KernelConfig()
    rT, rY = _as_input(rT), _as_input(rY)
    if rT.shape[0] != rY.shape[0]:
        raise ValueError("residual vectors differ in length")
    n = _check_n(rT)
    if cfg.outcome_kernel == "linear":
        L = gram_linear(rY)
    else:
        L = gram_rbf(rY, outcome_bandwidth(rY, cfg))
    if rT.ndim != 1:
        return hsic_empirical(gram_linear(rT), L)
    # linear K = r r^T, so tr(K H L H) = rc^T L rc with rc = H r
    rc = (rT - rT.mean()).reshape(n, 1)
    out = (rc.T @ L @ rc).reshape(()) * (1.0 / (n - 1) ** 2)
    return float(out) if not isinstance(out, Var) else out
