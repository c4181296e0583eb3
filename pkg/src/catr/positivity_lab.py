"""Latent-confounder toy: overlap holds on C, yet propensities fitted on
high-dimensional noisy proxies of C drift towards 0 and 1 as the proxy
dimension grows."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.special import expit
from scipy.stats import spearmanr
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .autodiff import Tape
from .estimators import clipping_fraction, ess_ratio
from .neuralcore import AdamState, adam_step, cross_entropy, forward, zero_network
from .validation import check_both_arms

SWEEP_COLUMNS = ("dim", "repeat", "clip_frac_hat", "clip_frac_true", "ess_ratio")


@dataclass(frozen=True)
class ProxySpec:
    n: int = 2000
    p: int = 64
    latent_dim: int = 1
    active_fraction: float = 0.1
    noise_sd: float = 1.0
    slope: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("proxy dimension p must be >= 1")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        if not 0.0 < self.active_fraction <= 1.0:
            raise ValueError("active_fraction must lie in (0, 1]")
        if self.latent_dim != 1:
            raise ValueError("only a scalar latent confounder is supported")


def generate_latent_proxy(spec: ProxySpec):
    """Return ``(C, X, T, g_true)``.

    ``X = C v^T + noise`` where ``v`` has ``max(1, round(active_fraction * p))``
    nonzero +-1 entries and the remaining coordinates are pure noise.
    """
    rng = np.random.default_rng(spec.seed)
    C = rng.standard_normal(spec.n)
    g_true = expit(spec.slope * C)
    T = (rng.random(spec.n) < g_true).astype(np.uint8)
    k = max(1, int(round(spec.active_fraction * spec.p)))
    active = rng.choice(spec.p, size=k, replace=False)
    v = np.zeros(spec.p)
    v[active] = rng.choice([-1.0, 1.0], size=k)
    X = np.outer(C, v) + spec.noise_sd * rng.standard_normal((spec.n, spec.p))
    return C, X, T, g_true


class LogisticPropensity(ClassifierMixin, BaseEstimator):
    """L2-penalised logistic regression fitted by full-batch Adam on the tape.

    Loss is ``mean CE + l2/2 * ||w||^2`` (bias unpenalised). Stops when the
    gradient norm drops to ``tol`` or after ``max_iter`` steps.
    """

    def __init__(self, l2=1e-3, learning_rate=0.05, max_iter=5000, tol=1e-6):
        self.l2 = l2
        self.learning_rate = learning_rate
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, T):
        X, T = check_X_y(X, T, dtype=np.float64)
        check_both_arms(T, "T")
        self.classes_ = np.array([0, 1])
        t = (T == 1).astype(np.float64)
        net = zero_network([X.shape[1], 1], "sigmoid")
        params = net.parameters()
        opt = AdamState.for_params(params, lr=self.learning_rate)
        self.converged_ = False
        for it in range(1, self.max_iter + 1):
            tape = Tape()
            p = forward(net, X, tape).reshape(-1)
            w = tape.param(net.weights[0])
            loss = cross_entropy(p, t).mean() + 0.5 * self.l2 * (w * w).sum()
            tape.backward(loss)
            grads = [tape.grad(q) for q in params]
            if np.sqrt(sum(float(np.sum(g * g)) for g in grads)) <= self.tol:
                self.converged_ = True
                break
            adam_step(params, grads, opt)
        self.n_iter_ = it
        self.net_ = net
        self.coef_ = net.weights[0][:, 0].copy()
        self.intercept_ = float(net.biases[0][0])
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        p = forward(self.net_, X).value.reshape(-1)
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)


def fit_logistic_ps(X, T, l2: float = 1e-3, **kwargs) -> np.ndarray:
    """In-sample propensity estimates from :class:`LogisticPropensity`."""
    model = LogisticPropensity(l2=l2, **kwargs).fit(X, T)
    return model.predict_proba(X)[:, 1]


def cell_seed(base_seed: int, dim: int, repeat: int) -> int:
    return int(np.random.SeedSequence([base_seed, dim, repeat]).generate_state(1)[0])


def dimension_sweep(dims, spec: ProxySpec | None = None, eps: float = 0.03, repeats: int = 5, l2: float = 1e-3, **fit_kwargs):
    """Clipping fraction and ESS ratio of fitted propensities across proxy dimensions.

    Returns ``(rows, curve)``: one row per (dim, repeat) and one aggregate per dim.
    Seeds derive from ``(spec.seed, dim, repeat)``.
    """
    dims = list(dims)
    if not dims:
        raise ValueError("dims must be nonempty")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    spec = spec or ProxySpec()
    rows = []
    for dim in dims:
        for r in range(repeats):
            cell = replace(spec, p=int(dim), seed=cell_seed(spec.seed, int(dim), r))
            _, X, T, g_true = generate_latent_proxy(cell)
            g_hat = fit_logistic_ps(X, T, l2, **fit_kwargs)
            rows.append(
                {
                    "dim": int(dim),
                    "repeat": r,
                    "clip_frac_hat": clipping_fraction(g_hat, eps),
                    "clip_frac_true": clipping_fraction(g_true, eps),
                    "ess_ratio": ess_ratio(g_hat, g_true, T),
                }
            )
    curve = []
    for dim in dims:
        sel = [row for row in rows if row["dim"] == int(dim)]
        curve.append(
            {
                "dim": int(dim),
                "clip_frac_hat": float(np.mean([s["clip_frac_hat"] for s in sel])),
                "clip_frac_true": float(np.mean([s["clip_frac_true"] for s in sel])),
                "ess_ratio": float(np.mean([s["ess_ratio"] for s in sel])),
            }
        )
    return rows, curve


def sweep_spearman(curve) -> float:
    """Rank correlation of dimension and mean clipping; NaN when either is constant."""
    dims = [c["dim"] for c in curve]
    clip = [c["clip_frac_hat"] for c in curve]
    if len(set(dims)) < 2 or len(set(clip)) < 2:
        return float("nan")
    return float(spearmanr(dims, clip).statistic)


def _power_iteration(S: np.ndarray, rng, tol: float, max_iter: int):
    v = rng.standard_normal(S.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = S @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v
        w /= norm
        if min(np.linalg.norm(w - v), np.linalg.norm(w + v)) < tol:
            v = w
            break
        v = w
    lam = float(v @ S @ v)
    return lam, v


def _sign_fix(v: np.ndarray) -> np.ndarray:
    nz = np.flatnonzero(np.abs(v) > 1e-12)
    if nz.size and v[nz[0]] < 0:
        return -v
    return v


class Top2PCA(TransformerMixin, BaseEstimator):
    """Top two principal components by power iteration with deflation."""

    def __init__(self, tol=1e-8, max_iter=10_000, random_state=0):
        self.tol = tol
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        n, p = X.shape
        if n < 3 or p < 2:
            raise ValueError("need n >= 3 and p >= 2")
        self.mean_ = X.mean(axis=0)
        Xc = X - self.mean_
        S = Xc.T @ Xc / (n - 1)
        rng = np.random.default_rng(self.random_state)
        lam1, v1 = _power_iteration(S, rng, self.tol, self.max_iter)
        v1 = _sign_fix(v1)
        S2 = S - lam1 * np.outer(v1, v1)
        lam2, v2 = _power_iteration(S2, rng, self.tol, self.max_iter)
        self.rank_deficient_ = lam2 <= 1e-12
        if self.rank_deficient_:
            v2 = np.zeros(p)
            lam2 = 0.0
        else:
            v2 = _sign_fix(v2)
        self.components_ = np.vstack([v1, v2])
        self.explained_variance_ = np.array([lam1, lam2])
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        return (X - self.mean_) @ self.components_.T


def top2_pca(X) -> tuple[np.ndarray, bool]:
    """Projections onto the top two components and the rank-deficiency flag."""
    pca = Top2PCA().fit(X)
    return pca.transform(X), pca.rank_deficient_


def propensity_histogram(g_hat, g_true, bins: int = 50):
    edges = np.linspace(0.0, 1.0, bins + 1)
    hat, _ = np.histogram(g_hat, bins=edges)
    true, _ = np.histogram(g_true, bins=edges)
    return [{"bin_left": float(edges[i]), "count_hat": int(hat[i]), "count_true": int(true[i])} for i in range(bins)]


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items() if k in columns})


def run_lab(out_dir, dims=(4, 16, 64, 256, 1024), spec: ProxySpec | None = None, eps=0.03, repeats=5, l2=1e-3, **fit_kwargs) -> dict:
    """Write ``sweep.csv``, ``pca.csv`` and ``ps_hist.csv`` into ``out_dir``.

    PCA and histogram use a single draw at ``spec.p``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = spec or ProxySpec()
    rows, curve = dimension_sweep(dims, spec, eps, repeats, l2, **fit_kwargs)
    _write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    _, X, T, g_true = generate_latent_proxy(spec)
    proj, _ = top2_pca(X)
    _write_csv(
        out / "pca.csv",
        ("unit", "pc1", "pc2", "t"),
        [{"unit": i, "pc1": float(proj[i, 0]), "pc2": float(proj[i, 1]), "t": int(T[i])} for i in range(len(T))],
    )
    g_hat = fit_logistic_ps(X, T, l2, **fit_kwargs)
    _write_csv(out / "ps_hist.csv", ("bin_left", "count_hat", "count_true"), propensity_histogram(g_hat, g_true))
    return {"rows": rows, "curve": curve, "spearman": sweep_spearman(curve)}
