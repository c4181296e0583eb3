"""Plug-in ATE estimators, fixed-nuisance bootstrap, and overlap diagnostics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .trainer import NuisanceEstimates
from .validation import check_binary, check_consistent_length, check_open_unit_interval

ESTIMATORS = ("OR", "IPW", "AIPW")
REPORT_CLIP = 0.03
Z95 = 1.96


@dataclass(frozen=True)
class EstimatorConfig:
    """``clip`` bounds g_hat to [clip, 1 - clip] before inverse weighting (IPW/AIPW)."""

    clip: float = REPORT_CLIP
    n_bootstrap: int = 1000
    bootstrap_seed: int = 0
    missing_threshold: float = 0.10

    def __post_init__(self):
        if not 0.0 <= self.clip < 0.5:
            raise ValueError("clip must lie in [0, 0.5)")
        if self.n_bootstrap < 1:
            raise ValueError("n_bootstrap must be >= 1")


@dataclass
class ATEReport:
    estimator: str
    estimate: float
    se: float
    ci_low: float
    ci_high: float
    n_bootstrap: int
    n_missing: int = 0
    flagged: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DiagnosticsReport:
    ess_ratio: float
    clipping_fraction: float
    replications: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)


def _clipped(g, clip: float) -> np.ndarray:
    return np.clip(np.asarray(g, dtype=np.float64), clip, 1.0 - clip)


def _inputs(nuis: NuisanceEstimates, t, y):
    if len(nuis) == 0:
        raise ValueError("estimators need at least one unit")
    t = check_binary(t, "t").astype(np.float64)
    y = np.asarray(y, dtype=np.float64)
    check_consistent_length(nuis.g_hat, t, y)
    return t, y


def unit_terms(name: str, nuis: NuisanceEstimates, t, y, cfg: EstimatorConfig | None = None) -> np.ndarray:
    """Per-unit contributions whose sample mean is the estimate."""
    cfg = cfg or EstimatorConfig()
    if name == "OR":
        if len(nuis) == 0:
            raise ValueError("estimators need at least one unit")
        return nuis.q1_hat - nuis.q0_hat
    t, y = _inputs(nuis, t, y)
    g = _clipped(nuis.g_hat, cfg.clip)
    if name == "IPW":
        return t * y / g - (1.0 - t) * y / (1.0 - g)
    if name == "AIPW":
        q0, q1 = nuis.q0_hat, nuis.q1_hat
        return t * (y - q1) / g + q1 - (1.0 - t) * (y - q0) / (1.0 - g) - q0
    raise ValueError(f"unknown estimator {name!r}; choose from {ESTIMATORS}")


def or_estimator(nuis: NuisanceEstimates) -> float:
    return float(np.mean(unit_terms("OR", nuis, None, None)))


def ipw_estimator(nuis: NuisanceEstimates, t, y, cfg: EstimatorConfig | None = None) -> float:
    return float(np.mean(unit_terms("IPW", nuis, t, y, cfg)))


def aipw_estimator(nuis: NuisanceEstimates, t, y, cfg: EstimatorConfig | None = None) -> float:
    return float(np.mean(unit_terms("AIPW", nuis, t, y, cfg)))


def estimate(name: str, nuis: NuisanceEstimates, t, y, cfg: EstimatorConfig | None = None) -> float:
    return float(np.mean(unit_terms(name, nuis, t, y, cfg)))


def bootstrap_indices(n: int, n_bootstrap: int, seed, chunk: int = 100):
    """Yield (B_chunk, n) resample index blocks from one seeded stream."""
    rng = np.random.default_rng(seed)
    done = 0
    while done < n_bootstrap:
        b = min(chunk, n_bootstrap - done)
        yield rng.integers(0, n, size=(b, n))
        done += b


def bootstrap_report(
    estimator: str | Callable,
    nuis: NuisanceEstimates,
    t,
    y,
    cfg: EstimatorConfig | None = None,
) -> ATEReport:
    """Point estimate plus bootstrap SE over resampled units (nuisances held fixed).

    Resamples that contain a single treatment arm are dropped; if more than
    ``cfg.missing_threshold`` of them are dropped the report is flagged.
    ``estimator`` is one of ``"OR"``, ``"IPW"``, ``"AIPW"`` or a callable
    ``f(nuis, t, y, cfg) -> float``.
    """
    cfg = cfg or EstimatorConfig()
    t_arr = check_binary(t, "t").astype(np.float64)
    y_arr = np.asarray(y, dtype=np.float64)
    n = len(nuis)
    if isinstance(estimator, str):
        name = estimator
        terms = unit_terms(name, nuis, t_arr, y_arr, cfg)
        point = float(terms.mean())
    else:
        name = getattr(estimator, "__name__", "custom")
        point = float(estimator(nuis, t_arr, y_arr, cfg))
    reps = []
    missing = 0
    for block in bootstrap_indices(n, cfg.n_bootstrap, cfg.bootstrap_seed):
        tb = t_arr[block]
        arms = tb.sum(axis=1)
        ok = (arms > 0) & (arms < n)
        missing += int((~ok).sum())
        if isinstance(estimator, str):
            reps.append(terms[block[ok]].mean(axis=1))
        else:
            reps.append(
                np.array([estimator(nuis.take(idx), t_arr[idx], y_arr[idx], cfg) for idx in block[ok]])
            )
    reps = np.concatenate(reps) if reps else np.empty(0)
    se = float(np.std(reps, ddof=1)) if reps.size >= 2 else 0.0
    # constant data gives rounding-level spread
    if reps.size and np.ptp(reps) <= 1e-12 * max(1.0, abs(point)):
        se = 0.0
    return ATEReport(
        estimator=name,
        estimate=point,
        se=se,
        ci_low=point - Z95 * se,
        ci_high=point + Z95 * se,
        n_bootstrap=int(reps.size),
        n_missing=missing,
        flagged=missing > cfg.missing_threshold * cfg.n_bootstrap,
    )


def inverse_weights(g, t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    return t / g + (1.0 - t) / (1.0 - g)


def effective_sample_size(w) -> float:
    w = np.asarray(w, dtype=np.float64)
    return float(w.sum() ** 2 / np.sum(w * w))


def ess_ratio(g_hat, g_true, t) -> float:
    """ESS of estimated inverse-propensity weights over ESS of the true ones."""
    g_hat = check_open_unit_interval(g_hat, "g_hat")
    g_true = check_open_unit_interval(g_true, "g_true")
    t = check_binary(t, "t")
    check_consistent_length(g_hat, g_true, t)
    return effective_sample_size(inverse_weights(g_hat, t)) / effective_sample_size(inverse_weights(g_true, t))


def clipping_fraction(g_hat, eps: float = REPORT_CLIP) -> float:
    """Share of units with g_hat outside [eps, 1 - eps]."""
    if not 0.0 <= eps < 0.5:
        raise ValueError("eps must lie in [0, 0.5)")
    g = np.asarray(g_hat, dtype=np.float64)
    return float(np.mean((g < eps) | (g > 1.0 - eps)))


def replication_metrics(estimates, tau_true: float) -> dict:
    """Mean|Bias|, SD, Avg SE and 95% coverage over replications of (tau_hat, se)."""
    arr = np.asarray(estimates, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("estimates must be a sequence of (tau_hat, se) pairs")
    if arr.shape[0] < 2:
        raise ValueError("at least two replications are needed for an SD")
    tau, se = arr[:, 0], arr[:, 1]
    covered = np.abs(tau - tau_true) <= Z95 * se
    return {
        "mean_abs_bias": float(np.mean(np.abs(tau - tau_true))),
        "sd": float(np.std(tau, ddof=1)),
        "avg_se": float(np.mean(se)),
        "coverage": float(np.mean(covered)),
        "n_replications": int(arr.shape[0]),
    }


def format_reports(reports: list[ATEReport]) -> str:
    """Aligned plain-text table."""
    header = f"{'estimator':<9} {'estimate':>10} {'se':>9} {'ci_low':>10} {'ci_high':>10} {'B':>6}"
    lines = [header]
    for r in reports:
        flag = "  (flagged)" if r.flagged else ""
        lines.append(
            f"{r.estimator:<9} {r.estimate:>10.4f} {r.se:>9.4f} {r.ci_low:>10.4f} {r.ci_high:>10.4f} {r.n_bootstrap:>6d}{flag}"
        )
    return "\n".join(lines)


def reports_json(reports: list[ATEReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True)
