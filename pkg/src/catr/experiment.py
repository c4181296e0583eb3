"""Replicated semi-synthetic runs and the three-arm ablation."""

from __future__ import annotations

import csv
import json
import logging
import os
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .dataset import (
    ConfounderSpec,
    GroundTruth,
    TokenSequenceDataset,
    generate_semisynthetic,
    load_dataset,
    load_ground_truth,
    resample_assignments,
)
from .estimators import ESTIMATORS, REPORT_CLIP, EstimatorConfig, bootstrap_report, clipping_fraction, ess_ratio, replication_metrics
from .trainer import TrainConfig, evaluate_nuisances, token_importance, train, write_history_csv

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
REPLICATION_COLUMNS = (
    "replication", "estimator", "estimate", "se", "ci_low", "ci_high",
    "n_bootstrap", "flagged", "ess_ratio", "clipping_fraction", "best_epoch", "epochs_run",
)
ABLATION_ARMS = ("full", "-HSIC", "-HSIC-Sparsity")
FAILURE_LIMIT = 0.20


def derive_seed(*parts) -> int:
    """Stable 32-bit seed from ints and strings."""
    ints = []
    for p in parts:
        if isinstance(p, str):
            ints.append(int.from_bytes(p.encode(), "little"))
        else:
            ints.append(int(p))
    return int(np.random.SeedSequence(ints).generate_state(1)[0])


@dataclass
class ExperimentConfig:
    generator: ConfounderSpec = field(default_factory=ConfounderSpec)
    n: int = 2000
    dataset_path: str | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    replications: int = 1
    seed: int = 0
    disable_hsic: bool = False
    disable_sparsity: bool = False
    out_dir: str | None = None
    workers: int = 1
    eval_split: str = "test"
    report_clip: float = REPORT_CLIP
    save_histories: bool = True

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.eval_split not in ("test", "all"):
            raise ValueError("eval_split must be 'test' or 'all'")

    def effective_train(self) -> TrainConfig:
        cfg = self.train
        if self.disable_hsic:
            cfg = replace(cfg, gamma=0.0)
        if self.disable_sparsity:
            cfg = replace(cfg, mu=0.0)
        return cfg


def load_source(cfg: ExperimentConfig) -> tuple[TokenSequenceDataset, GroundTruth, ConfounderSpec]:
    """Fixed documents plus ground truth, from a dataset directory or the generator."""
    if cfg.dataset_path:
        path = Path(cfg.dataset_path)
        truth = path / "truth.json"
        if not truth.exists():
            raise FileNotFoundError(f"{truth} is required to resample assignments")
        gt, spec = load_ground_truth(truth)
        return load_dataset(path), gt, spec
    ds, gt = generate_semisynthetic(cfg.generator, cfg.n, cfg.seed)
    return ds, gt, cfg.generator


def run_replication(ds: TokenSequenceDataset, gt: GroundTruth, spec: ConfounderSpec, cfg: ExperimentConfig, r: int) -> dict:
    rep_seed = derive_seed(cfg.seed, r)
    data = resample_assignments(ds, gt, spec, rep_seed)
    tcfg = replace(cfg.effective_train(), seed=rep_seed)
    model = train(data, tcfg)
    eval_idx = model.split[2] if cfg.eval_split == "test" else np.arange(data.n)
    sub = data.subset(eval_idx)
    nuis = evaluate_nuisances(model, sub)
    ecfg = replace(cfg.estimator, bootstrap_seed=derive_seed(cfg.seed, r, "boot"))
    t, y = sub.treatment, sub.outcome.astype(np.float64)
    reports = [bootstrap_report(name, nuis, t, y, ecfg) for name in ESTIMATORS]
    g_true = gt.true_propensity[eval_idx]
    importance = token_importance(model, data, k=None) if data.tokens is not None else []
    return {
        "replication": r,
        "reports": [rep.to_dict() for rep in reports],
        "ess_ratio": ess_ratio(nuis.g_hat, g_true, t),
        "clipping_fraction": clipping_fraction(nuis.g_hat, cfg.report_clip),
        "best_epoch": model.best_epoch,
        "epochs_run": len(model.history),
        "history": model.history,
        "importance": importance,
        "_model": model,
    }


def _safe_replication(args):
    ds, gt, spec, cfg, r = args
    try:
        out = run_replication(ds, gt, spec, cfg, r)
        out.pop("_model")
        return out
    except Exception as exc:  # recorded and skipped
        log.warning("replication %d failed: %s", r, exc)
        return {"replication": r, "error": f"{type(exc).__name__}: {exc}"}


def run_replications(cfg: ExperimentConfig, source=None) -> list[dict]:
    ds, gt, spec = source or load_source(cfg)
    jobs = [(ds, gt, spec, cfg, r) for r in range(cfg.replications)]
    workers = cfg.workers or os.cpu_count() or 1
    if workers <= 1 or len(jobs) == 1:
        return [_safe_replication(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_safe_replication, jobs))


def aggregate(results: list[dict], tau_true: float) -> dict:
    ok = [r for r in results if "error" not in r]
    out = {
        "version": SCHEMA_VERSION,
        "tau_true": float(tau_true),
        "n_replications": len(results),
        "n_failed": len(results) - len(ok),
        "ps_quality": {
            "ess_ratio": float(np.mean([r["ess_ratio"] for r in ok])) if ok else None,
            "clipping_fraction": float(np.mean([r["clipping_fraction"] for r in ok])) if ok else None,
        },
        "estimators": {},
    }
    for name in ESTIMATORS:
        pairs = [
            (rep["estimate"], rep["se"])
            for r in ok
            for rep in r["reports"]
            if rep["estimator"] == name
        ]
        if len(pairs) >= 2:
            out["estimators"][name] = replication_metrics(pairs, tau_true)
        else:
            est = pairs[0][0] if pairs else None
            out["estimators"][name] = {
                "mean_abs_bias": abs(est - tau_true) if est is not None else None,
                "sd": None,
                "avg_se": pairs[0][1] if pairs else None,
                "coverage": (float(abs(est - tau_true) <= 1.96 * pairs[0][1]) if pairs else None),
                "n_replications": len(pairs),
            }
    return out


def aggregate_importance(results: list[dict], k: int = 20) -> list[tuple[str, float]]:
    """Mean token importance across replications, top ``k``, ties lexicographic."""
    acc = defaultdict(list)
    for r in results:
        for tok, score in r.get("importance", []):
            acc[tok].append(score)
    ranked = sorted(((tok, float(np.mean(v))) for tok, v in acc.items()), key=lambda x: (-x[1], x[0]))
    return ranked[:k]


def load_schema() -> dict:
    return json.loads(resources.files("catr").joinpath("schemas/aggregate.schema.json").read_text())


def validate_aggregate(payload: dict) -> None:
    import jsonschema

    jsonschema.validate(payload, load_schema())


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_run_outputs(out_dir, results: list[dict], agg: dict, importance) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "replications.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPLICATION_COLUMNS)
        for r in results:
            if "error" in r:
                continue
            for rep in r["reports"]:
                w.writerow(
                    [r["replication"], rep["estimator"], _fmt(rep["estimate"]), _fmt(rep["se"]),
                     _fmt(rep["ci_low"]), _fmt(rep["ci_high"]), rep["n_bootstrap"], int(rep["flagged"]),
                     _fmt(r["ess_ratio"]), _fmt(r["clipping_fraction"]), r["best_epoch"], r["epochs_run"]]
                )
    (out / "aggregate.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
    with open(out / "importance_top20.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("rank", "token", "importance"))
        for i, (tok, score) in enumerate(importance, 1):
            w.writerow((i, tok, repr(float(score))))
    failures = [r for r in results if "error" in r]
    if failures:
        (out / "failures.json").write_text(json.dumps(failures, indent=2, sort_keys=True) + "\n")


def write_histories(out_dir, results: list[dict]) -> None:
    hdir = Path(out_dir) / "histories"
    hdir.mkdir(parents=True, exist_ok=True)
    cols = ("epoch", "l_sup", "l_sparse", "hsic", "total", "val_total")
    for r in results:
        if "error" in r:
            continue
        with open(hdir / f"replication_{r['replication']:04d}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in r["history"]:
                w.writerow([row["epoch"]] + [repr(float(row[c])) for c in cols[1:]])


def run_experiment(cfg: ExperimentConfig, source=None) -> dict:
    """Replicate, aggregate and (if ``cfg.out_dir``) write outputs. Returns the aggregate."""
    source = source or load_source(cfg)
    results = run_replications(cfg, source)
    gt = source[1]
    agg = aggregate(results, gt.tau_true)
    validate_aggregate(agg)
    importance = aggregate_importance(results, 20)
    if cfg.out_dir:
        write_run_outputs(cfg.out_dir, results, agg, importance)
        if cfg.save_histories:
            write_histories(cfg.out_dir, results)
    return {"aggregate": agg, "results": results, "importance": importance}


def failure_rate(results: list[dict]) -> float:
    return sum("error" in r for r in results) / max(len(results), 1)


def ablation_arms(cfg: ExperimentConfig) -> dict[str, ExperimentConfig]:
    return {
        "full": replace(cfg, disable_hsic=False, disable_sparsity=False),
        "-HSIC": replace(cfg, disable_hsic=True, disable_sparsity=False),
        "-HSIC-Sparsity": replace(cfg, disable_hsic=True, disable_sparsity=True),
    }


ABLATION_COLUMNS = ("arm", "estimator", "mean_abs_bias", "sd", "avg_se", "coverage", "ess_ratio", "clipping_fraction")


def run_ablation(cfg: ExperimentConfig, source=None) -> dict:
    """Run every arm on shared seeds (same documents and assignments) and join the tables."""
    source = source or load_source(cfg)
    arms = {}
    for name, arm_cfg in ablation_arms(cfg).items():
        if cfg.out_dir:
            arm_cfg = replace(arm_cfg, out_dir=str(Path(cfg.out_dir) / _arm_dir(name)))
        arms[name] = run_experiment(arm_cfg, source)
    rows = []
    for name in ABLATION_ARMS:
        agg = arms[name]["aggregate"]
        for est in ESTIMATORS:
            m = agg["estimators"][est]
            rows.append(
                {
                    "arm": name,
                    "estimator": est,
                    "mean_abs_bias": m["mean_abs_bias"],
                    "sd": m["sd"],
                    "avg_se": m["avg_se"],
                    "coverage": m["coverage"],
                    "ess_ratio": agg["ps_quality"]["ess_ratio"],
                    "clipping_fraction": agg["ps_quality"]["clipping_fraction"],
                }
            )
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        with open(out / "ablation.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
            w.writeheader()
            for row in rows:
                w.writerow({k: _fmt(v) for k, v in row.items()})
        (out / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
    return {"rows": rows, "arms": arms}


def _arm_dir(name: str) -> str:
    return {"full": "full", "-HSIC": "no_hsic", "-HSIC-Sparsity": "no_hsic_no_sparsity"}[name]


def format_table(rows: list[dict]) -> str:
    cols = ("arm", "estimator", "mean_abs_bias", "sd", "avg_se", "coverage", "ess_ratio", "clipping_fraction")
    header = f"{'arm':<16}{'est':<6}{'|bias|':>9}{'sd':>9}{'avg_se':>9}{'cover':>8}{'ess':>8}{'clip':>8}"
    lines = [header]
    for row in rows:
        vals = [row[c] for c in cols[2:]]
        cells = "".join(f"{v:>9.4f}" if v is not None else f"{'-':>9}" for v in vals[:3])
        tail = "".join(f"{v:>8.3f}" if v is not None else f"{'-':>8}" for v in vals[3:])
        lines.append(f"{row['arm']:<16}{row['estimator']:<6}{cells}{tail}")
    return "\n".join(lines)
