"""Command-line entry point: ``catr {generate,run,ablation,lab,importance}``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, RunConfig, default_out_dir, load_config, parse_config
from .dataset import generate_semisynthetic, save_dataset, save_ground_truth
from .experiment import (
    FAILURE_LIMIT,
    failure_rate,
    format_table,
    load_source,
    run_ablation,
    run_experiment,
)
from .estimators import ESTIMATORS
from .positivity_lab import run_lab
from .trainer import save_model, token_importance, train, write_history_csv

log = logging.getLogger("catr")


def _prepare_out(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SystemExit(f"error: cannot create output directory {path}: {exc}")
    if not os.access(path, os.W_OK):
        raise SystemExit(f"error: output directory {path} is not writable")
    return path


def _resolve(args, command: str) -> tuple[RunConfig, Path]:
    rc = load_config(args.config) if args.config else parse_config({})
    exp = rc.experiment
    if args.seed is not None:
        exp = replace(exp, seed=args.seed)
    if args.replications is not None:
        exp = replace(exp, replications=args.replications)
    if args.workers is not None:
        exp = replace(exp, workers=args.workers)
    out = Path(args.out) if args.out else Path(exp.out_dir) if exp.out_dir else default_out_dir(command)
    exp = replace(exp, out_dir=str(out))
    rc.experiment = exp
    if args.seed is not None:
        rc.lab = replace(rc.lab, proxy=replace(rc.lab.proxy, seed=args.seed))
    return rc, out


def cmd_generate(rc: RunConfig, out: Path) -> int:
    exp = rc.experiment
    _prepare_out(out)
    ds, gt = generate_semisynthetic(exp.generator, exp.n, exp.seed)
    save_dataset(ds, out)
    save_ground_truth(gt, exp.generator, out / "truth.json")
    print(f"n={ds.n} d={ds.d} l_max={ds.l_max} tau_true={gt.tau_true:.6g}")
    return 0


def _summarise(agg: dict) -> str:
    lines = [f"tau_true={agg['tau_true']:.4f}  replications={agg['n_replications']}  failed={agg['n_failed']}"]
    q = agg["ps_quality"]
    if q["ess_ratio"] is not None:
        lines.append(f"ESS ratio={q['ess_ratio']:.4f}  clipping fraction={q['clipping_fraction']:.4f}")
    for name in ESTIMATORS:
        m = agg["estimators"][name]
        vals = "  ".join(
            f"{k}={m[k]:.4f}" if m[k] is not None else f"{k}=-"
            for k in ("mean_abs_bias", "sd", "avg_se", "coverage")
        )
        lines.append(f"{name:<5} {vals}")
    return "\n".join(lines)


def cmd_run(rc: RunConfig, out: Path) -> int:
    _prepare_out(out)
    res = run_experiment(rc.experiment)
    print(_summarise(res["aggregate"]))
    if failure_rate(res["results"]) > FAILURE_LIMIT:
        print("error: more than 20% of replications failed", file=sys.stderr)
        return 1
    return 0


def cmd_ablation(rc: RunConfig, out: Path) -> int:
    _prepare_out(out)
    res = run_ablation(rc.experiment)
    print(format_table(res["rows"]))
    worst = max(failure_rate(arm["results"]) for arm in res["arms"].values())
    if worst > FAILURE_LIMIT:
        print("error: more than 20% of replications failed in some arm", file=sys.stderr)
        return 1
    return 0


def cmd_lab(rc: RunConfig, out: Path) -> int:
    _prepare_out(out)
    lab = rc.lab
    res = run_lab(out, lab.dims, lab.proxy, lab.eps, lab.repeats, lab.l2)
    for c in res["curve"]:
        print(f"p={c['dim']:<6d} clip_hat={c['clip_frac_hat']:.4f} clip_true={c['clip_frac_true']:.4f} ess={c['ess_ratio']:.4f}")
    print(f"spearman(p, clip_hat)={res['spearman']:.4f}")
    return 0


def cmd_importance(rc: RunConfig, out: Path) -> int:
    """Train once on the configured data and write the top-k token importances."""
    _prepare_out(out)
    exp = rc.experiment
    ds, _, _ = load_source(exp)
    model = train(ds, replace(exp.effective_train(), seed=exp.seed))
    ranked = token_importance(model, ds, rc.importance_k)
    with open(out / "importance.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("rank", "token", "importance"))
        for i, (tok, score) in enumerate(ranked, 1):
            w.writerow((i, tok, repr(float(score))))
    write_history_csv(model, out / "history.csv")
    save_model(model, out / "model.ckpt")
    for i, (tok, score) in enumerate(ranked, 1):
        print(f"{i:>3d} {tok:<20s} {score:.4f}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "run": cmd_run,
    "ablation": cmd_ablation,
    "lab": cmd_lab,
    "importance": cmd_importance,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="catr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or name).splitlines()[0])
        p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--seed", type=int, help="override the base seed")
        p.add_argument("--out", help="output directory (default: $CATR_OUTPUT_ROOT/<command>)")
        p.add_argument("--workers", type=int, help="worker processes for replications")
        p.add_argument("--replications", type=int, help="override the replication count R")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        rc, out = _resolve(args, args.command)
        return COMMANDS[args.command](rc, out)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
