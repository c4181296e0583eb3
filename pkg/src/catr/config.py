"""TOML experiment configuration.

Sections: top-level scalars (``seed``, ``replications``, ``out``, ``workers``,
``eval_split``), ``[data]`` (``n`` or ``path``), ``[generator]``, ``[train]``
(with optional ``[train.kernel]``), ``[estimator]``, ``[ablation]`` and
``[lab]``.
"""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .dataset import ConfounderSpec
from .estimators import EstimatorConfig
from .experiment import ExperimentConfig
from .kernels import KernelConfig
from .positivity_lab import ProxySpec
from .trainer import TrainConfig

OUTPUT_ROOT_ENV = "CATR_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class LabConfig:
    proxy: ProxySpec = field(default_factory=ProxySpec)
    dims: tuple = (4, 16, 64, 256, 1024)
    repeats: int = 5
    eps: float = 0.03
    l2: float = 1e-3


@dataclass
class RunConfig:
    experiment: ExperimentConfig
    lab: LabConfig
    importance_k: int = 20
    source: Path | None = None


def _build(cls, section: dict, where: str):
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"[{where}] unknown keys: {sorted(unknown)}")
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from None


def parse_config(raw: dict, source: Path | None = None) -> RunConfig:
    raw = dict(raw)
    data = raw.pop("data", {})
    gen = _build(ConfounderSpec, raw.pop("generator", {}), "generator")
    train_raw = dict(raw.pop("train", {}))
    kernel = _build(KernelConfig, train_raw.pop("kernel", {}), "train.kernel")
    train = _build(TrainConfig, {**train_raw, "kernel": kernel}, "train")
    est = _build(EstimatorConfig, raw.pop("estimator", {}), "estimator")
    ablation = raw.pop("ablation", {})
    lab_raw = dict(raw.pop("lab", {}))
    proxy = _build(ProxySpec, lab_raw.pop("proxy", {}), "lab.proxy")
    lab = _build(LabConfig, {**lab_raw, "proxy": proxy}, "lab")
    importance_k = int(raw.pop("importance_k", 20))

    if "n" in data and "path" in data:
        raise ConfigError("[data] give either n (generator) or path (dataset directory), not both")
    dataset_path = data.get("path")
    if dataset_path and source is not None and not Path(dataset_path).is_absolute():
        dataset_path = str((source.parent / dataset_path).resolve())
    top = {k: raw.pop(k) for k in list(raw) if k in ("seed", "replications", "workers", "eval_split", "report_clip", "save_histories")}
    out = raw.pop("out", None)
    if raw:
        raise ConfigError(f"unknown top-level keys: {sorted(raw)}")
    unknown_ablation = set(ablation) - {"disable_hsic", "disable_sparsity"}
    if unknown_ablation:
        raise ConfigError(f"[ablation] unknown keys: {sorted(unknown_ablation)}")
    exp = ExperimentConfig(
        generator=gen,
        n=int(data.get("n", 2000)),
        dataset_path=dataset_path,
        train=train,
        estimator=est,
        out_dir=out,
        disable_hsic=bool(ablation.get("disable_hsic", False)),
        disable_sparsity=bool(ablation.get("disable_sparsity", False)),
        **top,
    )
    return RunConfig(exp, lab, importance_k, source)


def load_config(path) -> RunConfig:
    path = Path(path)
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return parse_config(raw, path)


def default_out_dir(command: str) -> Path:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root or "catr_runs") / command
