"""Joint training of the token selector and the three-head predictor.

Per minibatch the objective is::

    mean supervised loss + mu * mean sparsity penalty + gamma * HSIC(rT, rY)

with HSIC computed over the batch residuals. Early stopping watches the same
objective on the validation split, evaluated with deterministic masks.
"""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .dataset import TokenSequenceDataset, train_val_test_split
from .heads import PredictorModel, init_predictor, pool_masked, predict, residuals, supervised_loss
from .kernels import KernelConfig, hsic_residual
from .neuralcore import AdamState, FeedforwardNet, adam_step, init_network, load_checkpoint, save_checkpoint
from .rationalizer import SparsityConfig, deterministic_mask, sample_relaxed_mask, score_tokens, sparsity_penalty

log = logging.getLogger(__name__)

MIN_HSIC_BATCH = 32
HISTORY_COLUMNS = ("epoch", "l_sup", "l_sparse", "hsic", "total", "val_total")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mu: float = 0.1
    gamma: float = 1.0
    eta: float = 0.5
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 10
    learning_rate: float = 1e-3
    split_ratios: tuple = (25, 6, 6)
    seed: int = 0
    sparsity_kind: str = "entropy"
    sparsity_prior: float = 0.2
    outcome_mode: str = "real"
    kernel: KernelConfig = field(default_factory=KernelConfig)
    selector_hidden: tuple = (64,)
    trunk_widths: tuple = (200, 100)
    head_widths: tuple = ()
    eval_mask: str = "threshold"

    def __post_init__(self):
        if self.mu < 0 or self.gamma < 0:
            raise ValueError("mu and gamma must be >= 0")
        if not self.eta > 0:
            raise ValueError("temperature eta must be > 0")
        if self.batch_size < MIN_HSIC_BATCH:
            raise ValueError(f"batch_size must be >= {MIN_HSIC_BATCH} for a stable HSIC estimate")
        if self.max_epochs < 0 or self.patience < 1:
            raise ValueError("max_epochs must be >= 0 and patience >= 1")
        if self.outcome_mode not in ("real", "binary"):
            raise ValueError("outcome_mode must be 'real' or 'binary'")
        if len(self.split_ratios) != 3 or min(self.split_ratios) <= 0:
            raise ValueError("split_ratios must be three positive numbers")
        self.split_ratios = tuple(self.split_ratios)
        self.selector_hidden = tuple(self.selector_hidden)
        self.trunk_widths = tuple(self.trunk_widths)
        self.head_widths = tuple(self.head_widths)
        SparsityConfig(self.sparsity_kind, self.sparsity_prior, self.mu)

    @property
    def sparsity(self) -> SparsityConfig:
        return SparsityConfig(self.sparsity_kind, self.sparsity_prior, self.mu)

    @property
    def binary_outcome(self) -> bool:
        return self.outcome_mode == "binary"


@dataclass
class TrainedModel:
    selector: FeedforwardNet
    predictor: PredictorModel
    config: TrainConfig
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    split: tuple | None = None

    def nets(self) -> dict[str, FeedforwardNet]:
        return {"selector": self.selector, **self.predictor.nets()}

    def parameters(self) -> list[np.ndarray]:
        return self.selector.parameters() + self.predictor.parameters()


@dataclass
class NuisanceEstimates:
    g_hat: np.ndarray
    q0_hat: np.ndarray
    q1_hat: np.ndarray

    def __post_init__(self):
        self.g_hat = np.asarray(self.g_hat, dtype=np.float64)
        self.q0_hat = np.asarray(self.q0_hat, dtype=np.float64)
        self.q1_hat = np.asarray(self.q1_hat, dtype=np.float64)
        n = self.g_hat.shape[0]
        if self.q0_hat.shape != (n,) or self.q1_hat.shape != (n,):
            raise ValueError("nuisance vectors differ in length")
        if not (np.all(np.isfinite(self.g_hat)) and np.all(np.isfinite(self.q0_hat)) and np.all(np.isfinite(self.q1_hat))):
            raise ValueError("nuisance estimates must be finite")
        if np.any((self.g_hat <= 0) | (self.g_hat >= 1)):
            raise ValueError("g_hat must lie strictly inside (0, 1)")

    def __len__(self):
        return self.g_hat.shape[0]

    def take(self, idx) -> "NuisanceEstimates":
        return NuisanceEstimates(self.g_hat[idx], self.q0_hat[idx], self.q1_hat[idx])


def init_model(d: int, cfg: TrainConfig) -> TrainedModel:
    ss = np.random.SeedSequence([cfg.seed, 0x5E1])
    s_sel, s_pred = ss.spawn(2)
    selector = init_network([2 * d, *cfg.selector_hidden, 1], "identity", s_sel)
    predictor = init_predictor(d, cfg.trunk_widths, cfg.head_widths, cfg.binary_outcome, s_pred)
    return TrainedModel(selector, predictor, cfg)


def batch_objective(model: TrainedModel, emb, lengths, t, y, u, cfg: TrainConfig, tape: Tape):
    """Loss components for one minibatch: (total, supervised, sparsity, hsic).

    ``u`` holds the uniform draws for the relaxed gates. Switched-off terms
    (weight 0) are reported as 0.0 and not computed.
    """
    mask = np.arange(emb.shape[1])[None, :] < np.asarray(lengths)[:, None]
    a = score_tokens(model.selector, emb, lengths, tape)
    s = sample_relaxed_mask(a, cfg.eta, u=u, mask=mask)
    pred = predict(model.predictor, pool_masked(emb, s), tape)
    sup = supervised_loss(pred, t, y, cfg.binary_outcome)
    total = sup
    sparse = hsic = 0.0
    if cfg.mu > 0:
        sparse = sparsity_penalty(s, cfg.sparsity, mask).mean()
        total = total + cfg.mu * sparse
    if cfg.gamma > 0:
        r = residuals(pred, t, y)
        hsic = hsic_residual(r.rT, r.rY, cfg.kernel)
        total = total + cfg.gamma * hsic
    return total, sup, sparse, hsic


def _deterministic_pass(model: TrainedModel, ds: TokenSequenceDataset, mode: str, tape: Tape):
    emb = ds.embeddings.astype(np.float64)
    a = score_tokens(model.selector, emb, ds.lengths, tape)
    gates = deterministic_mask(a, mode, lengths=ds.lengths)
    pred = predict(model.predictor, pool_masked(emb, gates), tape)
    return a, gates, pred


def evaluation_objective(model: TrainedModel, ds: TokenSequenceDataset, cfg: TrainConfig | None = None) -> dict:
    """Objective terms on ``ds`` with deterministic masks (HSIC over all of ``ds``)."""
    cfg = cfg or model.config
    tape = Tape()
    _, gates, pred = _deterministic_pass(model, ds, cfg.eval_mask, tape)
    t = ds.treatment.astype(np.float64)
    y = ds.outcome.astype(np.float64)
    sup = float(supervised_loss(pred, t, y, cfg.binary_outcome).value)
    sparse = float(np.mean(sparsity_penalty(gates, cfg.sparsity, ds.mask()))) if cfg.mu > 0 else 0.0
    r = residuals(pred, t, y)
    hsic_raw = float(hsic_residual(ad.value(r.rT), ad.value(r.rY), cfg.kernel)) if ds.n >= 2 else 0.0
    hsic = hsic_raw if cfg.gamma > 0 else 0.0
    return {
        "l_sup": sup,
        "l_sparse": sparse,
        "hsic": hsic,
        "hsic_raw": hsic_raw,
        "total": sup + cfg.mu * sparse + cfg.gamma * hsic,
    }


def _batches(idx: np.ndarray, batch_size: int) -> list[np.ndarray]:
    n = idx.size
    if n <= batch_size:
        return [idx]
    chunks = [idx[i : i + batch_size] for i in range(0, n, batch_size)]
    if chunks[-1].size < MIN_HSIC_BATCH:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def train(ds: TokenSequenceDataset, cfg: TrainConfig, split=None, callback=None) -> TrainedModel:
    """Fit selector and predictor on the training split with early stopping.

    ``split`` is an optional ``(train_idx, val_idx, test_idx)``; by default the
    dataset is split with ``cfg.split_ratios`` and ``cfg.seed``. ``callback``,
    if given, is called as ``callback(epoch, model)`` after each epoch with the
    current (not best) parameters.
    """
    if ds.n < 2:
        raise ValueError("dataset must contain at least two units")
    if split is None:
        split = train_val_test_split(ds.n, cfg.split_ratios, cfg.seed)
    train_idx, val_idx = np.asarray(split[0]), np.asarray(split[1])
    arms = np.unique(ds.treatment[train_idx])
    if arms.size < 2:
        raise ValueError(
            f"training split contains only treatment arm {arms.tolist()}; both arms are required"
        )
    model = init_model(ds.d, cfg)
    model.split = tuple(np.asarray(s) for s in split)
    if cfg.max_epochs == 0:
        return model

    emb_all = ds.embeddings.astype(np.float64)
    t_all = ds.treatment.astype(np.float64)
    y_all = ds.outcome.astype(np.float64)
    val_ds = ds.subset(val_idx) if val_idx.size >= 2 else None

    params = model.parameters()
    names = [f"{net}.{p}" for net, obj in model.nets().items() for p in obj.parameter_names()]
    opt = AdamState.for_params(params, lr=cfg.learning_rate)
    best = None
    best_val = np.inf
    since_best = 0
    for epoch in range(cfg.max_epochs):
        rng_order = np.random.default_rng([cfg.seed, epoch, 1])
        # one uniform row per unit, independent of batch composition
        u_all = np.random.default_rng([cfg.seed, epoch, 2]).random((ds.n, ds.l_max))
        order = rng_order.permutation(train_idx)
        sums = defaultdict(float)
        n_batches = 0
        for b, idx in enumerate(_batches(order, cfg.batch_size)):
            tape = Tape()
            total, sup, sparse, hsic = batch_objective(
                model, emb_all[idx], ds.lengths[idx], t_all[idx], y_all[idx], u_all[idx], cfg, tape
            )
            if not np.isfinite(total.value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            tape.backward(total)
            adam_step(params, [tape.grad(p) for p in params], opt, names)
            sums["l_sup"] += float(ad.value(sup))
            sums["l_sparse"] += float(ad.value(sparse))
            sums["hsic"] += float(ad.value(hsic))
            sums["total"] += float(ad.value(total))
            n_batches += 1
        row = {"epoch": epoch, **{k: sums[k] / n_batches for k in ("l_sup", "l_sparse", "hsic", "total")}}
        if val_ds is not None:
            row["val_total"] = evaluation_objective(model, val_ds, cfg)["total"]
        else:
            row["val_total"] = row["total"]
        model.history.append(row)
        if callback is not None:
            callback(epoch, model)
        if row["val_total"] < best_val:
            best_val = row["val_total"]
            best = [p.copy() for p in params]
            model.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                log.debug("early stop at epoch %d (best %d)", epoch, model.best_epoch)
                break
    if best is not None:
        for p, b in zip(params, best):
            p[...] = b
    return model


def evaluate_nuisances(model: TrainedModel, ds: TokenSequenceDataset, eval_mask_mode: str | None = None) -> NuisanceEstimates:
    """Per-unit (g_hat, q0_hat, q1_hat) using deterministic masks."""
    mode = eval_mask_mode or model.config.eval_mask
    _, _, (g, q0, q1) = _deterministic_pass(model, ds, mode, Tape())
    return NuisanceEstimates(g.value.copy(), q0.value.copy(), q1.value.copy())


def selection_scores(model: TrainedModel, ds: TokenSequenceDataset) -> np.ndarray:
    return score_tokens(model.selector, ds.embeddings.astype(np.float64), ds.lengths, Tape()).value.copy()


def _words(tokens: list[str], scores: np.ndarray):
    """Merge WordPiece continuations (``##xx``) into whole words with mean scores."""
    if not any(tok.startswith("##") for tok in tokens):
        return list(zip(tokens, scores.tolist()))
    words: list[tuple[str, list[float]]] = []
    for tok, sc in zip(tokens, scores.tolist()):
        if tok.startswith("##") and words:
            word, vals = words[-1]
            words[-1] = (word + tok[2:], vals + [sc])
        else:
            words.append((tok, [sc]))
    return [(w, sum(v) / len(v)) for w, v in words]


def token_importance(model: TrainedModel, ds: TokenSequenceDataset, k: int = 20) -> list[tuple[str, float]]:
    """Top-``k`` token types by mean selection score; ties broken lexicographically."""
    if ds.tokens is None:
        raise ValueError("dataset carries no token strings")
    a = selection_scores(model, ds)
    totals: dict[str, list[float]] = defaultdict(lambda: [0.0, 0])
    for i, toks in enumerate(ds.tokens):
        for word, score in _words(toks, a[i, : len(toks)]):
            acc = totals[word]
            acc[0] += score
            acc[1] += 1
    ranked = sorted(((w, s / c) for w, (s, c) in totals.items()), key=lambda x: (-x[1], x[0]))
    return ranked[:k]


def write_history_csv(model: TrainedModel, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in model.history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])


def save_model(model: TrainedModel, path) -> None:
    save_checkpoint(model.nets(), path)


def load_model(path, cfg: TrainConfig | None = None) -> TrainedModel:
    nets = load_checkpoint(path)
    predictor = PredictorModel(nets["trunk"], nets["head_g"], nets["head_q0"], nets["head_q1"])
    return TrainedModel(nets["selector"], predictor, cfg or TrainConfig())


__all__ = [
    "NuisanceEstimates",
    "TrainConfig",
    "TrainedModel",
    "TrainingError",
    "batch_objective",
    "evaluate_nuisances",
    "evaluation_objective",
    "init_model",
    "load_model",
    "save_model",
    "selection_scores",
    "token_importance",
    "train",
    "write_history_csv",
]
