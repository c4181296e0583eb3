"""Three-head predictor (propensity, two outcome heads) over gate-pooled sequences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .neuralcore import FeedforwardNet, cross_entropy, forward, init_network, squared_error

POOL_FLOOR = 1e-6


@dataclass
class PredictorModel:
    trunk: FeedforwardNet
    head_g: FeedforwardNet
    head_q0: FeedforwardNet
    head_q1: FeedforwardNet

    def nets(self) -> dict[str, FeedforwardNet]:
        return {"trunk": self.trunk, "head_g": self.head_g, "head_q0": self.head_q0, "head_q1": self.head_q1}

    def parameters(self) -> list[np.ndarray]:
        return [p for net in self.nets().values() for p in net.parameters()]

    def copy(self) -> "PredictorModel":
        return PredictorModel(*(net.copy() for net in self.nets().values()))


@dataclass
class ResidualPair:
    rT: object
    rY: object


def init_predictor(
    d: int,
    trunk_widths=(200, 100),
    head_widths=(),
    binary_outcome: bool = False,
    seed=0,
) -> PredictorModel:
    """Trunk ``[d -> trunk_widths]`` with ReLU output, then one affine stack per head."""
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    ss = root.spawn(4)
    trunk = init_network([d, *trunk_widths], "relu", ss[0])
    h = trunk.widths[-1]
    q_out = "sigmoid" if binary_outcome else "identity"
    head_g = init_network([h, *head_widths, 1], "sigmoid", ss[1])
    head_q0 = init_network([h, *head_widths, 1], q_out, ss[2])
    head_q1 = init_network([h, *head_widths, 1], q_out, ss[3])
    return PredictorModel(trunk, head_g, head_q0, head_q1)


def pool_masked(embeddings, gates, lengths=None):
    """Gate-weighted mean ``sum_j s_j e_j / max(sum_j s_j, 1e-6)`` over real tokens.

    ``embeddings`` is (B, L, d) or (L, d); ``gates`` matches its leading shape.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    single = emb.ndim == 2
    if single:
        emb = emb[None]
        gates = gates.reshape(1, -1) if isinstance(gates, Var) else np.asarray(gates, dtype=np.float64)[None]
    B, L, d = emb.shape
    if gates.shape != (B, L):
        raise ValueError(f"gates shape {gates.shape} does not match sequences {(B, L)}")
    if lengths is not None:
        real = np.arange(L)[None, :] < np.atleast_1d(lengths)[:, None]
        gates = gates * real.astype(np.float64)
    num = (gates.reshape(B, L, 1) * emb).sum(axis=1)
    den = ad.maximum(gates.sum(axis=1), POOL_FLOOR).reshape(B, 1)
    out = num / den
    return out[0] if single else out


def predict(model: PredictorModel, pooled, tape: Tape | None = None):
    """Return ``(g_hat, q0_hat, q1_hat)``, each of shape (B,)."""
    if tape is None:
        tape = pooled.tape if isinstance(pooled, Var) else Tape()
    single = np.ndim(ad.value(pooled)) == 1
    if single:
        pooled = pooled.reshape(1, -1) if isinstance(pooled, Var) else np.asarray(pooled)[None]
    if pooled.shape[-1] != model.trunk.widths[0]:
        raise ValueError(f"pooled width {pooled.shape[-1]} != trunk input {model.trunk.widths[0]}")
    z = forward(model.trunk, pooled, tape)
    g = forward(model.head_g, z, tape).reshape(-1)
    q0 = forward(model.head_q0, z, tape).reshape(-1)
    q1 = forward(model.head_q1, z, tape).reshape(-1)
    return g, q0, q1


def factual_outcome(q0, q1, t):
    """Q_hat at the observed arm; the other head gets an exact zero gradient."""
    t = np.asarray(t, dtype=np.float64)
    return q1 * t + q0 * (1.0 - t)


def supervised_loss(pred, t, y, binary_outcome: bool = False, reduce: bool = True):
    """CE on the propensity plus CE (binary) or squared error (real) on the factual head."""
    g, q0, q1 = pred
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    qt = factual_outcome(q0, q1, t)
    out_loss = cross_entropy(qt, y) if binary_outcome else squared_error(qt, y)
    per_unit = cross_entropy(g, t) + out_loss
    return per_unit.mean() if reduce else per_unit


def residuals(pred, t, y) -> ResidualPair:
    g, q0, q1 = pred
    t = np.asarray(t, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return ResidualPair(t - g, y - factual_outcome(q0, q1, t))
