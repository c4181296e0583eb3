"""Token scoring, relaxed-Bernoulli gates, evaluation masks and sparsity penalties."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .neuralcore import PROB_CLAMP, FeedforwardNet, forward

SPARSITY_KINDS = ("entropy", "bernoulli_entropy", "kl_to_prior", "l1")


@dataclass(frozen=True)
class SparsityConfig:
    kind: str = "entropy"
    prior: float = 0.2
    weight: float = 0.1

    def __post_init__(self):
        if self.kind not in SPARSITY_KINDS:
            raise ValueError(f"unknown sparsity kind {self.kind!r}; choose from {SPARSITY_KINDS}")
        if self.kind == "kl_to_prior" and not 0.0 < self.prior < 1.0:
            raise ValueError("prior must lie in (0, 1)")
        if self.weight < 0:
            raise ValueError("sparsity weight must be >= 0")


@dataclass
class MaskSample:
    scores: np.ndarray
    gates: np.ndarray
    mode: str


def _batch(embeddings, lengths):
    emb = np.asarray(embeddings, dtype=np.float64)
    lengths = np.atleast_1d(np.asarray(lengths))
    if emb.ndim == 2:
        emb = emb[None]
    if np.any(lengths < 1):
        raise ValueError("sequence length must be >= 1")
    if lengths.shape[0] != emb.shape[0]:
        raise ValueError("one length per sequence is required")
    mask = np.arange(emb.shape[1])[None, :] < lengths[:, None]
    return emb, lengths, mask


def selector_inputs(embeddings, lengths) -> tuple[np.ndarray, np.ndarray]:
    """Per-token features ``[e_j ; mean of real-token embeddings]`` and the real-token mask."""
    emb, lengths, mask = _batch(embeddings, lengths)
    ctx = emb.sum(axis=1) / lengths[:, None]
    B, L, d = emb.shape
    feats = np.concatenate([emb, np.broadcast_to(ctx[:, None, :], (B, L, d))], axis=2)
    return feats, mask


def score_tokens(selector: FeedforwardNet, embeddings, lengths, tape: Tape | None = None) -> Var:
    """Selection probabilities ``a`` of shape (B, L); padded positions are 0.

    A single (L, d) sequence with a scalar length is accepted and scored as a
    batch of one.
    """
    emb, lengths, mask = _batch(embeddings, lengths)
    B, L, d = emb.shape
    if selector.widths[0] != 2 * d:
        raise ValueError(f"selector expects input width {selector.widths[0]}, got 2 * {d}")
    tape = tape or Tape()
    # first layer split as [e_j ; ctx] @ W0 = e_j @ W0[:d] + ctx @ W0[d:]
    ctx = emb.sum(axis=1) / lengths[:, None]
    w0 = tape.param(selector.weights[0], "W0")
    b0 = tape.param(selector.biases[0], "b0")
    h_tok = tape.constant(emb.reshape(B * L, d)) @ w0[:d]
    h_ctx = tape.constant(ctx) @ w0[d:]
    width = selector.widths[1]
    h = (h_tok.reshape(B, L, width) + h_ctx.reshape(B, 1, width) + b0).reshape(B * L, width)
    if len(selector.weights) == 1:
        logits = h
    else:
        rest = FeedforwardNet(selector.widths[1:], selector.weights[1:], selector.biases[1:], selector.output_transform)
        logits = forward(rest, ad.relu(h), tape)
    logits = logits.reshape(B, L)
    a = ad.clip(ad.sigmoid(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)
    return a * mask.astype(np.float64)


def logistic_noise(u) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    return np.log(u) - np.log1p(-u)


def sample_relaxed_mask(a, eta: float, rng=None, u=None, mask=None):
    """Binary-concrete gates ``sigmoid((logit a + logit u) / eta)``.

    Pass uniform draws ``u`` directly or an RNG (``np.random.Generator`` or
    seed). Positions where ``mask`` is False get gate 0.
    """
    if not eta > 0:
        raise ValueError(f"temperature must be > 0, got {eta}")
    a_val = ad.value(a)
    if u is None:
        rng = np.random.default_rng(rng)
        u = rng.random(a_val.shape)
    if mask is None:
        mask = a_val > 0
    safe = np.where(mask, a_val, 0.5)
    if isinstance(a, Var):
        a_in = a + (~mask) * 0.5  # keep logs finite on padding; gated to 0 below
    else:
        a_in = safe
    logit_a = ad.log(a_in) - ad.log(1.0 - a_in)
    s = ad.sigmoid((logit_a + logistic_noise(u)) * (1.0 / eta))
    return s * np.asarray(mask, dtype=np.float64)


def deterministic_mask(a, mode: str = "threshold", k: int | None = None, lengths=None) -> np.ndarray:
    """Evaluation gates.

    ``threshold``: 1[a >= 0.5]. ``top_k``: ones at the k largest real-token
    scores, ties to the lower index. ``soft``: the scores themselves.
    """
    a = np.asarray(ad.value(a), dtype=np.float64)
    squeeze = a.ndim == 1
    a2 = a[None] if squeeze else a
    if lengths is None:
        lengths = np.full(a2.shape[0], a2.shape[1])
    lengths = np.atleast_1d(np.asarray(lengths))
    real = np.arange(a2.shape[1])[None, :] < lengths[:, None]
    if mode == "threshold":
        out = ((a2 >= 0.5) & real).astype(np.float64)
    elif mode == "soft":
        out = np.where(real, a2, 0.0)
    elif mode == "top_k":
        if k is None or k < 1 or np.any(k > lengths):
            raise ValueError(f"top_k needs 1 <= k <= length, got k={k}")
        out = np.zeros_like(a2)
        for i in range(a2.shape[0]):
            L = int(lengths[i])
            order = np.argsort(-a2[i, :L], kind="stable")[:k]
            out[i, order] = 1.0
    else:
        raise ValueError(f"unknown mask mode {mode!r}")
    return out[0] if squeeze else out


def sparsity_penalty(s, cfg: SparsityConfig, mask=None):
    """Per-sequence penalty averaged over real tokens; shape (B,) (scalar for 1-D input)."""
    if not isinstance(s, Var):
        s = np.asarray(s, dtype=np.float64)
    squeeze = s.ndim == 1
    if squeeze:
        s = s.reshape(1, -1)
    if mask is None:
        mask = np.ones(s.shape, dtype=bool)
    mask = np.asarray(mask, dtype=np.float64).reshape(s.shape)
    length = mask.sum(axis=1)
    # floor only inside logs so hard 0/1 gates cost nothing
    log_s = ad.log(ad.maximum(s, PROB_CLAMP))
    log_1ms = ad.log(ad.maximum(1.0 - s, PROB_CLAMP))
    if cfg.kind == "entropy":
        per_tok = -(s * log_s)
    elif cfg.kind == "bernoulli_entropy":
        per_tok = -(s * log_s + (1.0 - s) * log_1ms)
    elif cfg.kind == "kl_to_prior":
        pi = cfg.prior
        per_tok = s * (log_s - np.log(pi)) + (1.0 - s) * (log_1ms - np.log(1.0 - pi))
    else:
        per_tok = s * 1.0
    out = (per_tok * mask).sum(axis=1) / length
    return out[0] if squeeze else out
