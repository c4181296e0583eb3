"""Token-sequence datasets, hash-seeded token embeddings and the keyword-driven
semi-synthetic generator."""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import expit, ndtr

FORMAT_VERSION = 1

DEFAULT_KEYWORDS = ("shock", "hypotension", "infection", "sepsis", "pneumonia")


class DatasetFormatError(ValueError):
    """A dataset file or in-memory dataset breaks the format contract."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class TokenSequenceDataset:
    """Zero-padded token embeddings with per-unit treatment and outcome.

    ``embeddings`` and ``outcome`` are float32 so the on-disk format round-trips
    bit-exactly.
    """

    embeddings: np.ndarray  # (n, l_max, d) float32
    lengths: np.ndarray  # (n,) uint32
    treatment: np.ndarray  # (n,) uint8
    outcome: np.ndarray  # (n,) float32
    tokens: list[list[str]] | None = None

    def __post_init__(self):
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float32)
        self.lengths = np.ascontiguousarray(self.lengths, dtype=np.uint32)
        self.treatment = np.ascontiguousarray(self.treatment, dtype=np.uint8)
        self.outcome = np.ascontiguousarray(self.outcome, dtype=np.float32)
        self.validate()

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def l_max(self) -> int:
        return self.embeddings.shape[1]

    @property
    def d(self) -> int:
        return self.embeddings.shape[2]

    def __len__(self):
        return self.n

    def validate(self) -> None:
        e = self.embeddings
        if e.ndim != 3:
            raise DatasetFormatError("embeddings", f"expected a 3-D tensor, got shape {e.shape}")
        n, l_max, _ = e.shape
        for name in ("lengths", "treatment", "outcome"):
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise DatasetFormatError(name, f"expected shape ({n},), got {arr.shape}")
        if n and (self.lengths.min() < 1 or self.lengths.max() > l_max):
            bad = int(np.flatnonzero((self.lengths < 1) | (self.lengths > l_max))[0])
            raise DatasetFormatError(
                "lengths", f"lengths[{bad}]={self.lengths[bad]} outside 1..{l_max}"
            )
        if not np.all(np.isfinite(e)):
            raise DatasetFormatError("embeddings", "non-finite entries")
        if not np.all(np.isfinite(self.outcome)):
            raise DatasetFormatError("outcome", "non-finite entries")
        if np.any(self.treatment > 1):
            raise DatasetFormatError("treatment", "values must be 0 or 1")
        if np.any(e[~self.mask()] != 0):
            raise DatasetFormatError("embeddings", "padded rows must be exactly zero")
        if self.tokens is not None:
            if len(self.tokens) != n:
                raise DatasetFormatError("tokens", f"expected {n} token lists, got {len(self.tokens)}")
            for i, toks in enumerate(self.tokens):
                if len(toks) != self.lengths[i]:
                    raise DatasetFormatError(
                        "tokens", f"unit {i} has {len(toks)} tokens but length {self.lengths[i]}"
                    )

    def mask(self) -> np.ndarray:
        """Boolean (n, l_max) mask of real (non-padded) positions."""
        return np.arange(self.l_max)[None, :] < self.lengths[:, None]

    def subset(self, idx) -> "TokenSequenceDataset":
        idx = np.asarray(idx)
        return TokenSequenceDataset(
            self.embeddings[idx],
            self.lengths[idx],
            self.treatment[idx],
            self.outcome[idx],
            None if self.tokens is None else [self.tokens[i] for i in idx],
        )

    def with_assignments(self, treatment, outcome) -> "TokenSequenceDataset":
        return TokenSequenceDataset(self.embeddings, self.lengths, treatment, outcome, self.tokens)


@dataclass
class ConfounderSpec:
    """Keyword-driven semi-synthetic design.

    Each document mixes filler tokens with, with probability
    ``keyword_inclusion_prob``, between one and ``max_keywords_per_doc``
    distinct keywords. The keyword indicator ``c`` drives treatment through
    ``sigmoid(a0 + a1 c)`` and outcomes through ``b0 + b1 t + b2 c``, unless
    ``propensity_fn`` / ``outcome_fn`` override those maps.
    """

    keywords: tuple[str, ...] = DEFAULT_KEYWORDS
    filler_vocab_size: int = 200
    doc_length_range: tuple[int, int] = (20, 40)
    keyword_inclusion_prob: float = 0.4
    max_keywords_per_doc: int = 2
    propensity_params: tuple[float, float] = (-0.4, 1.6)
    outcome_params: tuple[float, float, float] = (0.0, 1.0, 2.0)
    noise_sd: float = 1.0
    embedding_dim: int = 32
    embedding_seed: int = 7
    binary_outcome: bool = False
    propensity_fn: Callable[[np.ndarray], np.ndarray] | None = field(default=None, repr=False)
    outcome_fn: Callable[[np.ndarray, int], np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        self.keywords = tuple(self.keywords)
        self.doc_length_range = tuple(int(v) for v in self.doc_length_range)
        self.propensity_params = tuple(float(v) for v in self.propensity_params)
        self.outcome_params = tuple(float(v) for v in self.outcome_params)
        if not self.keywords:
            raise ValueError("at least one confounder keyword is required")
        if set(self.keywords) & set(self.filler_vocab()):
            raise ValueError("keywords overlap the filler vocabulary")
        if not 0.0 < self.keyword_inclusion_prob < 1.0:
            raise ValueError("keyword_inclusion_prob must lie in (0, 1)")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        lo, hi = self.doc_length_range
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid doc_length_range {self.doc_length_range}")
        if self.filler_vocab_size < 1 and lo > 1:
            raise ValueError("filler vocabulary is empty")
        if self.max_keywords_per_doc < 1:
            raise ValueError("max_keywords_per_doc must be >= 1")

    def filler_vocab(self) -> list[str]:
        return [f"w{j:04d}" for j in range(self.filler_vocab_size)]

    @property
    def degenerate(self) -> bool:
        return self.propensity_params[1] == 0.0 and self.outcome_params[2] == 0.0

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("propensity_fn")
        out.pop("outcome_fn")
        out["keywords"] = list(self.keywords)
        out["doc_length_range"] = list(self.doc_length_range)
        out["propensity_params"] = list(self.propensity_params)
        out["outcome_params"] = list(self.outcome_params)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ConfounderSpec":
        return cls(**d)


@dataclass
class GroundTruth:
    true_propensity: np.ndarray
    true_q0: np.ndarray
    true_q1: np.ndarray
    confounder_indicator: np.ndarray
    tau_true: float
    warnings: tuple[str, ...] = ()


def embed_token(token: str, d: int, seed: int = 0) -> np.ndarray:
    """Deterministic unit vector for ``token``: hash -> RNG stream -> normalised Gaussian."""
    if not token:
        raise ValueError("cannot embed an empty token")
    if d < 1:
        raise ValueError("embedding dimension must be >= 1")
    digest = hashlib.sha256(f"{seed}\x00{token}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:16], "little"))
    v = rng.standard_normal(d)
    while not np.any(v):  # pragma: no cover - probability zero
        v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def true_ate(gt: GroundTruth) -> float:
    """Population mean of Q1 - Q0 over the generated units."""
    if gt.true_q0.size == 0:
        raise ValueError("ground truth is empty")
    return float(np.mean(gt.true_q1 - gt.true_q0))


def _propensity(spec: ConfounderSpec, c: np.ndarray) -> np.ndarray:
    if spec.propensity_fn is not None:
        return np.asarray(spec.propensity_fn(c), dtype=np.float64)
    a0, a1 = spec.propensity_params
    return expit(a0 + a1 * c)


def _outcome_mean(spec: ConfounderSpec, c: np.ndarray, t: int) -> np.ndarray:
    if spec.outcome_fn is not None:
        return np.asarray(spec.outcome_fn(c, t), dtype=np.float64)
    b0, b1, b2 = spec.outcome_params
    return b0 + b1 * t + b2 * c


def _potential_means(spec: ConfounderSpec, c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m0, m1 = _outcome_mean(spec, c, 0), _outcome_mean(spec, c, 1)
    if not spec.binary_outcome:
        return m0, m1
    # Y = 1[mean + noise > 0]
    if spec.noise_sd == 0:
        return (m0 > 0).astype(float), (m1 > 0).astype(float)
    return ndtr(m0 / spec.noise_sd), ndtr(m1 / spec.noise_sd)


def _sample_assignments(spec: ConfounderSpec, c: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    g = _propensity(spec, c)
    t = (rng.random(c.size) < g).astype(np.uint8)
    mean = np.where(t == 1, _outcome_mean(spec, c, 1), _outcome_mean(spec, c, 0))
    y = mean + spec.noise_sd * rng.standard_normal(c.size)
    if spec.binary_outcome:
        y = (y > 0).astype(float)
    return t, y


def _ground_truth(spec: ConfounderSpec, c: np.ndarray) -> GroundTruth:
    g = _propensity(spec, c)
    q0, q1 = _potential_means(spec, c)
    msgs = ()
    if spec.degenerate:
        msgs = ("no confounding: a1 = 0 and b2 = 0",)
    gt = GroundTruth(g, q0, q1, c.astype(np.uint8), 0.0, msgs)
    gt.tau_true = true_ate(gt)
    return gt


def sample_population(spec: ConfounderSpec, n: int, seed=0) -> dict[str, np.ndarray]:
    """Keyword indicators and both potential outcomes without building documents.

    Used for Monte Carlo checks of the generator at large ``n``.
    """
    rng = np.random.default_rng(seed)
    c = (rng.random(n) < spec.keyword_inclusion_prob).astype(float)
    g = _propensity(spec, c)
    noise0, noise1 = rng.standard_normal(n), rng.standard_normal(n)
    y0 = _outcome_mean(spec, c, 0) + spec.noise_sd * noise0
    y1 = _outcome_mean(spec, c, 1) + spec.noise_sd * noise1
    if spec.binary_outcome:
        y0, y1 = (y0 > 0).astype(float), (y1 > 0).astype(float)
    return {"c": c, "g": g, "y0": y0, "y1": y1}


def generate_semisynthetic(
    spec: ConfounderSpec, n: int, seed=0
) -> tuple[TokenSequenceDataset, GroundTruth]:
    """Draw ``n`` documents, treatments and outcomes from ``spec``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    fillers = spec.filler_vocab()
    lo, hi = spec.doc_length_range
    lengths = rng.integers(lo, hi + 1, size=n)
    has_kw = rng.random(n) < spec.keyword_inclusion_prob
    docs: list[list[str]] = []
    for i in range(n):
        L = int(lengths[i])
        if fillers:
            toks = [fillers[j] for j in rng.integers(0, len(fillers), size=L)]
        else:
            toks = [""] * L
        if has_kw[i]:
            k_max = min(spec.max_keywords_per_doc, len(spec.keywords), L)
            k = int(rng.integers(1, k_max + 1))
            kws = rng.choice(len(spec.keywords), size=k, replace=False)
            pos = rng.choice(L, size=k, replace=False)
            for p, kw in zip(pos, kws):
                toks[p] = spec.keywords[kw]
        docs.append(toks)
    kwset = set(spec.keywords)
    c = np.array([bool(kwset.intersection(toks)) for toks in docs], dtype=float)

    vocab = sorted(set(fillers) | kwset)
    table = {tok: embed_token(tok, spec.embedding_dim, spec.embedding_seed) for tok in vocab}
    l_max = hi
    emb = np.zeros((n, l_max, spec.embedding_dim), dtype=np.float32)
    for i, toks in enumerate(docs):
        emb[i, : len(toks)] = np.stack([table[tok] for tok in toks])

    t, y = _sample_assignments(spec, c, rng)
    gt = _ground_truth(spec, c)
    if gt.warnings:
        warnings.warn(gt.warnings[0], RuntimeWarning, stacklevel=2)
    ds = TokenSequenceDataset(emb, lengths, t, y, docs)
    return ds, gt


def resample_assignments(
    ds: TokenSequenceDataset, gt: GroundTruth, spec: ConfounderSpec, seed
) -> TokenSequenceDataset:
    """Fresh treatments and outcomes for the same documents."""
    rng = np.random.default_rng(seed)
    t, y = _sample_assignments(spec, gt.confounder_indicator.astype(float), rng)
    return ds.with_assignments(t, y)


# -- on-disk format ------------------------------------------------------------

def save_dataset(ds: TokenSequenceDataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "n": ds.n,
        "d": ds.d,
        "l_max": ds.l_max,
        "has_tokens": ds.tokens is not None,
        "version": FORMAT_VERSION,
    }
    (path / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
    (path / "embeddings.f32").write_bytes(ds.embeddings.astype("<f4").tobytes())
    (path / "lengths.u32").write_bytes(ds.lengths.astype("<u4").tobytes())
    (path / "treatment.u8").write_bytes(ds.treatment.astype("u1").tobytes())
    (path / "outcome.f32").write_bytes(ds.outcome.astype("<f4").tobytes())
    if ds.tokens is not None:
        with open(path / "tokens.jsonl", "w") as fh:
            for toks in ds.tokens:
                fh.write(json.dumps(toks) + "\n")


def _read_array(path: Path, name: str, dtype: str, count: int) -> np.ndarray:
    f = path / name
    if not f.exists():
        raise DatasetFormatError(name, "file missing")
    raw = f.read_bytes()
    expected = count * np.dtype(dtype).itemsize
    if len(raw) < expected:
        raise DatasetFormatError(name, f"truncated payload: {len(raw)} bytes, expected {expected}")
    if len(raw) > expected:
        raise DatasetFormatError(name, f"oversized payload: {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype=dtype).copy()


def load_dataset(path) -> TokenSequenceDataset:
    path = Path(path)
    try:
        meta = json.loads((path / "meta.json").read_text())
    except FileNotFoundError:
        raise DatasetFormatError("meta.json", "file missing") from None
    except json.JSONDecodeError as exc:
        raise DatasetFormatError("meta.json", f"invalid JSON ({exc})") from None
    for key in ("n", "d", "l_max", "has_tokens", "version"):
        if key not in meta:
            raise DatasetFormatError("meta.json", f"missing key {key!r}")
    if meta["version"] != FORMAT_VERSION:
        raise DatasetFormatError("meta.json", f"unsupported version {meta['version']}")
    n, d, l_max = int(meta["n"]), int(meta["d"]), int(meta["l_max"])
    emb = _read_array(path, "embeddings.f32", "<f4", n * l_max * d).reshape(n, l_max, d)
    lengths = _read_array(path, "lengths.u32", "<u4", n)
    treatment = _read_array(path, "treatment.u8", "u1", n)
    outcome = _read_array(path, "outcome.f32", "<f4", n)
    if np.isnan(emb).any():
        raise DatasetFormatError("embeddings", "NaN entries")
    if np.isnan(outcome).any():
        raise DatasetFormatError("outcome", "NaN entries")
    tokens = None
    if meta["has_tokens"]:
        f = path / "tokens.jsonl"
        if not f.exists():
            raise DatasetFormatError("tokens.jsonl", "file missing but has_tokens is true")
        tokens = [json.loads(line) for line in f.read_text().splitlines() if line]
    return TokenSequenceDataset(emb, lengths, treatment, outcome, tokens)


def save_ground_truth(gt: GroundTruth, spec: ConfounderSpec, path) -> None:
    """Companion ``truth.json`` so a saved dataset can be resampled later."""
    payload = {
        "spec": spec.to_dict(),
        "tau_true": gt.tau_true,
        "confounder_indicator": gt.confounder_indicator.astype(int).tolist(),
        "true_propensity": gt.true_propensity.tolist(),
        "true_q0": gt.true_q0.tolist(),
        "true_q1": gt.true_q1.tolist(),
        "warnings": list(gt.warnings),
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")


def load_ground_truth(path) -> tuple[GroundTruth, ConfounderSpec]:
    payload = json.loads(Path(path).read_text())
    spec = ConfounderSpec.from_dict(payload["spec"])
    gt = GroundTruth(
        np.asarray(payload["true_propensity"]),
        np.asarray(payload["true_q0"]),
        np.asarray(payload["true_q1"]),
        np.asarray(payload["confounder_indicator"], dtype=np.uint8),
        float(payload["tau_true"]),
        tuple(payload.get("warnings", ())),
    )
    return gt, spec


def train_val_test_split(n: int, ratios=(25, 6, 6), seed=0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Random index split in the given proportions (default 25:6:6)."""
    ratios = np.asarray(ratios, dtype=float)
    if ratios.shape != (3,) or np.any(ratios <= 0):
        raise ValueError("split ratios must be three positive numbers")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * ratios[0] / ratios.sum()))
    n_val = int(round(n * ratios[1] / ratios.sum()))
    return perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]


__all__ = [
    "ConfounderSpec",
    "DatasetFormatError",
    "GroundTruth",
    "TokenSequenceDataset",
    "embed_token",
    "generate_semisynthetic",
    "load_dataset",
    "load_ground_truth",
    "resample_assignments",
    "sample_population",
    "save_dataset",
    "save_ground_truth",
    "train_val_test_split",
    "true_ate",
]
