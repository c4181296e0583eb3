"""Small feedforward networks, losses, Adam, checkpoints and a gradient checker."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var

PROB_CLAMP = 1e-6
OUTPUT_TRANSFORMS = ("identity", "sigmoid", "relu")


@dataclass
class FeedforwardNet:
    """Affine layers with ReLU between them and a configurable output transform."""

    widths: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output_transform: str = "identity"

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def parameter_names(self) -> list[str]:
        names = []
        for i in range(len(self.weights)):
            names.extend((f"W{i}", f"b{i}"))
        return names

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "FeedforwardNet":
        return FeedforwardNet(
            list(self.widths),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.output_transform,
        )

    def load_state(self, other: "FeedforwardNet") -> None:
        """Copy parameter values from ``other`` in place."""
        for dst, src in zip(self.parameters(), other.parameters()):
            dst[...] = src


def init_network(widths: Sequence[int], output_transform: str = "identity", seed=0) -> FeedforwardNet:
    """He-initialised network: weights ~ N(0, 2/fan_in), zero biases."""
    widths = [int(w) for w in widths]
    if len(widths) < 2:
        raise ValueError("a network needs at least an input and an output width")
    if min(widths) < 1:
        raise ValueError(f"layer widths must be positive, got {widths}")
    if output_transform not in OUTPUT_TRANSFORMS:
        raise ValueError(f"unknown output transform {output_transform!r}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return FeedforwardNet(widths, weights, biases, output_transform)


def zero_network(widths: Sequence[int], output_transform: str = "identity") -> FeedforwardNet:
    net = init_network(widths, output_transform, seed=0)
    for p in net.parameters():
        p[...] = 0.0
    return net


def forward(net: FeedforwardNet, x, tape: Tape | None = None) -> Var:
    """Evaluate ``net`` on a row or a batch of rows, recording onto ``tape``.

    Sigmoid outputs are clamped to ``[1e-6, 1 - 1e-6]``.
    """
    if tape is None:
        tape = x.tape if isinstance(x, Var) else Tape()
    if not isinstance(x, Var):
        x = tape.constant(x)
    single = x.ndim == 1
    if single:
        x = x.reshape(1, -1)
    if x.shape[-1] != net.widths[0]:
        raise ValueError(f"input width {x.shape[-1]} does not match network input {net.widths[0]}")
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ tape.param(w, f"W{i}") + tape.param(b, f"b{i}")
        if i < last:
            h = ad.relu(h)
    if net.output_transform == "sigmoid":
        h = ad.clip(ad.sigmoid(h), PROB_CLAMP, 1.0 - PROB_CLAMP)
    elif net.output_transform == "relu":
        h = ad.relu(h)
    return h.reshape(-1) if single else h


def backward(tape: Tape, loss: Var) -> dict[int, np.ndarray]:
    """Reverse sweep; see :meth:`Tape.backward`."""
    return tape.backward(loss)


def cross_entropy(p, label):
    """Binary cross-entropy of probability ``p`` against ``label`` (elementwise)."""
    p = ad.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(label * ad.log(p) + (1.0 - label) * ad.log(1.0 - p))


def squared_error(pred, target):
    return (pred - target) ** 2


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **hyper)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, names=None) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimiser state disagree in length")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[i].shape}")
        if not np.all(np.isfinite(g)):
            name = names[i] if names is not None else f"param[{i}]"
            raise FloatingPointError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- checkpoints -------------------------------------------------------------

_MAGIC = b"CATRNET1"


def save_checkpoint(nets: dict[str, FeedforwardNet], path) -> None:
    """Write networks as ``MAGIC | u32 header length | JSON header | f32 payload``.

    Parameters are stored in layer order (W0, b0, W1, b1, ...) per network,
    networks in header order. Values are rounded to float32.
    """
    header = {
        "version": 1,
        "nets": [
            {"name": name, "widths": net.widths, "output_transform": net.output_transform}
            for name, net in nets.items()
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(
        np.ascontiguousarray(p, dtype="<f4").tobytes() for net in nets.values() for p in net.parameters()
    )
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path) -> dict[str, FeedforwardNet]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a network checkpoint")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + hlen])
    offset = 12 + hlen
    nets = {}
    for spec in header["nets"]:
        net = zero_network(spec["widths"], spec["output_transform"])
        for p in net.parameters():
            nbytes = p.size * 4
            chunk = raw[offset : offset + nbytes]
            if len(chunk) != nbytes:
                raise ValueError(f"{path}: truncated parameter payload for net {spec['name']!r}")
            p[...] = np.frombuffer(chunk, dtype="<f4").reshape(p.shape)
            offset += nbytes
        nets[spec["name"]] = net
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return nets


# -- finite differences ------------------------------------------------------

def finite_difference_check(
    loss_fn: Callable[[Tape], Var],
    params: Sequence[np.ndarray],
    step: float = 1e-4,
) -> float:
    """Relative error between tape gradients and central differences.

    ``loss_fn`` must build the loss on the given tape using ``tape.param`` for
    every array in ``params``. Returns ``||g_ad - g_fd|| / max(||g_ad||, ||g_fd||)``
    over all parameters jointly.
    """
    tape = Tape()
    loss = loss_fn(tape)
    tape.backward(loss)
    analytic = np.concatenate([tape.grad(p).ravel() for p in params])
    numeric = []
    for p in params:
        flat = p.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            up = float(loss_fn(Tape()).value)
            flat[k] = orig - step
            down = float(loss_fn(Tape()).value)
            flat[k] = orig
            numeric.append((up - down) / (2 * step))
    numeric = np.asarray(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)
