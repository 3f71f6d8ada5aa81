"""Triplet-loss training of the affine embedding head.

The head sits between two l2-normalizations.  Training only sees the pooled,
normalized CNN activations, so a sample is just ``(class_id, pooled_input)``.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .descriptor import AffineHead, ZERO_NORM, l2_normalize, pool, read_desc, read_fmap
from .errors import (
    DimensionMismatch,
    FormatError,
    InsufficientClasses,
    InsufficientPositives,
    ShapeMismatch,
    ZeroVector,
)

log = logging.getLogger(__name__)

MARGIN_BOUND = 4.0


@dataclass(frozen=True)
class TrainingSample:
    class_id: str
    pooled_input: np.ndarray


class Triplet(NamedTuple):
    """Indices of query, positive and negative samples."""

    q: int
    p: int
    n: int


@dataclass
class TrainConfig:
    margin: float = 0.6
    learning_rate: float = 1e-5
    epochs: int = 10
    batch_size: int = 64
    mining: str = "random"
    seed: int = 0
    # (first_epoch, rate) pairs, epochs counted from 1; overrides learning_rate
    lr_schedule: list = field(default_factory=list)
    out_dim: int | None = None
    batches_per_epoch: int | None = None
    # documented for completeness: there is no backbone to fine-tune here
    backbone_lr_schedule: tuple = ((1, 1e-7), (11, 1e-8), (16, 1e-9))

    def __post_init__(self):
        if not -MARGIN_BOUND <= self.margin <= MARGIN_BOUND:
            raise ValueError(f"margin must lie in [-4, 4], got {self.margin}")
        if self.learning_rate <= 0 or any(r <= 0 for _, r in self.lr_schedule):
            raise ValueError("learning rates must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.mining not in ("random", "batch_hard"):
            raise ValueError(f"unknown mining strategy {self.mining!r}")

    def lr_at(self, epoch: int) -> float:
        rate = self.learning_rate
        for start, r in sorted(self.lr_schedule):
            if epoch >= start:
                rate = r
        return rate


# -- loss ---------------------------------------------------------------------

def _hinge_argument(fq, fp, fn, m) -> float:
    fq, fp, fn = (np.asarray(v, dtype=np.float64) for v in (fq, fp, fn))
    if not fq.shape == fp.shape == fn.shape:
        raise DimensionMismatch("triplet descriptors differ in length")
    return m + float(np.sum((fq - fp) ** 2)) - float(np.sum((fq - fn) ** 2))


def triplet_loss(fq, fp, fn, m: float = 0.6) -> float:
    return max(0.0, _hinge_argument(fq, fp, fn, m))


def is_active(fq, fp, fn, m: float = 0.6) -> bool:
    """True when the triplet still produces gradient (zero hinge counts as inactive)."""
    return _hinge_argument(fq, fp, fn, m) > 0.0


def _embed(head: AffineHead, x: np.ndarray):
    z = x @ head.weights.T + head.bias
    r = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(r < ZERO_NORM):
        raise ZeroVector("affine output has (near) zero norm")
    return z / r, r


def batch_loss_and_grad(head: AffineHead, xq, xp, xn, m: float):
    """Mean triplet loss over rows of ``xq, xp, xn`` and its gradient.

    Returns ``(mean_loss, active_fraction, grad_w, grad_b)``.
    """
    xq, xp, xn = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (xq, xp, xn))
    if not xq.shape == xp.shape == xn.shape or xq.shape[1] != head.in_dim:
        raise DimensionMismatch("triplet inputs do not match the head input dimension")
    t = xq.shape[0]
    fq, rq = _embed(head, xq)
    fp, rp = _embed(head, xp)
    fn, rn = _embed(head, xn)
    arg = m + np.sum((fq - fp) ** 2, axis=1) - np.sum((fq - fn) ** 2, axis=1)
    active = arg > 0.0
    loss = float(np.sum(np.where(active, arg, 0.0))) / t

    w = (active / t)[:, None]
    grads_f = (
        (2.0 * (fn - fp) * w, fq, rq, xq),
        (2.0 * (fp - fq) * w, fp, rp, xp),
        (2.0 * (fq - fn) * w, fn, rn, xn),
    )
    grad_w = np.zeros_like(head.weights)
    grad_b = np.zeros_like(head.bias)
    for gf, f, r, x in grads_f:
        # back through z -> z / |z|
        gz = (gf - f * np.sum(f * gf, axis=1, keepdims=True)) / r
        grad_w += gz.T @ x
        grad_b += gz.sum(axis=0)
    return loss, float(active.mean()), grad_w, grad_b


def loss_and_grad(head: AffineHead, xq, xp, xn, m: float = 0.6):
    """Loss of one triplet of pooled inputs with gradients w.r.t. weights and bias."""
    loss, _, gw, gb = batch_loss_and_grad(head, xq, xp, xn, m)
    return loss, (gw, gb)


# -- triplet selection ----------------------------------------------------------

def _class_groups(labels) -> dict:
    groups: dict[str, list[int]] = {}
    for i, c in enumerate(labels):
        groups.setdefault(c, []).append(i)
    return groups


def sample_triplets(samples, batch_size: int, rng: np.random.Generator) -> list[Triplet]:
    """Random triplets; negatives are drawn uniformly from all other classes."""
    labels = [s.class_id for s in samples]
    groups = _class_groups(labels)
    if len(groups) < 2:
        raise InsufficientClasses("triplet sampling needs at least two classes")
    anchors = [i for i, c in enumerate(labels) if len(groups[c]) >= 2]
    if not anchors:
        raise InsufficientPositives("no class has two or more samples")
    outside = {
        c: np.array([i for i, other in enumerate(labels) if other != c]) for c in groups
    }
    out = []
    for _ in range(batch_size):
        q = anchors[rng.integers(len(anchors))]
        same = groups[labels[q]]
        j = int(rng.integers(len(same) - 1))
        p = same[j if j < same.index(q) else j + 1]
        others = outside[labels[q]]
        n = int(others[rng.integers(len(others))])
        out.append(Triplet(q, p, n))
    return out


def batch_hard_mine(samples, head: AffineHead) -> list[Triplet]:
    """Hardest positive and hardest negative per anchor, by exhaustive search."""
    labels = np.array([s.class_id for s in samples], dtype=object)
    if len(set(labels.tolist())) < 2:
        raise InsufficientClasses("batch-hard mining needs at least two classes")
    x = np.stack([s.pooled_input for s in samples])
    f, _ = _embed(head, x)
    dist = np.sum((f[:, None, :] - f[None, :, :]) ** 2, axis=2)
    same = labels[:, None] == labels[None, :]
    out = []
    for a in range(len(samples)):
        pos = same[a].copy()
        pos[a] = False
        if not pos.any():
            continue
        p = int(np.argmax(np.where(pos, dist[a], -np.inf)))
        n = int(np.argmin(np.where(same[a], np.inf, dist[a])))
        out.append(Triplet(a, p, n))
    return out


# -- optimizer ------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params, grads, lr: float):
    """One bias-corrected Adam update; returns new parameter arrays."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("parameter, gradient and state counts differ")
    for p, g, mb in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != mb.shape:
            raise ShapeMismatch(f"shape mismatch {p.shape} / {g.shape} / {mb.shape}")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return out


# -- training loop ----------------------------------------------------------------

def init_head(in_dim: int, out_dim: int | None, rng: np.random.Generator) -> AffineHead:
    out_dim = in_dim if out_dim is None else out_dim
    if out_dim == in_dim:
        return AffineHead.identity(in_dim)
    a = rng.standard_normal((max(in_dim, out_dim), min(in_dim, out_dim)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    w = q if out_dim > in_dim else q.T
    return AffineHead(w[:out_dim, :in_dim], np.zeros(out_dim))


def train_head(samples, config: TrainConfig, head: AffineHead | None = None):
    """Optimize an affine head with triplet loss and Adam.

    Returns ``(head, log)`` where ``log`` holds one dict per epoch with the
    mean loss and fraction of active triplets seen during that epoch.
    """
    samples = list(samples)
    if len({s.class_id for s in samples}) < 2:
        raise InsufficientClasses("training needs at least two classes")
    rng = np.random.default_rng(config.seed)
    x = np.stack([np.asarray(s.pooled_input, dtype=np.float64) for s in samples])
    if head is None:
        head = init_head(x.shape[1], config.out_dim, rng)
    state = AdamState.like([head.weights, head.bias])
    n_batches = config.batches_per_epoch or max(1, math.ceil(len(samples) / config.batch_size))

    history = []
    for epoch in range(1, config.epochs + 1):
        lr = config.lr_at(epoch)
        losses, fractions = [], []
        order = rng.permutation(len(samples))
        for b in range(n_batches):
            if config.mining == "batch_hard":
                start = (b * config.batch_size) % len(samples)
                idx = np.take(order, range(start, start + config.batch_size), mode="wrap")
                idx = np.unique(idx)
                batch = [samples[i] for i in idx]
                try:
                    trips = [Triplet(idx[t.q], idx[t.p], idx[t.n]) for t in batch_hard_mine(batch, head)]
                except InsufficientClasses:
                    trips = []
                if not trips:
                    continue
            else:
                trips = sample_triplets(samples, config.batch_size, rng)
            q, p, n = (np.array(col) for col in zip(*trips))
            loss, frac, gw, gb = batch_loss_and_grad(head, x[q], x[p], x[n], config.margin)
            w, bias = adam_step(state, [head.weights, head.bias], [gw, gb], lr)
            head = AffineHead(w, bias)
            losses.append(loss)
            fractions.append(frac)
        entry = {
            "epoch": epoch,
            "mean_loss": float(np.mean(losses)) if losses else 0.0,
            "active_fraction": float(np.mean(fractions)) if fractions else 0.0,
            "lr": lr,
        }
        log.debug("epoch %d loss %.6f active %.3f", epoch, entry["mean_loss"], entry["active_fraction"])
        history.append(entry)
    return head, history


# -- files ------------------------------------------------------------------------

_HEAD = struct.Struct("<4sHII")


def write_head(path, head: AffineHead) -> None:
    with open(path, "wb") as f:
        f.write(_HEAD.pack(b"AHED", 1, head.in_dim, head.out_dim))
        f.write(head.weights.astype("<f4").tobytes())
        f.write(head.bias.astype("<f4").tobytes())


def read_head(path) -> AffineHead:
    buf = Path(path).read_bytes()
    if len(buf) < _HEAD.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, in_dim, out_dim = _HEAD.unpack_from(buf)
    if magic != b"AHED" or version != 1:
        raise FormatError(f"{path}: not a version-1 head file")
    if len(buf) != _HEAD.size + 4 * out_dim * (in_dim + 1):
        raise FormatError(f"{path}: payload size mismatch")
    vals = np.frombuffer(buf, dtype="<f4", offset=_HEAD.size).astype(np.float64)
    return AffineHead(vals[: out_dim * in_dim].reshape(out_dim, in_dim), vals[out_dim * in_dim:])


def load_training_manifest(path, levels: int = 3) -> list[TrainingSample]:
    """Read a JSONL manifest of ``{"class", "input", "pooling"}`` records."""
    path = Path(path)
    samples = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        src = path.parent / rec["input"]
        if src.suffix == ".desc":
            v = read_desc(src)
        else:
            v = pool(read_fmap(src), rec.get("pooling", "max"), levels)
        samples.append(TrainingSample(rec["class"], l2_normalize(v)))
    return samples


def write_training_log(path, history) -> None:
    with open(path, "w") as f:
        for entry in history:
            f.write(json.dumps(entry) + "\n")
