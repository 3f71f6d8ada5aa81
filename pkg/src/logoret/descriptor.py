"""Pooling, normalization, affine projection and PCA whitening.

Feature maps are ``(height, width, channels)`` float arrays, the layout of a
CNN's last convolutional layer.  Descriptors are 1-D float64 arrays.  All math
runs in float64; the on-disk formats store float32.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateCovariance,
    DimensionMismatch,
    FormatError,
    InsufficientData,
    ZeroVector,
)

ZERO_NORM = 1e-12
DEFAULT_DIM = 512
DEFAULT_WHITEN_EPS = 1e-10
POOLINGS = ("max", "avg", "rmac")


def as_feature_map(fm) -> np.ndarray:
    fm = np.asarray(fm, dtype=np.float64)
    if fm.ndim != 3 or min(fm.shape) < 1:
        raise DimensionMismatch(f"feature map must be (height, width, channels), got {fm.shape}")
    if not np.all(np.isfinite(fm)):
        raise ValueError("feature map contains non-finite values")
    return fm


@dataclass(frozen=True)
class AffineHead:
    """Fully-connected layer ``W @ v + b`` placed between the two normalizations."""

    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise DimensionMismatch(f"inconsistent head shapes {w.shape} / {b.shape}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("head parameters must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "AffineHead":
        return cls(np.eye(dim), np.zeros(dim))


@dataclass(frozen=True)
class WhitenTransform:
    mean: np.ndarray  # (d,)
    projection: np.ndarray  # (d_out, d)
    eps: float = DEFAULT_WHITEN_EPS

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.projection.ndim != 2 or self.projection.shape[1] != self.mean.shape[0]:
            raise DimensionMismatch("projection columns must match mean length")


# -- pooling -----------------------------------------------------------------

def max_pool_global(fm) -> np.ndarray:
    fm = as_feature_map(fm)
    return fm.max(axis=(0, 1))


def avg_pool_global(fm) -> np.ndarray:
    fm = as_feature_map(fm)
    return fm.mean(axis=(0, 1))


def rmac_regions(height: int, width: int, levels: int, overlap: float = 0.4):
    """Square R-MAC regions as ``(y0, x0, side)`` tuples, coarsest level first.

    Level ``l`` uses squares of side ``floor(2 * min(H, W) / (l + 1))`` laid on
    an ``l x (l + excess)`` grid along the longer axis, where ``excess`` is the
    number of extra steps that brings consecutive-region overlap closest to
    ``overlap``.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    short, long_ = min(height, width), max(height, width)
    excess = 0
    if height != width:
        steps = np.arange(2, 8)
        b = (long_ - short) / (steps - 1)
        excess = int(np.argmin(np.abs((short**2 - short * b) / short**2 - overlap))) + 1
    w_extra = excess if width > height else 0
    h_extra = excess if height > width else 0

    regions = []
    for level in range(1, levels + 1):
        side = max(1, int(math.floor(2 * short / (level + 1))))
        half = math.floor(side / 2 - 1)

        def starts(extent, extra):
            n = level + extra
            step = (extent - side) / (n - 1) if n > 1 else 0.0
            return sorted({int(math.floor(half + i * step) - half) for i in range(n)})

        for y0 in starts(height, h_extra):
            for x0 in starts(width, w_extra):
                regions.append((y0, x0, side))
    return regions


def rmac_pool(fm, levels: int = 3) -> np.ndarray:
    fm = as_feature_map(fm)
    h, w, c = fm.shape
    total = np.zeros(c)
    for y0, x0, side in rmac_regions(h, w, levels):
        v = fm[y0:y0 + side, x0:x0 + side].max(axis=(0, 1))
        n = np.linalg.norm(v)
        if n >= ZERO_NORM:
            total += v / n
    return l2_normalize(total)


def pool(fm, mode: str = "max", levels: int = 3) -> np.ndarray:
    if mode == "max":
        return max_pool_global(fm)
    if mode == "avg":
        return avg_pool_global(fm)
    if mode == "rmac":
        return rmac_pool(fm, levels)
    raise ValueError(f"unknown pooling mode {mode!r}")


# -- normalization and projection ---------------------------------------------

def l2_normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n < ZERO_NORM:
        raise ZeroVector("cannot normalize a (near) zero vector")
    return v / n


def apply_affine(head: AffineHead, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (head.in_dim,):
        raise DimensionMismatch(f"head expects {head.in_dim} inputs, got {v.shape}")
    return head.weights @ v + head.bias


def featurize(fm, head: AffineHead, pooling: str = "max", levels: int = 3) -> np.ndarray:
    """Pool, normalize, project and normalize again into a unit descriptor."""
    return l2_normalize(apply_affine(head, l2_normalize(pool(fm, pooling, levels))))


# -- whitening ----------------------------------------------------------------

def fit_whitening(samples, eps: float = DEFAULT_WHITEN_EPS, dim: int | None = None) -> WhitenTransform:
    """Fit PCA whitening on a stack of descriptors.

    Eigenvalues below ``eps`` are dropped; ``dim`` optionally truncates the
    output to the leading components.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InsufficientData("whitening needs at least two samples")
    mean = x.mean(axis=0)
    cov = np.cov(x, rowvar=False, ddof=1).reshape(x.shape[1], x.shape[1])
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    keep = evals >= eps
    if not keep.any():
        raise DegenerateCovariance("sample covariance has no eigenvalue above eps")
    evals, evecs = evals[keep], evecs[:, keep]
    if dim is not None:
        evals, evecs = evals[:dim], evecs[:, :dim]
    projection = evecs.T / np.sqrt(evals + eps)[:, None]
    return WhitenTransform(mean, projection, eps)


def apply_whitening(t: WhitenTransform, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != t.mean.shape[0]:
        raise DimensionMismatch(f"whitening expects dim {t.mean.shape[0]}, got {v.shape[-1]}")
    return (v - t.mean) @ t.projection.T


# -- binary formats -----------------------------------------------------------

_FMAP = struct.Struct("<4sHIII")
_DESC = struct.Struct("<4sHI")
_WHTN = struct.Struct("<4sHIId")


def _check_header(buf: bytes, st: struct.Struct, magic: bytes, path) -> tuple:
    if len(buf) < st.size:
        raise FormatError(f"{path}: truncated header")
    fields = st.unpack_from(buf)
    if fields[0] != magic:
        raise FormatError(f"{path}: bad magic {fields[0]!r}")
    if fields[1] != 1:
        raise FormatError(f"{path}: unsupported version {fields[1]}")
    return fields


def _f32(buf: bytes, offset: int, count: int, path) -> np.ndarray:
    if len(buf) != offset + 4 * count:
        raise FormatError(f"{path}: payload size mismatch")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=offset).astype(np.float64)


def write_fmap(path, fm) -> None:
    fm = as_feature_map(fm)
    h, w, c = fm.shape
    with open(path, "wb") as f:
        f.write(_FMAP.pack(b"FMAP", 1, w, h, c))
        f.write(fm.astype("<f4").tobytes())


def read_fmap(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    _, _, w, h, c = _check_header(buf, _FMAP, b"FMAP", path)
    return _f32(buf, _FMAP.size, w * h * c, path).reshape(h, w, c)


def write_desc(path, v) -> None:
    v = np.asarray(v, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(_DESC.pack(b"DESC", 1, v.shape[0]))
        f.write(v.astype("<f4").tobytes())


def read_desc(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    _, _, dim = _check_header(buf, _DESC, b"DESC", path)
    return _f32(buf, _DESC.size, dim, path)


def write_whitening(path, t: WhitenTransform) -> None:
    """Store a whitening transform (float64, so the fitted covariance survives)."""
    d_out, d = t.projection.shape
    with open(path, "wb") as f:
        f.write(_WHTN.pack(b"WHTN", 1, d, d_out, t.eps))
        f.write(t.mean.astype("<f8").tobytes())
        f.write(t.projection.astype("<f8").tobytes())


def read_whitening(path) -> WhitenTransform:
    buf = Path(path).read_bytes()
    _, _, d, d_out, eps = _check_header(buf, _WHTN, b"WHTN", path)
    if len(buf) != _WHTN.size + 8 * (d + d * d_out):
        raise FormatError(f"{path}: payload size mismatch")
    vals = np.frombuffer(buf, dtype="<f8", offset=_WHTN.size).astype(np.float64)
    return WhitenTransform(vals[:d].copy(), vals[d:].reshape(d_out, d).copy(), eps)
