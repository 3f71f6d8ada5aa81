"""Exact cosine k-NN over a dynamically updatable table of class prototypes.

Descriptors live in one contiguous float32 matrix so a query is a single
matrix-vector product.  Every mutation builds a new immutable snapshot and
swaps it in under a writer lock; readers grab the current snapshot reference
and never see a half-applied edit.
"""
from __future__ import annotations

import json
import struct
import threading
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import CorruptPayload, DimensionMismatch, FormatError, NotNormalized

NORM_TOLERANCE = 1e-4
# float32 scores are within this of the float64 rescoring for unit vectors
_F32_SLACK = 1e-4


@dataclass(frozen=True)
class Prototype:
    class_id: str
    variant_id: str
    descriptor: np.ndarray
    metadata: dict = field(default_factory=dict)


class QueryResult(NamedTuple):
    class_id: str
    variant_id: str
    similarity: float


@dataclass(frozen=True)
class _Snapshot:
    dim: int | None
    keys: tuple  # ((class_id, variant_id), ...) in row order
    matrix: np.ndarray  # (n, dim) float32, read-only
    norms: np.ndarray  # (n,) float64 norms of the stored float32 rows
    metadata: tuple

    @classmethod
    def empty(cls, dim=None) -> "_Snapshot":
        d = dim or 0
        return cls(dim, (), np.zeros((0, d), np.float32), np.zeros(0), ())


def _check_unit(v: np.ndarray, what: str) -> None:
    n = float(np.linalg.norm(v))
    if abs(n - 1.0) > NORM_TOLERANCE:
        raise NotNormalized(f"{what} has norm {n:.6f}, expected 1")


class PrototypeIndex:
    """Table of class-name/descriptor pairs with exhaustive cosine search."""

    def __init__(self, dim: int | None = None):
        self._snap = _Snapshot.empty(dim)
        self._write_lock = threading.Lock()

    # -- inspection --------------------------------------------------------
    def __len__(self) -> int:
        return len(self._snap.keys)

    @property
    def dim(self) -> int | None:
        return self._snap.dim

    def classes(self) -> list[str]:
        return sorted({c for c, _ in self._snap.keys})

    def prototypes(self) -> list[Prototype]:
        s = self._snap
        return [
            Prototype(c, v, s.matrix[i].astype(np.float64), dict(s.metadata[i]))
            for i, (c, v) in enumerate(s.keys)
        ]

    def snapshot(self) -> "PrototypeIndex":
        """Independent copy sharing the current immutable state."""
        other = PrototypeIndex()
        other._snap = self._snap
        return other

    # -- mutation ----------------------------------------------------------
    def add(self, prototype: Prototype) -> None:
        self.add_many([prototype])

    def add_many(self, prototypes) -> None:
        prototypes = list(prototypes)
        if not prototypes:
            return
        with self._write_lock:
            s = self._snap
            dim = s.dim
            rows = []
            for p in prototypes:
                v = np.asarray(p.descriptor, dtype=np.float64)
                if v.ndim != 1:
                    raise DimensionMismatch("descriptor must be one-dimensional")
                if dim is None:
                    dim = v.shape[0]
                if v.shape[0] != dim:
                    raise DimensionMismatch(f"index dim is {dim}, descriptor has {v.shape[0]}")
                _check_unit(v, f"descriptor for {p.class_id}/{p.variant_id}")
                rows.append(((p.class_id, p.variant_id), v.astype(np.float32), dict(p.metadata)))

            position = {k: i for i, k in enumerate(s.keys)}
            keys, meta = list(s.keys), list(s.metadata)
            matrix = s.matrix if s.matrix.shape[1] == dim else np.zeros((0, dim), np.float32)
            matrix = matrix.copy()
            appended = []
            for key, vec, md in rows:
                if key in position:
                    matrix[position[key]] = vec
                    meta[position[key]] = md
                else:
                    position[key] = len(keys) + len(appended)
                    appended.append((key, vec, md))
            if appended:
                matrix = np.vstack([matrix, np.stack([a[1] for a in appended])])
                keys.extend(a[0] for a in appended)
                meta.extend(a[2] for a in appended)
            self._publish(dim, keys, matrix, meta)

    def remove(self, class_id: str, variant_id: str | None = None) -> int:
        with self._write_lock:
            s = self._snap
            keep = [
                i for i, (c, v) in enumerate(s.keys)
                if not (c == class_id and (variant_id is None or v == variant_id))
            ]
            removed = len(s.keys) - len(keep)
            if removed:
                self._publish(
                    s.dim,
                    [s.keys[i] for i in keep],
                    s.matrix[keep],
                    [s.metadata[i] for i in keep],
                )
            return removed

    def _publish(self, dim, keys, matrix, meta) -> None:
        matrix = np.ascontiguousarray(matrix, dtype=np.float32)
        matrix.flags.writeable = False
        norms = np.linalg.norm(matrix.astype(np.float64), axis=1)
        self._snap = _Snapshot(dim, tuple(keys), matrix, norms, tuple(meta))

    # -- search ------------------------------------------------------------
    def query(self, descriptor, k: int = 5, threshold: float = 0.0) -> list[QueryResult]:
        """Top-k prototypes by cosine similarity, filtered to ``>= threshold``.

        Ties are broken by ``(class_id, variant_id)``.  An empty index gives an
        empty list.
        """
        return self.query_many(np.asarray(descriptor, dtype=np.float64)[None, :], k, threshold)[0]

    def query_many(self, descriptors, k: int = 5, threshold: float = 0.0) -> list[list[QueryResult]]:
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.atleast_2d(np.asarray(descriptors, dtype=np.float64))
        s = self._snap
        n = len(s.keys)
        if n == 0:
            if s.dim is not None and q.shape[1] != s.dim:
                raise DimensionMismatch(f"index dim is {s.dim}, query has {q.shape[1]}")
            return [[] for _ in range(q.shape[0])]
        if q.shape[1] != s.dim:
            raise DimensionMismatch(f"index dim is {s.dim}, query has {q.shape[1]}")
        for row in q:
            _check_unit(row, "query descriptor")

        # coarse float32 pass, then exact float64 rescoring of the candidates
        coarse = q.astype(np.float32) @ s.matrix.T
        qnorm = np.linalg.norm(q, axis=1)
        out = []
        for i in range(q.shape[0]):
            scores = coarse[i]
            if n > k:
                kth = np.partition(scores, n - k)[n - k]
                cand = np.flatnonzero(scores >= kth - _F32_SLACK)
            else:
                cand = np.arange(n)
            # row-wise reduction so identical rows always score identically
            rows = s.matrix[cand].astype(np.float64)
            exact = (rows * q[i]).sum(axis=1) / (s.norms[cand] * qnorm[i])
            exact = np.clip(exact, -1.0, 1.0)
            ranked = sorted(
                (QueryResult(*s.keys[j], float(sim)) for j, sim in zip(cand, exact) if sim >= threshold),
                key=lambda r: (-r.similarity, r.class_id, r.variant_id),
            )
            out.append(ranked[:k])
        return out

    def ranked_classes(self, descriptor, threshold: float = -1.0) -> list[QueryResult]:
        """Best variant per class, every class ranked (variants do not use up ranks)."""
        best = {}
        for r in self.query(descriptor, k=max(1, len(self)), threshold=threshold):
            best.setdefault(r.class_id, r)
        return list(best.values())

    def query_topclass(self, descriptor, k: int = 1, threshold: float = 0.0):
        """``(class_id, similarity)`` of the best match, or None when filtered out."""
        hits = self.query(descriptor, k, threshold)
        if not hits:
            return None
        return hits[0].class_id, hits[0].similarity

    # -- persistence -------------------------------------------------------
    def to_bytes(self) -> bytes:
        s = self._snap
        order = sorted(range(len(s.keys)), key=lambda i: s.keys[i])
        dim = s.dim or 0
        parts = [struct.pack("<4sHIQ", b"PIDX", 1, dim, len(order))]
        parts.append(s.matrix[order].astype("<f4").tobytes() if order else b"")
        for i in order:
            c, v = s.keys[i]
            md = json.dumps(s.metadata[i], sort_keys=True, separators=(",", ":"))
            for text in (c, v, md):
                raw = text.encode("utf-8")
                parts.append(struct.pack("<I", len(raw)) + raw)
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body))

    def save(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "PrototypeIndex":
        header = struct.Struct("<4sHIQ")
        if len(buf) < header.size + 4:
            raise FormatError("index file truncated")
        magic, version, dim, count = header.unpack_from(buf)
        if magic != b"PIDX":
            raise FormatError(f"bad magic {magic!r}")
        if version != 1:
            raise FormatError(f"unsupported index version {version}")
        body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
        if zlib.crc32(body) != crc:
            raise CorruptPayload("index checksum mismatch")
        off = header.size
        nbytes = 4 * dim * count
        if len(body) < off + nbytes:
            raise FormatError("descriptor matrix truncated")
        matrix = np.frombuffer(body, dtype="<f4", count=dim * count, offset=off).reshape(count, dim)
        off += nbytes
        keys, meta = [], []
        try:
            for _ in range(count):
                fields = []
                for _ in range(3):
                    (length,) = struct.unpack_from("<I", body, off)
                    off += 4
                    if off + length > len(body):
                        raise FormatError("metadata block truncated")
                    fields.append(body[off:off + length].decode("utf-8"))
                    off += length
                keys.append((fields[0], fields[1]))
                meta.append(json.loads(fields[2]))
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"bad metadata block: {exc}") from exc
        if off != len(body):
            raise FormatError("trailing bytes after metadata block")
        index = cls(dim if (dim or count) else None)
        if count:
            index._publish(dim, keys, matrix.astype(np.float32), meta)
        return index

    @classmethod
    def load(cls, path) -> "PrototypeIndex":
        return cls.from_bytes(Path(path).read_bytes())
