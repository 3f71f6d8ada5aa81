"""Second-layer inference over externally produced region proposals.

Each proposal box is cropped, resized to a square, turned into a feature map
(by the deterministic toy featurizer or a precomputed ``.fmap`` file),
embedded with the trained head and classified against the prototype index.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .descriptor import AffineHead, WhitenTransform, apply_whitening, featurize, l2_normalize, read_fmap
from .errors import EmptyCrop, MissingFeatureMap, ZeroVector
from .evaluation import BBox, Detection, read_jsonl
from .index import PrototypeIndex
from .synth import _bilinear, load_rgba

log = logging.getLogger(__name__)

TOY_STATS = 12
TOY_SEED = 20170911


@dataclass(frozen=True)
class Proposal:
    image_id: str
    bbox: BBox
    objectness: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.objectness <= 1.0:
            raise ValueError(f"objectness {self.objectness} out of [0, 1]")


@dataclass
class PipelineConfig:
    crop_size: int = 224
    top_n: int | None = None
    threshold: float = 0.45
    pooling: str = "max"
    rmac_levels: int = 3
    whitening: bool = False
    toy_grid: int = 4
    toy_channels: int = 512

    def __post_init__(self):
        if self.crop_size < 1:
            raise ValueError("crop_size must be positive")
        if not -1.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [-1, 1]")
        if self.top_n is not None and self.top_n < 1:
            raise ValueError("top_n must be positive")


# -- cropping ----------------------------------------------------------------------

def crop_resize(image: np.ndarray, bbox: BBox, crop_size: int = 224) -> np.ndarray:
    """Crop the pixels covered by ``bbox`` and resize bilinearly to a square.

    The box is clipped to the image and widened to whole pixels; resizing uses
    half-pixel centers, so a crop that already has the target size is copied
    unchanged.
    """
    h, w = image.shape[:2]
    x0 = max(0, math.floor(bbox.x_min))
    y0 = max(0, math.floor(bbox.y_min))
    x1 = min(w, math.ceil(bbox.x_max))
    y1 = min(h, math.ceil(bbox.y_max))
    if x1 <= x0 or y1 <= y0:
        raise EmptyCrop(f"box {bbox.as_list()} does not intersect a {w}x{h} image")
    crop = image[y0:y1, x0:x1].astype(np.float64)
    ch, cw = crop.shape[:2]
    if (ch, cw) == (crop_size, crop_size):
        return image[y0:y1, x0:x1].copy()
    u = (np.arange(crop_size) + 0.5) * (cw / crop_size) - 0.5
    v = (np.arange(crop_size) + 0.5) * (ch / crop_size) - 0.5
    gu, gv = np.meshgrid(u, v)
    out = _bilinear(crop, gu, gv)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# -- toy featurizer ------------------------------------------------------------------

@lru_cache(maxsize=8)
def toy_projection(channels: int, seed: int = TOY_SEED) -> np.ndarray:
    m = np.random.default_rng(seed).standard_normal((channels, TOY_STATS)) / math.sqrt(TOY_STATS)
    m.flags.writeable = False
    return m


def _flatten_alpha(img: np.ndarray) -> np.ndarray:
    rgb = img[..., :3].astype(np.float64) / 255.0
    if img.shape[-1] == 4:
        a = img[..., 3:4].astype(np.float64) / 255.0
        rgb = a * rgb + (1.0 - a) * 0.5
    return rgb


def cell_statistics(crop: np.ndarray, grid: int) -> np.ndarray:
    """Per-cell statistics, shape (grid, grid, 12).

    Layout per cell: RGB means, RGB variances, RGB horizontal gradient energy,
    RGB vertical gradient energy, on values scaled to [0, 1].
    """
    rgb = _flatten_alpha(crop)
    h, w = rgb.shape[:2]
    ys = np.linspace(0, h, grid + 1).round().astype(int)
    xs = np.linspace(0, w, grid + 1).round().astype(int)
    out = np.zeros((grid, grid, TOY_STATS))
    for i in range(grid):
        for j in range(grid):
            cell = rgb[ys[i]:max(ys[i + 1], ys[i] + 1), xs[j]:max(xs[j + 1], xs[j] + 1)]
            dx = np.diff(cell, axis=1)
            dy = np.diff(cell, axis=0)
            out[i, j, 0:3] = cell.mean(axis=(0, 1))
            # shifting by one sample makes constant cells exactly zero
            out[i, j, 3:6] = (cell - cell[0, 0]).var(axis=(0, 1))
            out[i, j, 6:9] = (dx**2).mean(axis=(0, 1)) if dx.size else 0.0
            out[i, j, 9:12] = (dy**2).mean(axis=(0, 1)) if dy.size else 0.0
    return out


def toy_featurize(crop: np.ndarray, grid: int = 4, channels: int = 512) -> np.ndarray:
    """Deterministic stand-in for a CNN's last conv layer: (grid, grid, channels)."""
    if channels < TOY_STATS or grid < 1:
        raise ValueError(f"need channels >= {TOY_STATS} and grid >= 1")
    return cell_statistics(crop, grid) @ toy_projection(channels).T


# -- backends --------------------------------------------------------------------------

def _bbox_key(image_id: str, bbox: BBox):
    return image_id, tuple(round(c, 6) for c in bbox.as_list())


@dataclass
class FeaturizerBackend:
    kind: str = "toy"
    fmaps: dict = field(default_factory=dict)  # (image_id, rounded bbox) -> .fmap path

    @classmethod
    def precomputed(cls, mapping_path) -> "FeaturizerBackend":
        mapping_path = Path(mapping_path)
        fmaps = {}
        for rec in read_jsonl(mapping_path):
            fmaps[_bbox_key(rec["image"], BBox(*rec["bbox"]))] = mapping_path.parent / rec["fmap"]
        return cls("precomputed", fmaps)

    def feature_map(self, image, proposal: Proposal, config: PipelineConfig) -> np.ndarray:
        if self.kind == "precomputed":
            key = _bbox_key(proposal.image_id, proposal.bbox)
            if key not in self.fmaps:
                raise MissingFeatureMap(f"no feature map for {key}")
            return read_fmap(self.fmaps[key])
        crop = crop_resize(image, proposal.bbox, config.crop_size)
        return toy_featurize(crop, config.toy_grid, config.toy_channels)


def embed_feature_map(fm, head: AffineHead, config: PipelineConfig, whitening: WhitenTransform | None = None):
    v = featurize(fm, head, config.pooling, config.rmac_levels)
    if config.whitening and whitening is not None:
        v = l2_normalize(apply_whitening(whitening, v))
    return v


def embed_image(image: np.ndarray, head: AffineHead, config: PipelineConfig, whitening=None) -> np.ndarray:
    """Descriptor of a whole image (e.g. a clean prototype) via the toy backend."""
    h, w = image.shape[:2]
    crop = crop_resize(image, BBox(0, 0, w, h), config.crop_size)
    fm = toy_featurize(crop, config.toy_grid, config.toy_channels)
    return embed_feature_map(fm, head, config, whitening)


def classify_proposal(image, proposal: Proposal, backend: FeaturizerBackend, head: AffineHead,
                      index: PrototypeIndex, config: PipelineConfig,
                      whitening: WhitenTransform | None = None) -> Detection | None:
    """Best class for one proposal, or None when the similarity is below threshold."""
    fm = backend.feature_map(image, proposal, config)
    v = embed_feature_map(fm, head, config, whitening)
    best = index.query_topclass(v, k=1, threshold=config.threshold)
    if best is None:
        return None
    class_id, score = best
    return Detection(proposal.image_id, proposal.bbox, class_id, score, (("objectness", proposal.objectness),))


# -- batch runner -----------------------------------------------------------------------

def load_proposals(path) -> list[Proposal]:
    """Proposals JSONL; records without ``objectness`` (e.g. ground truth) count as 1.0."""
    return [
        Proposal(r["image"], BBox(*r["bbox"]), float(r.get("objectness", 1.0)))
        for r in read_jsonl(path)
    ]


def run_pipeline(images_dir, proposals, backend: FeaturizerBackend, head: AffineHead,
                 index: PrototypeIndex, config: PipelineConfig, whitening=None):
    """Classify the top proposals of every image; returns ``(detections, summary)``.

    Output order is image id, then proposal rank.
    """
    images_dir = Path(images_dir)
    by_image: dict[str, list[tuple[int, Proposal]]] = {}
    for i, p in enumerate(proposals):
        by_image.setdefault(p.image_id, []).append((i, p))

    summary = {"proposals": 0, "classified": 0, "rejected_by_threshold": 0, "empty_crops": 0}
    detections = []
    for image_id in sorted(by_image):
        ranked = sorted(by_image[image_id], key=lambda ip: (-ip[1].objectness, ip[0]))
        if config.top_n is not None:
            ranked = ranked[: config.top_n]
        image = None
        if backend.kind == "toy":
            image = load_rgba(images_dir / image_id)
        for _, proposal in ranked:
            summary["proposals"] += 1
            try:
                det = classify_proposal(image, proposal, backend, head, index, config, whitening)
            except (EmptyCrop, ZeroVector) as exc:
                log.warning("skipping proposal on %s: %s", image_id, exc)
                summary["empty_crops"] += 1
                continue
            if det is None:
                summary["rejected_by_threshold"] += 1
            else:
                summary["classified"] += 1
                detections.append(det)
    return detections, summary


def write_detections(path, detections) -> None:
    with open(path, "w") as f:
        for d in detections:
            f.write(json.dumps(d.to_json()) + "\n")
