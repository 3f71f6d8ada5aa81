"""Prototype-retrieval second layer for stylized-object (logo) detection."""
from .descriptor import (
    AffineHead,
    WhitenTransform,
    apply_affine,
    apply_whitening,
    avg_pool_global,
    featurize,
    fit_whitening,
    l2_normalize,
    max_pool_global,
    rmac_pool,
)
from .evaluation import BBox, Detection, GroundTruth
from .index import Prototype, PrototypeIndex, QueryResult
from .training import TrainConfig, TrainingSample, train_head, triplet_loss

__version__ = "0.1.0"
