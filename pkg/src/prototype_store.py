"""
Per-class target prototypes: initialisation from the labeled target shots,
EMA refresh from labeled + pseudo-labeled batch features, and the
prototype-similarity softmax matrices used by the inter-domain and
batch-wise losses.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from errors import NumericalError
from linalg_core import Matrix, as_matrix, require_finite, row_softmax, softmax_backward

logger = logging.getLogger(__name__)

NORM_AXES = ('samples', 'classes')


@dataclass(frozen=True)
class SimilarityConfig:
    """Temperature T1 and the normalisation axis of the inter-domain softmax"""
    temperature_t1: float = 0.05
    norm_axis: str = 'samples'

    def __post_init__(self):
        if not self.temperature_t1 > 0:
            raise ValueError(f"temperature_t1 must be positive, got {self.temperature_t1}")
        if self.norm_axis not in NORM_AXES:
            raise ValueError(f"norm_axis must be one of {NORM_AXES}, got {self.norm_axis!r}")


@dataclass(frozen=True, eq=False)
class PrototypeSet:
    """Unit-norm class prototypes (C x d) with the EMA momentum"""
    prototypes: Matrix
    momentum: float = 0.9
    initialized: np.ndarray = field(default=None)

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {self.momentum}")
        if self.initialized is None:
            object.__setattr__(self, 'initialized', np.ones(self.prototypes.shape[0], dtype=bool))

    @property
    def class_count(self) -> int:
        return self.prototypes.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.prototypes.shape[1]

    def require_initialized(self):
        if not np.all(self.initialized):
            missing = np.flatnonzero(~self.initialized).tolist()
            raise ValueError(f"prototypes for classes {missing} are not initialised")


def _unit_rows(m: Matrix) -> Matrix:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / norms


def _check_labels(labels, class_count: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise ValueError("labels must be a 1-D array")
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise ValueError(f"labels must lie in [0, {class_count})")
    return labels


def class_means(features: Matrix, labels: np.ndarray, class_count: int) -> Tuple[Matrix, np.ndarray]:
    """Per-class feature means and the mask of classes that occur"""
    sums = np.zeros((class_count, features.shape[1]))
    np.add.at(sums, labels, features)
    counts = np.bincount(labels, minlength=class_count)
    present = counts > 0
    means = np.zeros_like(sums)
    means[present] = sums[present] / counts[present, None]
    return means, present


def init_prototypes(labeled_features, labels, class_count: Optional[int] = None,
                    momentum: float = 0.9) -> PrototypeSet:
    """Prototype k is the renormalised mean of the labeled features of class k"""
    features = as_matrix(labeled_features)
    require_finite(features, "labeled features")
    labels = np.asarray(labels, dtype=np.int64)
    if features.shape[0] != labels.shape[0]:
        raise ValueError(f"{features.shape[0]} features but {labels.shape[0]} labels")
    if class_count is None:
        class_count = int(labels.max()) + 1
    labels = _check_labels(labels, class_count)

    means, present = class_means(features, labels, class_count)
    if not np.all(present):
        missing = np.flatnonzero(~present).tolist()
        raise ValueError(f"classes {missing} have no labeled target sample")
    if np.any(np.linalg.norm(means, axis=1) == 0):
        raise NumericalError("a class mean is the zero vector; cannot normalise its prototype")
    return PrototypeSet(prototypes=_unit_rows(means), momentum=momentum)


def ema_update(store: PrototypeSet, batch_features, batch_labels) -> PrototypeSet:
    """c_k <- normalize(alpha * c_k + (1 - alpha) * batch mean_k) for classes in the batch"""
    features = as_matrix(batch_features) if np.size(batch_features) else np.zeros((0, store.feature_dim))
    labels = _check_labels(batch_labels, store.class_count)
    if features.shape[0] != labels.shape[0]:
        raise ValueError(f"{features.shape[0]} features but {labels.shape[0]} labels")
    if features.shape[0] == 0:
        return store
    if features.shape[1] != store.feature_dim:
        raise ValueError(f"feature dim {features.shape[1]} != prototype dim {store.feature_dim}")

    means, present = class_means(features, labels, store.class_count)
    alpha = store.momentum
    updated = store.prototypes.copy()
    blend = alpha * store.prototypes[present] + (1.0 - alpha) * means[present]
    norms = np.linalg.norm(blend, axis=1)
    keep = norms == 0
    if np.any(keep):
        logger.warning(f"{int(keep.sum())} prototype blends cancelled to zero; keeping previous prototypes")
        blend[keep] = store.prototypes[present][keep]
        norms[keep] = 1.0
    updated[present] = blend / norms[:, None]
    initialized = store.initialized | present
    return replace(store, prototypes=updated, initialized=initialized)


def similarity_logits(store: PrototypeSet, features) -> Matrix:
    """Cosine similarities c_k . f_i as a C x N matrix (rows are unit norm)"""
    features = as_matrix(features)
    require_finite(features, "features")
    if features.shape[1] != store.feature_dim:
        raise ValueError(f"feature dim {features.shape[1]} != prototype dim {store.feature_dim}")
    return store.prototypes @ features.T


def similarity_softmax_over_samples(store: PrototypeSet, source_features, cfg: SimilarityConfig) -> Matrix:
    """C x N_s matrix s[k, i]; with norm_axis='samples' each class row sums to 1"""
    features = as_matrix(source_features)
    if features.shape[0] == 0:
        raise ValueError("empty source batch")
    logits = similarity_logits(store, features)
    if cfg.norm_axis == 'samples':
        return row_softmax(logits, cfg.temperature_t1)
    return row_softmax(logits.T, cfg.temperature_t1).T


def similarity_over_samples_backward(store: PrototypeSet, features, s: Matrix, grad_s: Matrix,
                                     cfg: SimilarityConfig) -> Tuple[Matrix, Matrix]:
    """Returns (grad w.r.t. features N x d, grad w.r.t. prototypes C x d)"""
    features = as_matrix(features)
    axis = 1 if cfg.norm_axis == 'samples' else 0
    grad_logits = softmax_backward(s, grad_s, cfg.temperature_t1, axis=axis)
    return grad_logits.T @ store.prototypes, grad_logits @ features


def similarity_softmax_over_classes(store: PrototypeSet, features, cfg: SimilarityConfig) -> Matrix:
    """N x C prototype-classifier probabilities: softmax over classes of sim / T1"""
    store.require_initialized()
    logits = similarity_logits(store, features).T
    return row_softmax(logits, cfg.temperature_t1)


def similarity_over_classes_backward(store: PrototypeSet, features, probs: Matrix, grad_probs: Matrix,
                                     cfg: SimilarityConfig) -> Tuple[Matrix, Matrix]:
    """Returns (grad w.r.t. features N x d, grad w.r.t. prototypes C x d)"""
    features = as_matrix(features)
    grad_logits = softmax_backward(probs, grad_probs, cfg.temperature_t1, axis=1)
    return grad_logits @ store.prototypes, grad_logits.T @ features


def prototype_drift(before: PrototypeSet, after: PrototypeSet) -> float:
    """Mean cosine distance between matching prototypes of two snapshots"""
    cos = np.sum(before.prototypes * after.prototypes, axis=1)
    return float(np.mean(1.0 - np.clip(cos, -1.0, 1.0)))
