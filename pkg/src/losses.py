"""
Loss terms of the training objective and their analytic gradients.

Each term returns a LossTerm whose gradient blocks are keyed by the name of
the input they differentiate. Targets (weak-view pseudo-labels, the transport
plan, prototypes) are constants unless a caller routes their gradient.
"""

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Union

import numpy as np

from errors import NumericalError
from linalg_core import Matrix, as_matrix, row_normalize_phi, row_normalize_phi_backward
from ot_sinkhorn import TransportPlan, build_cost_matrix
from prototype_store import (PrototypeSet, SimilarityConfig, similarity_over_samples_backward,
                             similarity_softmax_over_samples)

LOG_FLOOR = 1e-12

COMPONENTS = ('base', 'intra', 'inter', 'batch')


@dataclass(frozen=True)
class LossWeights:
    lambda_intra: float = 1.0
    lambda_inter: float = 1.0
    lambda_batch: float = 1.0

    def __post_init__(self):
        for name in ('lambda_intra', 'lambda_inter', 'lambda_batch'):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")

    def weight(self, component: str) -> float:
        return 1.0 if component == 'base' else getattr(self, f"lambda_{component}")


@dataclass
class LossTerm:
    value: float
    grads: Dict[str, Matrix] = field(default_factory=dict)


@dataclass
class LossReport:
    """Unweighted components, their weighted total and the merged gradients"""
    base: float
    intra: float
    inter: float
    batch: float
    total: float
    weights: LossWeights
    grads: Dict[str, Matrix] = field(default_factory=dict)

    def components(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in COMPONENTS}


def _clamped_log(x):
    return np.log(np.maximum(x, LOG_FLOOR))


def _clamped_log_grad(x):
    """d/dx of log(max(x, floor)); zero on the clamped side"""
    return np.where(x > LOG_FLOOR, 1.0 / np.maximum(x, LOG_FLOOR), 0.0)


def _labels(labels, n: int, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.shape[0] != n:
        raise ValueError(f"{n} rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")
    return labels


def cross_entropy(probs, labels) -> LossTerm:
    """Mean of -log p[i, y_i] with gradient w.r.t. probs"""
    probs = as_matrix(probs)
    labels = _labels(labels, probs.shape[0], probs.shape[1])
    n = probs.shape[0]
    grad = np.zeros_like(probs)
    if n == 0:
        return LossTerm(0.0, {'probs': grad})
    picked = probs[np.arange(n), labels]
    grad[np.arange(n), labels] = -_clamped_log_grad(picked) / n
    return LossTerm(float(-np.mean(_clamped_log(picked))), {'probs': grad})


def _optional(probs, classes: int) -> Matrix:
    if probs is None:
        return np.zeros((0, classes))
    return as_matrix(probs) if np.size(probs) else np.zeros((0, classes))


def base_loss(source_probs, source_labels, labeled_target_probs=None, labeled_target_labels=None,
              weak_probs=None, strong_probs=None, tau1: float = 0.95) -> LossTerm:
    """Supervised CE on source + labeled target, plus the thresholded weak-to-strong term"""
    source_probs = as_matrix(source_probs)
    classes = source_probs.shape[1]
    target_probs = _optional(labeled_target_probs, classes)
    target_labels = np.zeros(0, dtype=np.int64) if labeled_target_labels is None else labeled_target_labels

    n_src = source_probs.shape[0]
    supervised = cross_entropy(np.vstack([source_probs, target_probs]),
                               np.concatenate([np.asarray(source_labels, dtype=np.int64).ravel(),
                                               np.asarray(target_labels, dtype=np.int64).ravel()]))
    grads = {
        'source_probs': supervised.grads['probs'][:n_src],
        'labeled_target_probs': supervised.grads['probs'][n_src:],
    }
    value = supervised.value

    if weak_probs is not None and strong_probs is not None:
        weak = as_matrix(weak_probs)
        strong = as_matrix(strong_probs)
        if weak.shape != strong.shape:
            raise ValueError(f"weak {weak.shape} and strong {strong.shape} views differ in shape")
        mask = weak.max(axis=1) >= tau1
        strong_grad = np.zeros_like(strong)
        if np.any(mask):
            pseudo = np.argmax(weak[mask], axis=1)
            consistency = cross_entropy(strong[mask], pseudo)
            value += consistency.value
            strong_grad[mask] = consistency.grads['probs']
        grads['strong_probs'] = strong_grad
    return LossTerm(value, grads)


def intra_loss(plan: Union[TransportPlan, Matrix], strong_cost) -> LossTerm:
    """<gamma_0, C^s>_F with the plan held constant"""
    gamma = plan.plan if isinstance(plan, TransportPlan) else as_matrix(plan)
    strong_cost = as_matrix(strong_cost)
    if gamma.shape != strong_cost.shape:
        raise ValueError(f"plan {gamma.shape} and cost {strong_cost.shape} differ in shape")
    return LossTerm(float(np.sum(gamma * strong_cost)), {'strong_cost': gamma.copy()})


def intra_consistency(plan: Union[TransportPlan, Matrix], store: PrototypeSet, strong_features) -> LossTerm:
    """intra_loss with C^s built from the strong-view features, chained to those features"""
    strong_features = as_matrix(strong_features)
    term = intra_loss(plan, build_cost_matrix(store, strong_features))
    gamma = term.grads['strong_cost']
    # C = 1 - P F^T
    return LossTerm(term.value, {
        'strong_features': -gamma.T @ store.prototypes,
        'prototypes': -gamma @ strong_features,
    })


def inter_loss(similarity, source_labels) -> LossTerm:
    """-mean_i log s[y_i, i] over the source batch"""
    s = as_matrix(similarity)
    classes, n = s.shape
    labels = _labels(source_labels, n, classes)
    grad = np.zeros_like(s)
    if n == 0:
        return LossTerm(0.0, {'similarity': grad})
    picked = s[labels, np.arange(n)]
    grad[labels, np.arange(n)] = -_clamped_log_grad(picked) / n
    return LossTerm(float(-np.mean(_clamped_log(picked))), {'similarity': grad})


def inter_alignment(store: PrototypeSet, source_features, source_labels, cfg: SimilarityConfig) -> LossTerm:
    """inter_loss on the sample-axis similarity softmax, chained to features and prototypes"""
    source_features = as_matrix(source_features)
    s = similarity_softmax_over_samples(store, source_features, cfg)
    term = inter_loss(s, source_labels)
    grad_features, grad_prototypes = similarity_over_samples_backward(
        store, source_features, s, term.grads['similarity'], cfg)
    return LossTerm(term.value, {'source_features': grad_features, 'prototypes': grad_prototypes})


def _correlation_penalty(weak: Matrix, strong: Matrix):
    """||phi(R) - I||_1 + ||phi(R^T) - I||_1 for R = weak^T strong, with grads"""
    classes = weak.shape[1]
    eye = np.eye(classes)
    r = weak.T @ strong
    value = 0.0
    grad_r = np.zeros_like(r)
    for transpose in (False, True):
        m = r.T if transpose else r
        diff = row_normalize_phi(m) - eye
        value += float(np.sum(np.abs(diff)))
        g = row_normalize_phi_backward(m, np.sign(diff))
        grad_r += g.T if transpose else g
    return value, strong @ grad_r.T, weak @ grad_r


def dual_consistency_loss(weak_sharp, strong_sharp, weak_proto, strong_proto,
                          linear: bool = True, prototype: bool = True) -> LossTerm:
    """Batch-wise cross-correlation consistency for the linear and prototype classifiers"""
    weak_sharp, strong_sharp = as_matrix(weak_sharp), as_matrix(strong_sharp)
    weak_proto, strong_proto = as_matrix(weak_proto), as_matrix(strong_proto)
    shape = weak_sharp.shape
    for m in (strong_sharp, weak_proto, strong_proto):
        if m.shape != shape:
            raise ValueError(f"dual consistency inputs differ in shape: {shape} vs {m.shape}")
    scale = 1.0 / (2 * shape[1])

    value = 0.0
    grads = {name: np.zeros(shape) for name in
             ('weak_sharp', 'strong_sharp', 'weak_proto', 'strong_proto')}
    if linear:
        v, gw, gs = _correlation_penalty(weak_sharp, strong_sharp)
        value += v
        grads['weak_sharp'], grads['strong_sharp'] = scale * gw, scale * gs
    if prototype:
        v, gw, gs = _correlation_penalty(weak_proto, strong_proto)
        value += v
        grads['weak_proto'], grads['strong_proto'] = scale * gw, scale * gs
    return LossTerm(scale * value, grads)


def total_loss(components: Mapping[str, Union[LossTerm, float, None]], weights: LossWeights) -> LossReport:
    """Weighted sum of the four components; missing components count as 0"""
    values = {}
    grads: Dict[str, Matrix] = {}
    for name in COMPONENTS:
        term = components.get(name)
        if term is None:
            values[name] = 0.0
            continue
        if isinstance(term, LossTerm):
            values[name] = float(term.value)
            w = weights.weight(name)
            for key, g in term.grads.items():
                grads[key] = grads[key] + w * g if key in grads else w * g
        else:
            values[name] = float(term)
        if not np.isfinite(values[name]):
            raise NumericalError(f"loss component {name} is not finite")

    total = (values['base'] + weights.lambda_intra * values['intra']
             + weights.lambda_inter * values['inter'] + weights.lambda_batch * values['batch'])
    return LossReport(total=total, weights=weights, grads=grads, **values)
