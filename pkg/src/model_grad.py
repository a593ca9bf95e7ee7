"""
Desk-scale feature extractor G (tanh MLP with unit-norm output), linear
classifier F, their hand-written backward passes, SGD with momentum and the
binary checkpoint format.

Checkpoint layout (little-endian):
    magic b'PSFT' | u16 version | u32 step | u32 input_dim | u32 n_hidden |
    u32 hidden[n_hidden] | u32 feature_dim | u32 class_count | f64 momentum |
    f64 blocks in PARAMETER order, then prototypes (C x d) | u32 crc32
"""

import logging
import os
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import CheckpointError, NumericalError, StaleCacheError
from linalg_core import Matrix, as_matrix, l2_normalize_rows, require_finite, row_softmax, softmax_backward
from prototype_store import PrototypeSet

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'PSFT'
CHECKPOINT_VERSION = 1

Params = Dict[str, np.ndarray]


@dataclass
class FeatureCache:
    version: int
    inputs: Matrix
    activations: List[Matrix]
    pre_norm: Matrix
    norms: np.ndarray
    features: Matrix
    degenerate: np.ndarray


@dataclass
class ClassifierCache:
    version: int
    features: Matrix
    logits: Matrix
    probs: Matrix


class FeatureExtractor:
    """input -> tanh hidden layers -> linear -> L2 normalisation"""

    def __init__(self, input_dim: int, hidden_dims: Sequence[int] = (64,), feature_dim: int = 16,
                 rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        self.input_dim = int(input_dim)
        self.hidden_dims = tuple(int(h) for h in hidden_dims)
        self.feature_dim = int(feature_dim)
        sizes = (self.input_dim,) + self.hidden_dims + (self.feature_dim,)
        self.weights: List[Matrix] = []
        self.biases: List[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self.version = 0

    def parameters(self) -> Params:
        params = OrderedDict()
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"G.W{i}"] = w
            params[f"G.b{i}"] = b
        return params

    def forward(self, inputs) -> Tuple[Matrix, FeatureCache]:
        x = as_matrix(inputs)
        require_finite(x, "inputs")
        if x.shape[1] != self.input_dim:
            raise ValueError(f"input dim {x.shape[1]} != extractor input dim {self.input_dim}")
        activations = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            h = z if i == last else np.tanh(z)
            if i != last:
                activations.append(h)
        degenerate = np.linalg.norm(h, axis=1) == 0
        features, norms = l2_normalize_rows(h)
        # l2_normalize_rows may nudge degenerate rows; keep the nudged vector for backward
        pre_norm = features * norms[:, None]
        return features, FeatureCache(self.version, x, activations, pre_norm, norms, features, degenerate)

    def backward(self, cache: FeatureCache, grad_features) -> Params:
        if cache.version != self.version:
            raise StaleCacheError("feature cache is older than the current parameters")
        g = as_matrix(grad_features)
        f = cache.features
        # d(z/|z|) = (I - f f^T) / |z|
        grad = (g - f * np.sum(g * f, axis=1, keepdims=True)) / cache.norms[:, None]
        # nudged rows are constants
        grad[cache.degenerate] = 0.0
        grads = {}
        for i in range(len(self.weights) - 1, -1, -1):
            h_in = cache.activations[i]
            grads[f"G.W{i}"] = h_in.T @ grad
            grads[f"G.b{i}"] = grad.sum(axis=0)
            if i > 0:
                grad = (grad @ self.weights[i].T) * (1.0 - h_in ** 2)
        return OrderedDict((name, grads[name]) for name in self.parameters())


class LinearClassifier:
    """probs = softmax(f W^T + b)"""

    def __init__(self, feature_dim: int, class_count: int, rng: Optional[np.random.Generator] = None):
        rng = rng or np.random.default_rng(0)
        limit = np.sqrt(6.0 / (feature_dim + class_count))
        self.weight = rng.uniform(-limit, limit, size=(class_count, feature_dim))
        self.bias = np.zeros(class_count)
        self.version = 0

    @property
    def class_count(self) -> int:
        return self.weight.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> Params:
        return OrderedDict([("F.W", self.weight), ("F.b", self.bias)])

    def forward(self, features) -> Tuple[Matrix, ClassifierCache]:
        f = as_matrix(features)
        logits = f @ self.weight.T + self.bias
        probs = row_softmax(logits)
        return probs, ClassifierCache(self.version, f, logits, probs)

    def backward(self, cache: ClassifierCache, grad_logits) -> Tuple[Params, Matrix]:
        """Returns (parameter grads, grad w.r.t. the input features)"""
        if cache.version != self.version:
            raise StaleCacheError("classifier cache is older than the current parameters")
        g = as_matrix(grad_logits)
        grads = OrderedDict([("F.W", g.T @ cache.features), ("F.b", g.sum(axis=0))])
        return grads, g @ self.weight


def probs_to_logits_grad(probs, grad_probs) -> Matrix:
    return softmax_backward(probs, grad_probs, 1.0)


class SsdaModel:
    """G and F together, with one flat parameter namespace"""

    def __init__(self, extractor: FeatureExtractor, classifier: LinearClassifier):
        if extractor.feature_dim != classifier.feature_dim:
            raise ValueError("extractor output and classifier input dims differ")
        self.extractor = extractor
        self.classifier = classifier

    @classmethod
    def create(cls, input_dim: int, class_count: int, hidden_dims: Sequence[int] = (64,),
               feature_dim: int = 16, seed: int = 0) -> 'SsdaModel':
        rng = np.random.default_rng(seed)
        return cls(FeatureExtractor(input_dim, hidden_dims, feature_dim, rng),
                   LinearClassifier(feature_dim, class_count, rng))

    def parameters(self) -> Params:
        params = self.extractor.parameters()
        params.update(self.classifier.parameters())
        return params

    def bump_version(self):
        self.extractor.version += 1
        self.classifier.version += 1

    def apply_gradients(self, grads: Params, state: 'OptimizerState') -> 'OptimizerState':
        """One SGD step; caches from earlier forwards become stale"""
        _, state = sgd_step(self.parameters(), grads, state)
        self.bump_version()
        return state

    def predict(self, inputs) -> Tuple[Matrix, Matrix]:
        """(features, probs) without keeping caches"""
        features, _ = self.extractor.forward(inputs)
        probs, _ = self.classifier.forward(features)
        return features, probs


def forward_features(extractor: FeatureExtractor, inputs) -> Tuple[Matrix, FeatureCache]:
    return extractor.forward(inputs)


def forward_probs(classifier: LinearClassifier, features) -> Tuple[Matrix, ClassifierCache]:
    return classifier.forward(features)


def backward(model: SsdaModel, feature_cache: FeatureCache, classifier_cache: Optional[ClassifierCache],
             grad_logits=None, grad_features=None) -> Params:
    """Parameter grads for one forward group given upstream logit and/or feature grads"""
    params = model.parameters()
    grads = OrderedDict((name, np.zeros_like(p)) for name, p in params.items())
    n, d = feature_cache.features.shape
    feature_grad = np.zeros((n, d)) if grad_features is None else as_matrix(grad_features).copy()
    if grad_logits is not None:
        if classifier_cache is None:
            raise ValueError("logit gradient given without a classifier cache")
        f_grads, through = model.classifier.backward(classifier_cache, grad_logits)
        grads.update(f_grads)
        feature_grad += through
    elif classifier_cache is not None and classifier_cache.version != model.classifier.version:
        raise StaleCacheError("classifier cache is older than the current parameters")
    grads.update(model.extractor.backward(feature_cache, feature_grad))
    return grads


def accumulate(total: Params, grads: Params) -> Params:
    for name, g in grads.items():
        total[name] = total[name] + g if name in total else g.copy()
    return total


@dataclass
class OptimizerState:
    """SGD with momentum and the inverse-decay schedule lr0 * (1 + gamma t)^-power"""
    learning_rate: float = 0.05
    momentum: float = 0.9
    lr_gamma: float = 0.0
    lr_power: float = 0.75
    step: int = 0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def current_lr(self) -> float:
        return self.learning_rate * (1.0 + self.lr_gamma * self.step) ** (-self.lr_power)


def sgd_step(params: Params, grads: Params, state: OptimizerState) -> Tuple[Params, OptimizerState]:
    """v <- m v + g ; theta <- theta - lr v (in place)"""
    for name, g in grads.items():
        if name not in params:
            raise ValueError(f"gradient for unknown parameter {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    lr = state.current_lr()
    for name, g in grads.items():
        v = state.velocity.get(name)
        v = g.copy() if v is None else state.momentum * v + g
        state.velocity[name] = v
        params[name] -= lr * v
    state.step += 1
    return params, state


def save_checkpoint(path: str, model: SsdaModel, store: PrototypeSet, step: int = 0) -> str:
    ext = model.extractor
    header = struct.pack('<4sHII', CHECKPOINT_MAGIC, CHECKPOINT_VERSION, step, ext.input_dim)
    header += struct.pack('<I', len(ext.hidden_dims))
    header += struct.pack(f'<{len(ext.hidden_dims)}I', *ext.hidden_dims)
    header += struct.pack('<IId', ext.feature_dim, model.classifier.class_count, store.momentum)
    body = b''.join(np.ascontiguousarray(p, dtype='<f8').tobytes() for p in model.parameters().values())
    body += np.ascontiguousarray(store.prototypes, dtype='<f8').tobytes()
    payload = header + body
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'wb') as f:
        f.write(payload + struct.pack('<I', zlib.crc32(payload)))
    return path


def load_checkpoint(path: str) -> Tuple[SsdaModel, PrototypeSet, int]:
    with open(path, 'rb') as f:
        blob = f.read()
    if len(blob) < 18 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    payload, (crc,) = blob[:-4], struct.unpack('<I', blob[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path} failed its CRC check")

    _, version, step, input_dim = struct.unpack_from('<4sHII', payload, 0)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    offset = struct.calcsize('<4sHII')
    (n_hidden,) = struct.unpack_from('<I', payload, offset)
    offset += 4
    hidden = struct.unpack_from(f'<{n_hidden}I', payload, offset)
    offset += 4 * n_hidden
    feature_dim, class_count, momentum = struct.unpack_from('<IId', payload, offset)
    offset += struct.calcsize('<IId')

    model = SsdaModel(FeatureExtractor(input_dim, hidden, feature_dim), LinearClassifier(feature_dim, class_count))
    for p in model.parameters().values():
        count = p.size
        block = np.frombuffer(payload, dtype='<f8', count=count, offset=offset)
        p[...] = block.reshape(p.shape)
        offset += 8 * count
    protos = np.frombuffer(payload, dtype='<f8', count=class_count * feature_dim, offset=offset)
    offset += 8 * protos.size
    if offset != len(payload):
        raise CheckpointError(f"{path} has {len(payload) - offset} trailing bytes")
    store = PrototypeSet(prototypes=protos.reshape(class_count, feature_dim).astype(np.float64), momentum=momentum)
    return model, store, step
