"""
Synthetic SSDA scenarios: Gaussian class blobs in the source domain, the same
blobs rotated/scaled/translated in the target domain, a few labeled target
shots per class and a large unlabeled target pool whose labels are kept for
evaluation only. Also weak/strong vector augmentations, batching and CSV
ingestion of precomputed features.
"""

import csv
import logging
import os
from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np

from errors import DataFormatError
from linalg_core import Matrix

logger = logging.getLogger(__name__)

SPLIT_TOKENS = ('source', 'target_labeled', 'target_unlabeled')
STRENGTHS = {'weak': 0, 'strong': 1}


@dataclass(frozen=True)
class DomainScenario:
    class_count: int = 5
    input_dim: int = 2
    source_samples: int = 500
    target_samples: int = 515
    shots: int = 3
    rotation_deg: float = 30.0
    translation: float = 0.5
    target_scale: float = 1.0
    class_radius: float = 2.0
    class_std: float = 0.5
    seed: int = 0

    def validate(self):
        if self.class_count < 1:
            raise ValueError("class_count must be at least 1")
        if self.input_dim < 2:
            raise ValueError("input_dim must be at least 2 (the shift rotates the first two axes)")
        if self.shots < 1:
            raise ValueError("shots must be at least 1 per class")
        if self.source_samples < self.class_count:
            raise ValueError("source_samples must cover every class")
        if self.shots * self.class_count > self.target_samples:
            raise ValueError(f"{self.shots} shots x {self.class_count} classes exceed the target budget "
                             f"of {self.target_samples} samples")
        if self.class_std < 0 or self.target_scale <= 0:
            raise ValueError("class_std must be >= 0 and target_scale > 0")

    def class_means(self) -> Matrix:
        angles = 2.0 * np.pi * np.arange(self.class_count) / self.class_count
        means = np.zeros((self.class_count, self.input_dim))
        means[:, 0] = self.class_radius * np.cos(angles)
        means[:, 1] = self.class_radius * np.sin(angles)
        return means

    def to_target(self, x: Matrix) -> Matrix:
        """Rotate the first two axes, scale, then translate every axis"""
        theta = np.deg2rad(self.rotation_deg)
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        out = x.copy()
        out[:, :2] = x[:, :2] @ rot.T
        return self.target_scale * out + self.translation


class SsdaSplit:
    """D_s, D_t^l and D_t^u; unlabeled target labels are reachable only for evaluation"""

    def __init__(self, source_x, source_y, labeled_x, labeled_y, unlabeled_x, unlabeled_eval_y=None,
                 class_count: Optional[int] = None):
        self.source_x = np.asarray(source_x, dtype=np.float64)
        self.source_y = np.asarray(source_y, dtype=np.int64)
        self.target_labeled_x = np.asarray(labeled_x, dtype=np.float64)
        self.target_labeled_y = np.asarray(labeled_y, dtype=np.int64)
        self.target_unlabeled_x = np.asarray(unlabeled_x, dtype=np.float64)
        self._eval_labels = None if unlabeled_eval_y is None else np.asarray(unlabeled_eval_y, dtype=np.int64)
        if class_count is None:
            class_count = int(max(self.source_y.max(initial=-1), self.target_labeled_y.max(initial=-1))) + 1
        self.class_count = class_count

    @property
    def input_dim(self) -> int:
        return self.source_x.shape[1]

    def has_eval_labels(self) -> bool:
        return self._eval_labels is not None and bool(np.all(self._eval_labels >= 0))

    def evaluation_labels(self) -> np.ndarray:
        """Labels of D_t^u; evaluation and reporting code only"""
        if not self.has_eval_labels():
            raise ValueError("this split carries no evaluation labels for the unlabeled target pool")
        return self._eval_labels

    def with_eval_labels(self, labels) -> 'SsdaSplit':
        return SsdaSplit(self.source_x, self.source_y, self.target_labeled_x, self.target_labeled_y,
                         self.target_unlabeled_x, labels, self.class_count)


def _balanced_labels(n: int, class_count: int) -> np.ndarray:
    return np.arange(n) % class_count


def generate(scenario: DomainScenario) -> SsdaSplit:
    scenario.validate()
    rng = np.random.default_rng(scenario.seed)
    means = scenario.class_means()
    c = scenario.class_count

    source_y = _balanced_labels(scenario.source_samples, c)
    source_x = means[source_y] + scenario.class_std * rng.standard_normal((source_y.size, scenario.input_dim))

    target_y = _balanced_labels(scenario.target_samples, c)
    target_x = scenario.to_target(
        means[target_y] + scenario.class_std * rng.standard_normal((target_y.size, scenario.input_dim)))

    labeled_idx = np.concatenate([rng.choice(np.flatnonzero(target_y == k), size=scenario.shots, replace=False)
                                  for k in range(c)])
    labeled_idx.sort()
    unlabeled = np.ones(target_y.size, dtype=bool)
    unlabeled[labeled_idx] = False

    perm = rng.permutation(np.flatnonzero(unlabeled))
    return SsdaSplit(source_x, source_y, target_x[labeled_idx], target_y[labeled_idx],
                     target_x[perm], target_y[perm], class_count=c)


@dataclass(frozen=True)
class AugmentPolicy:
    weak_noise_sigma: float = 0.05
    strong_noise_sigma: float = 0.3
    strong_dropout_prob: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.weak_noise_sigma < 0 or not 0.0 <= self.strong_dropout_prob <= 1.0:
            raise ValueError("noise sigmas must be >= 0 and dropout probability in [0, 1]")
        if not self.strong_noise_sigma > self.weak_noise_sigma:
            raise ValueError("strong_noise_sigma must exceed weak_noise_sigma")


def augment(batch, policy: AugmentPolicy, strength: str, epoch: int = 0, batch_index: int = 0) -> Matrix:
    """Label-preserving noise (weak) or noise + coordinate dropout (strong), seeded per call site"""
    if strength not in STRENGTHS:
        raise ValueError(f"strength must be 'weak' or 'strong', got {strength!r}")
    x = np.asarray(batch, dtype=np.float64)
    rng = np.random.default_rng([policy.seed, epoch, batch_index, STRENGTHS[strength]])
    if strength == 'weak':
        return x + policy.weak_noise_sigma * rng.standard_normal(x.shape)
    noisy = x + policy.strong_noise_sigma * rng.standard_normal(x.shape)
    keep = rng.random(x.shape) >= policy.strong_dropout_prob
    return noisy * keep


def batch_stream(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[Tuple[int, int, np.ndarray]]:
    """Endless (epoch, batch_index, indices) over reshuffled epochs; batches never straddle epochs"""
    if n <= 0:
        raise ValueError("cannot batch an empty split")
    batch_size = min(batch_size, n)
    epoch = 0
    while True:
        order = rng.permutation(n)
        for b, start in enumerate(range(0, n - batch_size + 1, batch_size)):
            yield epoch, b, order[start:start + batch_size]
        epoch += 1


def load_csv(path: str, feature_dim: Optional[int] = None, class_count: Optional[int] = None) -> SsdaSplit:
    """Read `split,label,f0..f{d-1}` rows; unlabeled-target labels may be blank"""
    rows = {token: ([], []) for token in SPLIT_TOKENS}
    with open(path, newline='', encoding='utf-8') as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise DataFormatError("empty file", line=1)
        header = [h.strip() for h in header]
        if header[:2] != ['split', 'label'] or len(header) < 3:
            raise DataFormatError("header must start with split,label followed by feature columns", line=1)
        expected = [f"f{i}" for i in range(len(header) - 2)]
        if header[2:] != expected:
            raise DataFormatError(f"feature columns must be named {expected[0]}..{expected[-1]}", line=1)
        d = len(expected)
        if feature_dim is not None and d != feature_dim:
            raise DataFormatError(f"file has {d} features, expected {feature_dim}", line=1)

        for record in reader:
            line = reader.line_num
            if not record or all(not cell.strip() for cell in record):
                continue
            if len(record) != d + 2:
                raise DataFormatError(f"expected {d + 2} fields, got {len(record)}", line=line)
            token, label = record[0].strip(), record[1].strip()
            if token not in rows:
                raise DataFormatError(f"unknown split {token!r}", line=line)
            if label == '':
                if token != 'target_unlabeled':
                    raise DataFormatError(f"{token} rows need a label", line=line)
                y = -1
            else:
                try:
                    y = int(label)
                except ValueError:
                    raise DataFormatError(f"label {label!r} is not an integer", line=line) from None
                if y < 0:
                    raise DataFormatError(f"negative label {y}", line=line)
            try:
                x = [float(cell) for cell in record[2:]]
            except ValueError:
                raise DataFormatError("non-numeric feature value", line=line) from None
            if not np.all(np.isfinite(x)):
                raise DataFormatError("non-finite feature value", line=line)
            rows[token][0].append(x)
            rows[token][1].append(y)

    def block(token):
        xs, ys = rows[token]
        return np.asarray(xs, dtype=np.float64).reshape(-1, d), np.asarray(ys, dtype=np.int64)

    source_x, source_y = block('source')
    labeled_x, labeled_y = block('target_labeled')
    unlabeled_x, unlabeled_y = block('target_unlabeled')
    if source_y.size == 0:
        raise DataFormatError("source split is empty")
    if labeled_y.size == 0:
        raise DataFormatError("target_labeled split is empty; at least one shot per class is required")
    if unlabeled_y.size == 0:
        raise DataFormatError("target_unlabeled split is empty")
    eval_y = unlabeled_y if np.all(unlabeled_y >= 0) else None
    split = SsdaSplit(source_x, source_y, labeled_x, labeled_y, unlabeled_x, eval_y, class_count)
    for name, labels in (('source', source_y), ('target_labeled', labeled_y)):
        if labels.max() >= split.class_count:
            raise DataFormatError(f"{name} label {labels.max()} exceeds class_count {split.class_count}")
    logger.info(f"Loaded {path}: {source_y.size} source, {labeled_y.size} labeled target, "
                f"{unlabeled_y.size} unlabeled target, d={d}")
    return split


def write_csv(split: SsdaSplit, path: str) -> str:
    """Write a split in the load_csv schema (unlabeled labels included when known)"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    eval_y = split._eval_labels if split.has_eval_labels() else None
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['split', 'label'] + [f"f{i}" for i in range(split.input_dim)])
        blocks = (('source', split.source_x, split.source_y),
                  ('target_labeled', split.target_labeled_x, split.target_labeled_y),
                  ('target_unlabeled', split.target_unlabeled_x, eval_y))
        for token, xs, ys in blocks:
            for i, x in enumerate(xs):
                label = '' if ys is None else str(int(ys[i]))
                writer.writerow([token, label] + [repr(float(v)) for v in x])
    return path
