"""
Three-way pseudo-labelling: confident linear prediction, transport-plan
fallback for mid-confidence samples, abstention for the rest.
"""

import enum
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from prometheus_client import Counter

from linalg_core import Matrix, as_matrix
from ot_sinkhorn import TransportPlan, plan_column_argmax

PSEUDO_LABELS = Counter('protoshift_pseudo_labels_total', 'Pseudo-label decisions', ['branch'])


class Branch(str, enum.Enum):
    CONFIDENT = 'confident'
    OT_PLAN = 'ot_plan'
    ABSTAIN = 'abstain'


class Strategy(str, enum.Enum):
    """Labelling rules compared at matched coverage"""
    LINEAR = 'linear'
    PROTOTYPE = 'prototype'
    TRANSPORT = 'transport'


@dataclass(frozen=True)
class PseudoLabelConfig:
    tau1: float = 0.95
    tau2: float = 0.4

    def __post_init__(self):
        # tau2 == tau1 is allowed: it switches the transport branch off
        if not 0.0 <= self.tau2 <= self.tau1 <= 1.0 or self.tau1 == 0.0:
            raise ValueError(f"need 0 <= tau2 <= tau1 <= 1 and tau1 > 0, got tau1={self.tau1}, tau2={self.tau2}")


@dataclass(frozen=True)
class PseudoLabelDecision:
    branch: Branch
    assigned: Optional[int] = None
    confidence: float = 0.0

    @classmethod
    def confident(cls, label: int, confidence: float) -> 'PseudoLabelDecision':
        return cls(Branch.CONFIDENT, int(label), float(confidence))

    @classmethod
    def ot_plan(cls, label: int, confidence: float = 0.0) -> 'PseudoLabelDecision':
        return cls(Branch.OT_PLAN, int(label), float(confidence))

    @classmethod
    def abstain(cls, confidence: float = 0.0) -> 'PseudoLabelDecision':
        return cls(Branch.ABSTAIN, None, float(confidence))

    @property
    def labeled(self) -> bool:
        return self.branch is not Branch.ABSTAIN


def _weak_row(weak_probs) -> np.ndarray:
    p = np.asarray(weak_probs, dtype=np.float64).ravel()
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("weak probabilities must sum to 1")
    return p


def decide(weak_probs, plan_column, cfg: PseudoLabelConfig) -> PseudoLabelDecision:
    p = _weak_row(weak_probs)
    top = int(np.argmax(p))
    confidence = float(p[top])
    if plan_column is not None:
        plan_column = np.asarray(plan_column, dtype=np.float64).ravel()
        if plan_column.shape[0] != p.shape[0]:
            raise ValueError(f"plan column has {plan_column.shape[0]} entries for {p.shape[0]} classes")

    if confidence >= cfg.tau1:
        return PseudoLabelDecision.confident(top, confidence)
    if confidence >= cfg.tau2 and plan_column is not None and np.any(plan_column > 0):
        return PseudoLabelDecision.ot_plan(plan_column_argmax(plan_column[:, None], 0), confidence)
    return PseudoLabelDecision.abstain(confidence)


def batch_decide(weak_probs, plan: Optional[TransportPlan], cfg: PseudoLabelConfig) -> List[PseudoLabelDecision]:
    """Row-wise decide; an absent or unconverged plan turns the transport branch into abstention"""
    probs = as_matrix(weak_probs)
    gamma = None
    if plan is not None and plan.converged:
        gamma = plan.plan
        if gamma.shape != (probs.shape[1], probs.shape[0]):
            raise ValueError(f"plan shape {gamma.shape} does not match probabilities {probs.shape}")
    decisions = [decide(row, None if gamma is None else gamma[:, i], cfg) for i, row in enumerate(probs)]
    for d in decisions:
        PSEUDO_LABELS.labels(branch=d.branch.value).inc()
    return decisions


def strategy_decide(strategy: Strategy, weak_probs, plan: Optional[TransportPlan],
                    prototype_probs: Optional[Matrix], cfg: PseudoLabelConfig) -> List[PseudoLabelDecision]:
    """Label every sample whose weak confidence reaches tau2, using the given rule"""
    strategy = Strategy(strategy)
    probs = as_matrix(weak_probs)
    if strategy is Strategy.TRANSPORT:
        return batch_decide(probs, plan, cfg)

    if strategy is Strategy.PROTOTYPE:
        if prototype_probs is None:
            raise ValueError("prototype strategy needs prototype probabilities")
        source = as_matrix(prototype_probs)
        if source.shape != probs.shape:
            raise ValueError(f"prototype probabilities {source.shape} vs weak probabilities {probs.shape}")
    else:
        source = probs

    decisions = []
    for p, q in zip(probs, source):
        confidence = float(p.max())
        if confidence >= cfg.tau2:
            decisions.append(PseudoLabelDecision.confident(int(np.argmax(q)), confidence))
        else:
            decisions.append(PseudoLabelDecision.abstain(confidence))
    return decisions


def pseudo_label_accuracy(decisions: Sequence[PseudoLabelDecision], true_labels) -> Tuple[float, float]:
    """(accuracy over labeled decisions, coverage); accuracy is 1.0 when nothing is labeled"""
    true_labels = np.asarray(true_labels, dtype=np.int64)
    if len(decisions) != true_labels.shape[0]:
        raise ValueError(f"{len(decisions)} decisions for {true_labels.shape[0]} labels")
    if not decisions:
        return 1.0, 0.0
    decided = [(d.assigned, y) for d, y in zip(decisions, true_labels) if d.labeled]
    coverage = len(decided) / len(decisions)
    if not decided:
        return 1.0, coverage
    correct = sum(1 for assigned, y in decided if assigned == y)
    return correct / len(decided), coverage


def branch_accuracy(decisions: Sequence[PseudoLabelDecision], true_labels) -> Dict[Branch, Tuple[float, float]]:
    """Accuracy and coverage per labelling branch (coverage relative to all decisions)"""
    true_labels = np.asarray(true_labels, dtype=np.int64)
    out = {}
    for branch in (Branch.CONFIDENT, Branch.OT_PLAN):
        picked = [(d.assigned, y) for d, y in zip(decisions, true_labels) if d.branch is branch]
        coverage = len(picked) / len(decisions) if decisions else 0.0
        accuracy = sum(1 for a, y in picked if a == y) / len(picked) if picked else 1.0
        out[branch] = (accuracy, coverage)
    return out
