"""
The per-batch training protocol: forward the source, labeled-target, weak and
strong unlabeled views; solve the batch transport plan against the current
prototypes; assign pseudo-labels; compute the four loss terms against that
same prototype snapshot; backpropagate; SGD step; EMA-refresh the prototypes.
Also evaluation of checkpoints and the run artifacts (metrics.csv,
pseudo_labels.csv, pl_study.csv, summary.json, checkpoint.bin).
"""

import csv
import dataclasses
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import orjson
import psutil
from prometheus_client import Counter, Gauge, Histogram

from config import RunConfig
from data_bench import SsdaSplit, augment, batch_stream, generate, load_csv
from errors import CheckpointError, DataFormatError, NumericalError
from linalg_core import Matrix, sharpen, softmax_backward
from losses import (LossReport, base_loss, dual_consistency_loss, inter_alignment, intra_consistency,
                    total_loss)
from model_grad import (ClassifierCache, FeatureCache, OptimizerState, Params, SsdaModel, accumulate, backward,
                        load_checkpoint, probs_to_logits_grad, save_checkpoint)
from ot_sinkhorn import TransportPlan, TransportProblem, build_cost_matrix, solve_sinkhorn
from prototype_store import (PrototypeSet, SimilarityConfig, ema_update, init_prototypes, prototype_drift,
                             similarity_over_classes_backward, similarity_softmax_over_classes)
from pseudo_label import (Branch, PseudoLabelDecision, Strategy, batch_decide, branch_accuracy,
                          pseudo_label_accuracy, strategy_decide)

logger = logging.getLogger(__name__)

TRAIN_STEPS = Counter('protoshift_train_steps_total', 'Completed training steps')
STEP_DURATION = Histogram('protoshift_step_duration_seconds', 'Wall time of one training step')
LOSS_TOTAL = Gauge('protoshift_loss_total', 'Weighted total loss of the latest step')
EVAL_MCA = Gauge('protoshift_eval_mca', 'Mean class accuracy at the latest evaluation')

METRICS_FILE = 'metrics.csv'
PSEUDO_LABELS_FILE = 'pseudo_labels.csv'
PL_STUDY_FILE = 'pl_study.csv'
SUMMARY_FILE = 'summary.json'
CHECKPOINT_FILE = 'checkpoint.bin'
LAST_GOOD_FILE = 'last_good.bin'

GROUPS = ('source', 'labeled', 'weak', 'strong')


@dataclass
class MetricsRecord:
    """One row of metrics.csv; accuracies are None when evaluation labels are unavailable"""
    step: int
    epoch: int = 0
    lr: float = 0.0
    loss_base: float = 0.0
    loss_intra: float = 0.0
    loss_inter: float = 0.0
    loss_batch: float = 0.0
    loss_total: float = 0.0
    accuracy: Optional[float] = None
    mca: Optional[float] = None
    proto_accuracy: Optional[float] = None
    pl_accuracy: Optional[float] = None
    pl_coverage: float = 0.0
    pl_confident_accuracy: Optional[float] = None
    pl_confident_coverage: float = 0.0
    pl_ot_accuracy: Optional[float] = None
    pl_ot_coverage: float = 0.0
    prototype_drift: float = 0.0
    sinkhorn_unconverged: int = 0

    @classmethod
    def columns(cls) -> List[str]:
        return [f.name for f in dataclasses.fields(cls)]

    def as_row(self) -> List[str]:
        return [_format_cell(getattr(self, name)) for name in self.columns()]

    def as_dict(self) -> Dict:
        return dataclasses.asdict(self)


def _format_cell(value) -> str:
    if value is None:
        return ''
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return '%.17g' % float(value)


@dataclass
class TrainBatch:
    source_x: Matrix
    source_y: np.ndarray
    labeled_x: Matrix
    labeled_y: np.ndarray
    weak_x: Matrix
    strong_x: Matrix
    unlabeled_idx: Optional[np.ndarray] = None
    epoch: int = 0


@dataclass
class GroupForward:
    features: Matrix
    probs: Matrix
    feature_cache: FeatureCache
    classifier_cache: ClassifierCache


@dataclass
class StepForward:
    groups: Dict[str, GroupForward]
    source_y: np.ndarray
    labeled_y: np.ndarray

    def __getitem__(self, name: str) -> GroupForward:
        return self.groups[name]


@dataclass
class Upstream:
    """Loss gradients w.r.t. each group's logits and features, plus the prototype gradient"""
    grad_logits: Dict[str, Matrix] = field(default_factory=dict)
    grad_features: Dict[str, Matrix] = field(default_factory=dict)
    grad_prototypes: Optional[Matrix] = None

    def add(self, kind: str, group: str, g: Matrix):
        target = self.grad_logits if kind == 'logits' else self.grad_features
        target[group] = target[group] + g if group in target else g

    def add_prototypes(self, g: Matrix):
        self.grad_prototypes = g if self.grad_prototypes is None else self.grad_prototypes + g


def forward_batch(model: SsdaModel, batch: TrainBatch) -> StepForward:
    groups = {}
    for name, x in zip(GROUPS, (batch.source_x, batch.labeled_x, batch.weak_x, batch.strong_x)):
        features, f_cache = model.extractor.forward(x)
        probs, c_cache = model.classifier.forward(features)
        groups[name] = GroupForward(features, probs, f_cache, c_cache)
    return StepForward(groups, np.asarray(batch.source_y), np.asarray(batch.labeled_y))


def solve_batch_plan(store: PrototypeSet, weak_features: Matrix, config: RunConfig) -> TransportPlan:
    """gamma_0 between the prototypes and the weak-view features under uniform marginals"""
    problem = TransportProblem(cost=build_cost_matrix(store, weak_features), epsilon=config.ot_epsilon,
                               max_iters=config.ot_max_iters, tolerance=config.ot_tolerance,
                               unbalanced=config.ot_unbalanced)
    return solve_sinkhorn(problem)


def compute_losses(fwd: StepForward, store: PrototypeSet, plan: Optional[TransportPlan],
                   config: RunConfig) -> Tuple[LossReport, Upstream]:
    """Loss report for one step and the gradients it sends into each forward group"""
    sim_cfg = config.similarity_config()
    components = {
        'base': base_loss(fwd['source'].probs, fwd.source_y, fwd['labeled'].probs, fwd.labeled_y,
                          weak_probs=fwd['weak'].probs, strong_probs=fwd['strong'].probs, tau1=config.tau1),
    }
    if config.use_intra and plan is not None and plan.converged:
        components['intra'] = intra_consistency(plan, store, fwd['strong'].features)
    if config.use_inter:
        components['inter'] = inter_alignment(store, fwd['source'].features, fwd.source_y, sim_cfg)

    batch_inputs = None
    if config.use_batch and (config.use_linear_branch or config.use_proto_branch):
        sharpen_cfg = config.sharpen_config()
        batch_inputs = {
            'weak_sharp': sharpen(fwd['weak'].probs, sharpen_cfg),
            'strong_sharp': sharpen(fwd['strong'].probs, sharpen_cfg),
            'weak_proto': similarity_softmax_over_classes(store, fwd['weak'].features, sim_cfg),
            'strong_proto': similarity_softmax_over_classes(store, fwd['strong'].features, sim_cfg),
        }
        components['batch'] = dual_consistency_loss(linear=config.use_linear_branch,
                                                     prototype=config.use_proto_branch, **batch_inputs)

    report = total_loss(components, config.loss_weights())
    g = report.grads
    up = Upstream()
    up.add('logits', 'source', probs_to_logits_grad(fwd['source'].probs, g['source_probs']))
    up.add('logits', 'labeled', probs_to_logits_grad(fwd['labeled'].probs, g['labeled_target_probs']))
    up.add('logits', 'strong', probs_to_logits_grad(fwd['strong'].probs, g['strong_probs']))
    if 'strong_features' in g:
        up.add('features', 'strong', g['strong_features'])
    if 'source_features' in g:
        up.add('features', 'source', g['source_features'])
    if 'prototypes' in g:
        up.add_prototypes(g['prototypes'])
    if batch_inputs is not None:
        # sharpen(softmax(z)) == softmax(z / T2)
        for view in ('weak', 'strong'):
            up.add('logits', view, softmax_backward(batch_inputs[f'{view}_sharp'], g[f'{view}_sharp'], config.t2))
            gf, gp = similarity_over_classes_backward(store, fwd[view].features, batch_inputs[f'{view}_proto'],
                                                      g[f'{view}_proto'], sim_cfg)
            up.add('features', view, gf)
            up.add_prototypes(gp)
    return report, up


def parameter_gradients(model: SsdaModel, fwd: StepForward, up: Upstream) -> Params:
    total: Params = {}
    for name in GROUPS:
        if name not in up.grad_logits and name not in up.grad_features:
            continue
        group = fwd[name]
        grads = backward(model, group.feature_cache, group.classifier_cache,
                         grad_logits=up.grad_logits.get(name), grad_features=up.grad_features.get(name))
        accumulate(total, grads)
    return total


def objective(model: SsdaModel, batch: TrainBatch, store: PrototypeSet, plan: Optional[TransportPlan],
              config: RunConfig) -> Tuple[LossReport, Params]:
    """Weighted loss and its parameter gradients with the plan and prototypes held fixed"""
    fwd = forward_batch(model, batch)
    report, up = compute_losses(fwd, store, plan, config)
    return report, parameter_gradients(model, fwd, up)


def evaluate_predictions(predictions, labels, class_count: Optional[int] = None) -> Tuple[float, float]:
    """(overall accuracy, mean class accuracy over the classes present in labels)"""
    predictions = np.asarray(predictions, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if predictions.shape != labels.shape:
        raise ValueError(f"{predictions.size} predictions for {labels.size} labels")
    if labels.size == 0:
        raise ValueError("cannot evaluate an empty set")
    correct = predictions == labels
    classes = np.unique(labels)
    per_class = [float(np.mean(correct[labels == k])) for k in classes]
    return float(np.mean(correct)), float(np.mean(per_class))


def evaluate_model(model: SsdaModel, store: PrototypeSet, x: Matrix, labels, t1: float = 0.05) -> Dict[str, float]:
    features, probs = model.predict(x)
    accuracy, mca = evaluate_predictions(np.argmax(probs, axis=1), labels)
    proto_probs = similarity_softmax_over_classes(store, features, SimilarityConfig(temperature_t1=t1))
    proto_accuracy, _ = evaluate_predictions(np.argmax(proto_probs, axis=1), labels)
    return {'accuracy': accuracy, 'mca': mca, 'proto_accuracy': proto_accuracy}


def evaluate(checkpoint_path: str, split: SsdaSplit, t1: float = 0.05) -> MetricsRecord:
    """Overall accuracy, MCA and prototype accuracy of a checkpoint on the unlabeled target pool"""
    model, store, step = load_checkpoint(checkpoint_path)
    if model.extractor.input_dim != split.input_dim:
        raise CheckpointError(f"checkpoint expects input dim {model.extractor.input_dim}, "
                              f"split has {split.input_dim}")
    if model.classifier.class_count < split.class_count:
        raise CheckpointError(f"checkpoint has {model.classifier.class_count} classes, "
                              f"split has {split.class_count}")
    if not split.has_eval_labels():
        raise DataFormatError("the unlabeled target pool carries no evaluation labels")
    scores = evaluate_model(model, store, split.target_unlabeled_x, split.evaluation_labels(), t1)
    EVAL_MCA.set(scores['mca'])
    return MetricsRecord(step=step, **scores)


def pl_study_rows(model: SsdaModel, store: PrototypeSet, split: SsdaSplit, config: RunConfig,
                  step: int) -> List[Dict]:
    """Pseudo-label accuracy per strategy with one transport plan over the whole unlabeled pool"""
    features, probs = model.predict(split.target_unlabeled_x)
    plan = solve_batch_plan(store, features, config)
    proto_probs = similarity_softmax_over_classes(store, features, config.similarity_config())
    labels = split.evaluation_labels()
    rows = []
    for strategy in Strategy:
        decisions = strategy_decide(strategy, probs, plan, proto_probs, config.pseudo_label_config())
        accuracy, coverage = pseudo_label_accuracy(decisions, labels)
        rows.append({'step': step, 'strategy': strategy.value, 'accuracy': accuracy, 'coverage': coverage,
                     'plan_converged': plan.converged})
    return rows


def load_split(config: RunConfig) -> SsdaSplit:
    if config.csv_path:
        return load_csv(config.csv_path, class_count=None)
    return generate(config.scenario())


class Trainer:
    """Owns one model, one prototype set and the run artifacts of one configuration"""

    def __init__(self, config: RunConfig, split: Optional[SsdaSplit] = None):
        self.config = config.validate()
        self.split = split if split is not None else load_split(config)
        self.out = config.out
        self.pl_cfg = config.pseudo_label_config()
        self.policy = config.augment_policy()

        self.model = SsdaModel.create(self.split.input_dim, self.split.class_count, config.hidden_dims,
                                      config.feature_dim, seed=config.seed)
        labeled_features, _ = self.model.predict(self.split.target_labeled_x)
        self.store = init_prototypes(labeled_features, self.split.target_labeled_y, self.split.class_count,
                                     momentum=config.alpha)
        self.opt_state: OptimizerState = config.optimizer_state()

        self._source_stream = batch_stream(self.split.source_y.size, config.batch_source,
                                           np.random.default_rng([config.seed, 1]))
        self._labeled_stream = batch_stream(self.split.target_labeled_y.size, config.batch_labeled,
                                            np.random.default_rng([config.seed, 2]))
        self._unlabeled_stream = batch_stream(self.split.target_unlabeled_x.shape[0], config.batch_unlabeled,
                                              np.random.default_rng([config.seed, 3]))

        self.records: List[MetricsRecord] = []
        self._window: List[Tuple[PseudoLabelDecision, int]] = []
        self._window_unconverged = 0
        self._drift_anchor = self.store
        self._audit_rows: List[List[str]] = []
        self.study_rows: List[Dict] = []
        self._last_report: Optional[LossReport] = None
        self._epoch = 0

    def next_batch(self) -> TrainBatch:
        _, _, src = next(self._source_stream)
        _, _, lab = next(self._labeled_stream)
        epoch, b, unl = next(self._unlabeled_stream)
        xu = self.split.target_unlabeled_x[unl]
        return TrainBatch(
            source_x=self.split.source_x[src], source_y=self.split.source_y[src],
            labeled_x=self.split.target_labeled_x[lab], labeled_y=self.split.target_labeled_y[lab],
            weak_x=augment(xu, self.policy, 'weak', epoch, b),
            strong_x=augment(xu, self.policy, 'strong', epoch, b),
            unlabeled_idx=unl, epoch=epoch)

    def step(self, step_index: int) -> LossReport:
        config = self.config
        batch = self.next_batch()
        self._epoch = batch.epoch
        fwd = forward_batch(self.model, batch)
        snapshot = self.store

        plan = solve_batch_plan(snapshot, fwd['weak'].features, config)
        if not plan.converged:
            self._window_unconverged += 1
        decisions = batch_decide(fwd['weak'].probs, plan, self.pl_cfg)

        report, up = compute_losses(fwd, snapshot, plan, config)
        grads = parameter_gradients(self.model, fwd, up)
        self.opt_state = self.model.apply_gradients(grads, self.opt_state)

        store = snapshot
        if config.route_prototype_grads and up.grad_prototypes is not None:
            moved = store.prototypes - self.opt_state.current_lr() * up.grad_prototypes
            moved /= np.maximum(np.linalg.norm(moved, axis=1, keepdims=True), 1e-12)
            store = dataclasses.replace(store, prototypes=moved)
        if config.use_prototype_ema:
            labeled = [i for i, d in enumerate(decisions) if d.labeled]
            features = np.vstack([fwd['labeled'].features, fwd['weak'].features[labeled]])
            labels = np.concatenate([fwd.labeled_y, [decisions[i].assigned for i in labeled]]).astype(np.int64)
            store = ema_update(store, features, labels)
        self.store = store

        self._audit(step_index, batch, decisions)
        self._last_report = report
        LOSS_TOTAL.set(report.total)
        return report

    def _audit(self, step_index: int, batch: TrainBatch, decisions: Sequence[PseudoLabelDecision]):
        truth = self.split.evaluation_labels() if self.split.has_eval_labels() else None
        for idx, d in zip(batch.unlabeled_idx, decisions):
            true = None if truth is None else int(truth[idx])
            self._window.append((d, -1 if true is None else true))
            self._audit_rows.append([str(batch.epoch), str(step_index), str(int(idx)), d.branch.value,
                                     '' if d.assigned is None else str(d.assigned),
                                     '' if true is None else str(true), _format_cell(d.confidence)])

    def record(self, step_index: int) -> MetricsRecord:
        rec = MetricsRecord(step=step_index, epoch=self._epoch, lr=self.opt_state.current_lr(),
                            sinkhorn_unconverged=self._window_unconverged)
        if self._last_report is not None:
            rep = self._last_report
            rec.loss_base, rec.loss_intra, rec.loss_inter = rep.base, rep.intra, rep.inter
            rec.loss_batch, rec.loss_total = rep.batch, rep.total

        if self.split.has_eval_labels():
            scores = evaluate_model(self.model, self.store, self.split.target_unlabeled_x,
                                    self.split.evaluation_labels(), self.config.t1)
            rec.accuracy, rec.mca, rec.proto_accuracy = scores['accuracy'], scores['mca'], scores['proto_accuracy']
            EVAL_MCA.set(rec.mca)
            if self._window:
                decisions = [d for d, _ in self._window]
                truth = [y for _, y in self._window]
                rec.pl_accuracy, rec.pl_coverage = pseudo_label_accuracy(decisions, truth)
                per_branch = branch_accuracy(decisions, truth)
                rec.pl_confident_accuracy, rec.pl_confident_coverage = per_branch[Branch.CONFIDENT]
                rec.pl_ot_accuracy, rec.pl_ot_coverage = per_branch[Branch.OT_PLAN]
            if self.config.full_dataset_ot:
                self.study_rows.extend(pl_study_rows(self.model, self.store, self.split, self.config, step_index))

        rec.prototype_drift = prototype_drift(self._drift_anchor, self.store)
        self._drift_anchor = self.store
        self._window = []
        self._window_unconverged = 0
        self.records.append(rec)
        logger.info(f"step {step_index}: loss {rec.loss_total:.4f} (base {rec.loss_base:.4f}, "
                    f"intra {rec.loss_intra:.4f}, inter {rec.loss_inter:.4f}, batch {rec.loss_batch:.4f}) "
                    f"acc {_fmt_opt(rec.accuracy)} mca {_fmt_opt(rec.mca)} pl-cov {rec.pl_coverage:.2f}")
        return rec

    def run(self) -> MetricsRecord:
        config = self.config
        os.makedirs(self.out, exist_ok=True)
        proc = psutil.Process()
        logger.info(f"Run {config.config_hash()[:12]} -> {self.out} ({config.steps} steps, seed {config.seed}, "
                    f"{psutil.cpu_count(logical=False)} physical cores, "
                    f"rss {proc.memory_info().rss / 2**20:.1f} MiB)")

        self.record(0)
        for step_index in range(1, config.steps + 1):
            started = time.perf_counter()
            try:
                self.step(step_index)
            except NumericalError as e:
                path = save_checkpoint(os.path.join(self.out, LAST_GOOD_FILE), self.model, self.store,
                                       step_index - 1)
                logger.error(f"Numerical abort at step {step_index}: {e}; last good checkpoint {path}")
                self.write_artifacts(final=None)
                raise NumericalError(f"step {step_index}: {e}", checkpoint_path=path) from e
            STEP_DURATION.observe(time.perf_counter() - started)
            TRAIN_STEPS.inc()
            if step_index % config.metrics_every == 0 or step_index == config.steps:
                self.record(step_index)

        final = self.records[-1]
        save_checkpoint(os.path.join(self.out, CHECKPOINT_FILE), self.model, self.store, config.steps)
        self.write_artifacts(final=final)
        return final

    def write_artifacts(self, final: Optional[MetricsRecord]):
        with open(os.path.join(self.out, METRICS_FILE), 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(MetricsRecord.columns())
            writer.writerows(r.as_row() for r in self.records)
        with open(os.path.join(self.out, PSEUDO_LABELS_FILE), 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(['epoch', 'step', 'sample_id', 'branch', 'assigned', 'true', 'confidence'])
            writer.writerows(self._audit_rows)
        if self.config.full_dataset_ot:
            with open(os.path.join(self.out, PL_STUDY_FILE), 'w', newline='', encoding='utf-8') as f:
                writer = csv.writer(f, lineterminator='\n')
                writer.writerow(['step', 'strategy', 'accuracy', 'coverage', 'plan_converged'])
                for row in self.study_rows:
                    writer.writerow([row['step'], row['strategy'], _format_cell(row['accuracy']),
                                     _format_cell(row['coverage']), int(row['plan_converged'])])
        summary = {
            'config_hash': self.config.config_hash(),
            'config': self.config.to_dict(),
            'steps_completed': self.opt_state.step,
            'aborted': final is None,
            'final': None if final is None else final.as_dict(),
        }
        with open(os.path.join(self.out, SUMMARY_FILE), 'wb') as f:
            f.write(orjson.dumps(summary, option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2 |
                                 orjson.OPT_SERIALIZE_NUMPY))


def _fmt_opt(value: Optional[float]) -> str:
    return 'n/a' if value is None else f"{value:.4f}"


def train(config: RunConfig, split: Optional[SsdaSplit] = None) -> MetricsRecord:
    return Trainer(config, split).run()
