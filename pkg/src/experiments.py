"""
Multi-seed suites over the trainer: the component ablation, the prototype
branch ablation, the tau2 sensitivity sweep, the labeled-shots sweep and the
pseudo-label strategy study. Member runs are isolated (own model, own RNG
streams, own output directory) and may run on parallel worker processes.
"""

import csv
import logging
import os
from collections import OrderedDict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import orjson
import psutil
from scipy.stats import spearmanr

from config import RunConfig
from errors import ConfigError
from trainer import Trainer

logger = logging.getLogger(__name__)

SUITE_SEEDS = (0, 1, 2, 3, 4)
DEFAULT_TAU2_VALUES = (0.1, 0.2, 0.3, 0.4, 0.5)
DEFAULT_SHOTS = (1, 3, 5, 10)
REPORTED = ('accuracy', 'mca', 'proto_accuracy', 'loss_base', 'loss_intra', 'loss_inter', 'loss_batch')

# (intra, inter, batch) for each component-ablation row
COMPONENT_ROWS = OrderedDict([
    ('base', (False, False, False)),
    ('intra', (True, False, False)),
    ('inter', (False, True, False)),
    ('batch', (False, False, True)),
    ('inter+batch', (False, True, True)),
    ('intra+batch', (True, False, True)),
    ('intra+inter', (True, True, False)),
    ('full', (True, True, True)),
])

# (linear branch, prototype branch, prototype EMA) with every loss term on
PROTOTYPE_ROWS = OrderedDict([
    ('linear', (True, False, False)),
    ('prototype+ema', (False, True, True)),
    ('linear+ema', (True, False, True)),
    ('linear+prototype', (True, True, False)),
    ('linear+prototype+ema', (True, True, True)),
])


@dataclass
class MemberResult:
    label: str
    seed: int
    config_hash: str
    final: Dict[str, Any]
    study: List[Dict[str, Any]] = field(default_factory=list)


@dataclass
class SuiteResult:
    """Per-run rows and the per-label aggregate (mean and sample std over seeds)"""
    runs: List[Dict[str, Any]]
    summary: List[Dict[str, Any]]
    extra: Dict[str, Any] = field(default_factory=dict)


def mean_std(values: Sequence[Optional[float]]) -> Tuple[Optional[float], Optional[float]]:
    vals = [float(v) for v in values if v is not None and np.isfinite(v)]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0


def resolve_workers(config: RunConfig, jobs: int) -> int:
    workers = config.workers or psutil.cpu_count(logical=False) or 1
    return max(1, min(workers, jobs))


def _run_member(label: str, config: RunConfig) -> MemberResult:
    trainer = Trainer(config)
    final = trainer.run()
    return MemberResult(label, config.seed, config.config_hash(), final.as_dict(), list(trainer.study_rows))


def run_members(members: Sequence[Tuple[str, RunConfig]], workers: int) -> List[MemberResult]:
    """Results come back in submission order whatever the worker count"""
    if workers <= 1:
        return [_run_member(label, cfg) for label, cfg in members]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_member, label, cfg) for label, cfg in members]
        return [f.result() for f in futures]


def _member(base: RunConfig, label: str, seed: int, **changes) -> Tuple[str, RunConfig]:
    out = os.path.join(base.out, label.replace('+', '_').replace('=', '_').replace(':', '_'), f"seed{seed}")
    return label, base.with_overrides(seed=seed, out=out, **changes).validate()


def _summarise(results: Sequence[MemberResult], labels: Sequence[str],
               row_info: Dict[str, Dict[str, Any]]) -> List[Dict[str, Any]]:
    summary = []
    for label in labels:
        group = [r for r in results if r.label == label]
        row = OrderedDict(label=label)
        row.update(row_info.get(label, {}))
        row['seeds'] = len(group)
        for key in REPORTED:
            row[f"{key}_mean"], row[f"{key}_std"] = mean_std([r.final.get(key) for r in group])
        summary.append(row)
    return summary


def _run_rows(results: Sequence[MemberResult], row_info: Dict[str, Dict[str, Any]]) -> List[Dict[str, Any]]:
    rows = []
    for r in results:
        row = OrderedDict(label=r.label, seed=r.seed)
        row.update(row_info.get(r.label, {}))
        row['config_hash'] = r.config_hash
        row.update((key, r.final.get(key)) for key in REPORTED)
        rows.append(row)
    return rows


def write_rows(path: str, rows: Sequence[Dict[str, Any]]):
    if not rows:
        return
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        fieldnames = list(dict.fromkeys(k for row in rows for k in row))
        writer = csv.DictWriter(f, fieldnames=fieldnames, lineterminator='\n')
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(v) for k, v in row.items()})


def _cell(value):
    if value is None:
        return ''
    if isinstance(value, bool):
        return int(value)
    if isinstance(value, float):
        return '%.17g' % value
    return value


def _write_suite(base: RunConfig, name: str, result: SuiteResult) -> SuiteResult:
    os.makedirs(base.out, exist_ok=True)
    write_rows(os.path.join(base.out, f"{name}_runs.csv"), result.runs)
    write_rows(os.path.join(base.out, f"{name}.csv"), result.summary)
    with open(os.path.join(base.out, f"{name}.json"), 'wb') as f:
        f.write(orjson.dumps({'base_config_hash': base.config_hash(), 'summary': result.summary, **result.extra},
                             option=orjson.OPT_SORT_KEYS | orjson.OPT_INDENT_2))
    return result


def ablation_suite(base: RunConfig, seeds: Sequence[int] = SUITE_SEEDS,
                   include_prototype_rows: bool = True) -> SuiteResult:
    """Every on/off combination of the three auxiliary losses, plus the prototype-branch rows"""
    members, row_info = [], {}
    for label, (intra, inter, batch) in COMPONENT_ROWS.items():
        changes = dict(use_intra=intra, use_inter=inter, use_batch=batch)
        row_info[label] = dict(changes, use_linear_branch=base.use_linear_branch,
                               use_proto_branch=base.use_proto_branch, use_prototype_ema=base.use_prototype_ema,
                               config_hash=base.with_overrides(**changes).config_hash())
        members.extend(_member(base, label, s, **changes) for s in seeds)
    if include_prototype_rows:
        for name, (linear, proto, ema) in PROTOTYPE_ROWS.items():
            label = f"proto:{name}"
            changes = dict(use_intra=True, use_inter=True, use_batch=True, use_linear_branch=linear,
                           use_proto_branch=proto, use_prototype_ema=ema)
            row_info[label] = dict(changes, config_hash=base.with_overrides(**changes).config_hash())
            members.extend(_member(base, label, s, **changes) for s in seeds)

    logger.info(f"Ablation: {len(row_info)} rows x {len(seeds)} seeds")
    results = run_members(members, resolve_workers(base, len(members)))
    hashes = {label: info.pop('config_hash') for label, info in row_info.items()}
    summary = _summarise(results, list(row_info), row_info)
    for row in summary:
        row['config_hash'] = hashes[row['label']]
    return _write_suite(base, 'ablation', SuiteResult(_run_rows(results, row_info), summary))


def tau2_sweep(base: RunConfig, values: Sequence[float] = DEFAULT_TAU2_VALUES,
               seeds: Sequence[int] = SUITE_SEEDS) -> SuiteResult:
    """MCA against tau2; a tau2 == tau1 point is always included as the no-transport control"""
    values = [float(v) for v in values]
    bad = [v for v in values if not 0.0 <= v <= base.tau1]
    if bad:
        raise ConfigError(f"tau2 values {bad} fall outside [0, tau1={base.tau1}]")
    if base.tau1 not in values:
        values.append(base.tau1)

    members, row_info = [], OrderedDict()
    for v in values:
        label = f"tau2={v:g}"
        row_info[label] = {'tau2': v, 'control': v == base.tau1}
        members.extend(_member(base, label, s, tau2=v) for s in seeds)
    results = run_members(members, resolve_workers(base, len(members)))
    summary = _summarise(results, list(row_info), row_info)

    active = [row['mca_mean'] for row in summary if not row['control'] and row['mca_mean'] is not None]
    control = next(row['mca_mean'] for row in summary if row['control'])
    extra = {
        'active_mca_range': (max(active) - min(active)) if active else None,
        'active_mca_min': min(active) if active else None,
        'control_mca': control,
    }
    return _write_suite(base, 'tau2_sweep', SuiteResult(_run_rows(results, row_info), summary, extra))


def shots_sweep(base: RunConfig, shot_counts: Sequence[int] = DEFAULT_SHOTS,
                seeds: Sequence[int] = SUITE_SEEDS) -> SuiteResult:
    """Accuracy against labeled shots per class; the unlabeled pool size stays fixed"""
    shot_counts = [int(k) for k in shot_counts]
    if not shot_counts or min(shot_counts) < 1:
        raise ConfigError("shot counts must all be >= 1")
    unlabeled = base.target_samples - base.shots * base.class_count

    members, row_info = [], OrderedDict()
    for k in shot_counts:
        label = f"shots={k}"
        row_info[label] = {'shots': k}
        members.extend(_member(base, label, s, shots=k, target_samples=unlabeled + k * base.class_count)
                       for s in seeds)
    results = run_members(members, resolve_workers(base, len(members)))
    summary = _summarise(results, list(row_info), row_info)

    means = [row['mca_mean'] for row in summary]
    rho = None
    if len(shot_counts) > 1 and all(m is not None for m in means):
        rho, _ = spearmanr(shot_counts, means)
        rho = float(rho)
        rho = None if not np.isfinite(rho) else rho
    logger.info(f"Shots sweep: Spearman rho of mean MCA vs shots = {rho}")
    return _write_suite(base, 'shots_sweep', SuiteResult(_run_rows(results, row_info), summary,
                                                         {'spearman_rho': rho}))


def pl_study(base: RunConfig, seeds: Sequence[int] = SUITE_SEEDS) -> SuiteResult:
    """Pseudo-label accuracy of the linear, prototype and transport rules at matched coverage"""
    members = [_member(base, 'pl-study', s, full_dataset_ot=True) for s in seeds]
    results = run_members(members, resolve_workers(base, len(members)))

    runs = []
    for r in results:
        for row in r.study:
            runs.append(OrderedDict(seed=r.seed, **row))
    summary = []
    keys = OrderedDict(((row['step'], row['strategy']), None) for row in runs)
    for step, strategy in keys:
        group = [row for row in runs if row['step'] == step and row['strategy'] == strategy]
        acc_mean, acc_std = mean_std([row['accuracy'] for row in group])
        cov_mean, cov_std = mean_std([row['coverage'] for row in group])
        summary.append(OrderedDict(step=step, strategy=strategy, seeds=len(group), accuracy_mean=acc_mean,
                                   accuracy_std=acc_std, coverage_mean=cov_mean, coverage_std=cov_std))
    final_step = max((row['step'] for row in summary), default=None)
    extra = {'final': {row['strategy']: row['accuracy_mean'] for row in summary if row['step'] == final_step}}
    return _write_suite(base, 'pl_study', SuiteResult(runs, summary, extra))
