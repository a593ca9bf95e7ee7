#!/usr/bin/env python3
"""
Finite-difference check of the training objective's analytic gradients.

Runs a fixed 8-sample, 3-class, d=4 scenario and compares every G/F
parameter gradient (and the prototype gradient) against central differences,
for each loss term alone and for all terms together. Exits 0 when every
relative error is within tolerance, 2 otherwise.
"""

import argparse
import dataclasses
import logging
import sys
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import RunConfig
from model_grad import SsdaModel
from prototype_store import PrototypeSet, init_prototypes
from trainer import TrainBatch, forward_batch, compute_losses, objective, solve_batch_plan

logger = logging.getLogger(__name__)

FD_STEP = 1e-5
TOLERANCE = 1e-4
SAMPLES = 8
CLASSES = 3
FEATURE_DIM = 4
INPUT_DIM = 3

TERMS = {
    'base': dict(use_intra=False, use_inter=False, use_batch=False),
    'intra': dict(use_intra=True, use_inter=False, use_batch=False),
    'inter': dict(use_intra=False, use_inter=True, use_batch=False),
    'batch': dict(use_intra=False, use_inter=False, use_batch=True),
    'all': dict(use_intra=True, use_inter=True, use_batch=True),
}


def central_difference(fn: Callable[[], float], array: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """d fn / d array, perturbing array in place one entry at a time"""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + step
        plus = fn()
        flat[i] = original - step
        minus = fn()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * step)
    return grad


def relative_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def fixed_scenario(seed: int) -> Tuple[SsdaModel, PrototypeSet, TrainBatch]:
    rng = np.random.default_rng(seed)
    model = SsdaModel.create(INPUT_DIM, CLASSES, hidden_dims=(5,), feature_dim=FEATURE_DIM, seed=seed)
    labels = np.arange(SAMPLES) % CLASSES
    x = rng.standard_normal((SAMPLES, INPUT_DIM))
    batch = TrainBatch(
        source_x=rng.standard_normal((SAMPLES, INPUT_DIM)), source_y=labels,
        labeled_x=rng.standard_normal((SAMPLES, INPUT_DIM)), labeled_y=labels,
        weak_x=x + 0.05 * rng.standard_normal(x.shape), strong_x=x + 0.3 * rng.standard_normal(x.shape))
    features, _ = model.predict(batch.labeled_x)
    store = init_prototypes(features, labels, CLASSES)
    return model, store, batch


def gradcheck_config(**mask) -> RunConfig:
    # Thresholds low enough that the confidence-masked term is active at initialisation
    return RunConfig(tau1=0.4, tau2=0.3, **mask).validate()


def check_objective(config: RunConfig, seed: int, step: float = FD_STEP) -> Dict[str, float]:
    """Relative error per parameter block (and 'prototypes') for one seed"""
    model, store, batch = fixed_scenario(seed)
    store = dataclasses.replace(store, prototypes=store.prototypes.copy())
    fwd = forward_batch(model, batch)
    plan = solve_batch_plan(store, fwd['weak'].features, config)
    report, grads = objective(model, batch, store, plan, config)

    def total() -> float:
        return objective(model, batch, store, plan, config)[0].total

    errors = {}
    for name, param in model.parameters().items():
        errors[name] = relative_error(grads[name], central_difference(total, param, step))

    _, up = compute_losses(forward_batch(model, batch), store, plan, config)
    if up.grad_prototypes is not None:
        errors['prototypes'] = relative_error(up.grad_prototypes, central_difference(total, store.prototypes, step))
    return errors


def run_suite(seeds: Sequence[int] = (0,), terms: Optional[Sequence[str]] = None,
              tolerance: float = TOLERANCE) -> Tuple[bool, List[Dict]]:
    rows = []
    for term in terms or TERMS:
        config = gradcheck_config(**TERMS[term])
        for seed in seeds:
            errors = check_objective(config, seed)
            worst_name = max(errors, key=errors.get)
            rows.append({'term': term, 'seed': seed, 'worst': worst_name, 'error': errors[worst_name],
                         'ok': errors[worst_name] <= tolerance})
            if errors[worst_name] > tolerance:
                logger.error(f"{term} seed {seed}: {worst_name} relative error {errors[worst_name]:.3e}")
    return all(r['ok'] for r in rows), rows


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = argparse.ArgumentParser(description="Finite-difference gradient check of the training objective")
    parser.add_argument('--seeds', type=int, default=20, help="number of seeds (0..N-1)")
    parser.add_argument('--term', choices=sorted(TERMS), action='append', help="restrict to these terms")
    parser.add_argument('--tolerance', type=float, default=TOLERANCE)
    args = parser.parse_args(argv)

    ok, rows = run_suite(range(args.seeds), args.term, args.tolerance)
    for term in dict.fromkeys(r['term'] for r in rows):
        worst = max((r for r in rows if r['term'] == term), key=lambda r: r['error'])
        print(f"{term:6s} max rel err {worst['error']:.3e} ({worst['worst']}, seed {worst['seed']})")
    print("Gradient check passed" if ok else "Gradient check FAILED")
    return 0 if ok else 2


if __name__ == '__main__':
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    sys.exit(main())
