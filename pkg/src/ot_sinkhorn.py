"""
Entropic optimal transport between class prototypes and a batch of samples.
Sinkhorn-Knopp scaling runs in the log domain; a brute-force vertex
enumeration of the transportation polytope serves as an exact oracle
for small instances.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from prometheus_client import Counter, Histogram
from scipy.special import logsumexp

from errors import NumericalError
from linalg_core import Matrix, Vector, as_matrix, frobenius_inner
from prototype_store import PrototypeSet

logger = logging.getLogger(__name__)

SINKHORN_ITERATIONS = Histogram('protoshift_sinkhorn_iterations', 'Sinkhorn iterations per solve',
                                buckets=(10, 25, 50, 100, 200, 500, 1000, 5000))
SINKHORN_UNCONVERGED = Counter('protoshift_sinkhorn_unconverged_total', 'Sinkhorn solves that hit max_iters')

EXACT_LP_MAX_CELLS = 16


@dataclass(frozen=True, eq=False)
class TransportProblem:
    """Balanced entropic OT instance; marginals default to uniform"""
    cost: Matrix
    row_marginal: Optional[Vector] = None
    col_marginal: Optional[Vector] = None
    epsilon: float = 0.05
    max_iters: int = 1000
    tolerance: float = 1e-6
    unbalanced: bool = False

    def __post_init__(self):
        cost = as_matrix(self.cost)
        object.__setattr__(self, 'cost', cost)
        k, m = cost.shape
        if self.row_marginal is None:
            object.__setattr__(self, 'row_marginal', np.full(k, 1.0 / k))
        if self.col_marginal is None:
            object.__setattr__(self, 'col_marginal', np.full(m, 1.0 / m))
        object.__setattr__(self, 'row_marginal', np.asarray(self.row_marginal, dtype=np.float64).ravel())
        object.__setattr__(self, 'col_marginal', np.asarray(self.col_marginal, dtype=np.float64).ravel())

    def validate(self):
        if self.unbalanced:
            raise NotImplementedError("unbalanced transport is reserved but not implemented")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if not np.all(np.isfinite(self.cost)):
            raise NumericalError("cost matrix contains non-finite entries")
        _check_marginals(self.cost, self.row_marginal, self.col_marginal)


@dataclass(frozen=True, eq=False)
class TransportPlan:
    """Coupling gamma_0 (K x M) with its marginal certificates"""
    plan: Matrix
    row_residual: float
    col_residual: float
    iterations_used: int
    converged: bool

    @property
    def shape(self):
        return self.plan.shape

    def transport_cost(self, cost) -> float:
        return frobenius_inner(self.plan, cost)


def _check_marginals(cost: Matrix, mu_row: Vector, mu_col: Vector):
    k, m = cost.shape
    if mu_row.shape != (k,) or mu_col.shape != (m,):
        raise ValueError(f"marginal shapes {mu_row.shape}, {mu_col.shape} do not match cost {cost.shape}")
    if np.any(mu_row <= 0) or np.any(mu_col <= 0):
        raise ValueError("marginals must be strictly positive")
    if abs(mu_row.sum() - 1.0) > 1e-9 or abs(mu_col.sum() - 1.0) > 1e-9:
        raise ValueError("marginals must each sum to 1")


def _residuals(plan: Matrix, mu_row: Vector, mu_col: Vector):
    row = float(np.max(np.abs(plan.sum(axis=1) - mu_row)))
    col = float(np.max(np.abs(plan.sum(axis=0) - mu_col)))
    return row, col


def build_cost_matrix(prototypes: PrototypeSet, features) -> Matrix:
    """C[i, j] = 1 - c_i . f_j for unit-norm prototypes and feature rows"""
    features = as_matrix(features)
    if features.shape[1] != prototypes.feature_dim:
        raise ValueError(f"feature dim {features.shape[1]} != prototype dim {prototypes.feature_dim}")
    return np.clip(1.0 - prototypes.prototypes @ features.T, 0.0, 2.0)


def solve_sinkhorn(problem: TransportProblem) -> TransportPlan:
    """Log-domain Sinkhorn-Knopp; returns the best iterate, flagged unconverged at max_iters"""
    problem.validate()
    mu, nu = problem.row_marginal, problem.col_marginal
    log_mu, log_nu = np.log(mu), np.log(nu)
    log_kernel = -problem.cost / problem.epsilon

    u = np.zeros(mu.shape[0])
    v = np.zeros(nu.shape[0])
    best = None
    best_err = np.inf
    iterations = 0
    for iterations in range(1, problem.max_iters + 1):
        u = log_mu - logsumexp(log_kernel + v[None, :], axis=1)
        v = log_nu - logsumexp(log_kernel + u[:, None], axis=0)
        plan = np.exp(log_kernel + u[:, None] + v[None, :])
        row_res, col_res = _residuals(plan, mu, nu)
        err = max(row_res, col_res)
        if err < best_err:
            best, best_err = (plan, row_res, col_res), err
        if err <= problem.tolerance:
            break

    plan, row_res, col_res = best
    converged = best_err <= problem.tolerance
    SINKHORN_ITERATIONS.observe(iterations)
    if not converged:
        SINKHORN_UNCONVERGED.inc()
        logger.warning(f"Sinkhorn did not converge in {problem.max_iters} iterations "
                       f"(residual {best_err:.3e}, epsilon {problem.epsilon})")
    return TransportPlan(plan=plan, row_residual=row_res, col_residual=col_res,
                         iterations_used=iterations, converged=converged)


class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        self.parent[ra] = rb
        return True


def solve_exact_lp(cost, mu_row, mu_col) -> TransportPlan:
    """Exact unregularised optimum by enumerating every basic feasible solution.

    A basis of the K x M transportation polytope is a set of K + M - 1 cells
    forming a spanning tree of the row/column bipartite graph; each one is
    solved directly and the cheapest feasible vertex wins (first found on ties).
    """
    cost = as_matrix(cost)
    mu_row = np.asarray(mu_row, dtype=np.float64).ravel()
    mu_col = np.asarray(mu_col, dtype=np.float64).ravel()
    k, m = cost.shape
    if k * m > EXACT_LP_MAX_CELLS:
        raise ValueError(f"exact LP oracle limited to {EXACT_LP_MAX_CELLS} cells, got {k}x{m}")
    if not np.all(np.isfinite(cost)):
        raise NumericalError("cost matrix contains non-finite entries")
    _check_marginals(cost, mu_row, mu_col)

    cells = [(i, j) for i in range(k) for j in range(m)]
    rank = k + m - 1
    # Row/column constraints; the last one is implied by the others
    rhs = np.concatenate([mu_row, mu_col])[:-1]

    best_plan, best_obj, vertices = None, np.inf, 0
    for basis in itertools.combinations(range(len(cells)), rank):
        forest = _DisjointSet(k + m)
        if not all(forest.union(cells[c][0], k + cells[c][1]) for c in basis):
            continue
        system = np.zeros((k + m, rank))
        for col, c in enumerate(basis):
            i, j = cells[c]
            system[i, col] = 1.0
            system[k + j, col] = 1.0
        x = np.linalg.solve(system[:-1], rhs)
        if np.any(x < -1e-12):
            continue
        vertices += 1
        plan = np.zeros((k, m))
        for col, c in enumerate(basis):
            plan[cells[c]] = max(x[col], 0.0)
        obj = frobenius_inner(plan, cost)
        if obj < best_obj - 1e-15:
            best_plan, best_obj = plan, obj

    row_res, col_res = _residuals(best_plan, mu_row, mu_col)
    return TransportPlan(plan=best_plan, row_residual=row_res, col_residual=col_res,
                         iterations_used=vertices, converged=True)


def plan_column_argmax(plan: TransportPlan, j: int) -> int:
    """Class receiving the most mass of sample j (lowest index on ties)"""
    gamma = plan.plan if isinstance(plan, TransportPlan) else as_matrix(plan)
    if not 0 <= j < gamma.shape[1]:
        raise IndexError(f"column {j} out of range for plan with {gamma.shape[1]} columns")
    column = gamma[:, j]
    if not np.any(column > 0):
        raise NumericalError(f"plan column {j} carries no mass")
    return int(np.argmax(column))
