"""Exact minimal adversarial perturbation for Mahalanobis 1-NN.

For each candidate training point of another class, the smallest
perturbation making the test point at least as close to the candidate
as to every same-class training point is a nonnegative QP with linear
constraints. Its dual is solved by greedy coordinate descent (the dual
solution is sparse: few constraints are active). Candidates are visited
in ascending distance order and skipped whenever a cheap closed-form
lower bound already exceeds the best perturbation found, which prunes
most of the QPs without changing the result.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .certify import DENOMINATOR_GUARD
from .dataset import Dataset
from .metric import MetricFactor, sq_dists_to_point

logger = logging.getLogger(__name__)

# constraint rows with ||M (x_i - x_j)|| below this are duplicates of the
# candidate point under the metric and carry no information
ROW_DROP_THRESHOLD = 1e-12

# returned perturbations satisfy every constraint to within this slack
# in squared-distance units
FEASIBILITY_TARGET = 2e-8

_SCREEN_BLOCK = 512


@dataclass(frozen=True)
class GcdResult:
    lam: np.ndarray
    value: float
    converged: bool
    iterations: int


def _default_tol(q: np.ndarray) -> float:
    scale = float(np.max(np.abs(q))) if q.size else 0.0
    return 1e-9 * (1.0 + scale)


def gcd_qp(P: np.ndarray, q: np.ndarray, max_iters: int | None = None,
           tol: float | None = None) -> GcdResult:
    """Greedy coordinate descent for min_{x >= 0} 0.5 x'Px + q'x.

    Each iteration computes the exact coordinate minimizer step
    y_i = max(x_i - g_i / P_ii, 0) - x_i for every coordinate, applies
    the one with the largest magnitude, and stops when that magnitude
    (the per-coordinate KKT violation) falls below tol. Coordinates
    with P_ii = 0 stay at 0 when q_i >= 0; with q_i < 0 the problem is
    unbounded along that axis, and a diminishing step is taken so the
    divergence is gradual rather than a division error.
    """
    P = np.asarray(P, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    s = q.shape[0]
    if P.shape != (s, s):
        raise ValueError(f"P shape {P.shape} does not match q length {s}")
    diag = P.diagonal().copy()
    if np.any(diag < 0):
        raise ValueError("P has negative diagonal entries")
    if tol is None:
        tol = _default_tol(q)
    if max_iters is None:
        max_iters = 20 * s * max(s, 10)

    x = np.zeros(s)
    g = q.copy()
    zero_diag = diag == 0.0
    safe_diag = np.where(zero_diag, 1.0, diag)
    converged = False
    t = 0
    for t in range(max_iters):
        y = np.maximum(x - g / safe_diag, 0.0) - x
        if np.any(zero_diag):
            y[zero_diag] = np.maximum(-g[zero_diag], 0.0) / (t + 1.0)
        i = int(np.argmax(np.abs(y)))
        if abs(y[i]) < tol:
            converged = True
            break
        x[i] += y[i]
        g += y[i] * P[:, i]
    value = float(0.5 * (x @ P @ x) + q @ x)
    return GcdResult(lam=x, value=value, converged=converged,
                     iterations=t + (0 if converged else 1))


def _gcd_qp_gram(A: np.ndarray, q: np.ndarray, max_iters: int,
                 tol: float, x0: np.ndarray | None = None
                 ) -> tuple[np.ndarray, float, bool]:
    """Greedy coordinate descent on the implicit Gram form P = 0.5 A A'.

    Identical iteration to gcd_qp, but P columns are formed on demand,
    which is cheaper when few coordinates ever move. Supports warm
    starts so a solve can be resumed with a tighter tolerance.
    """
    s = q.shape[0]
    diag = 0.5 * np.einsum("ij,ij->i", A, A)
    if x0 is None:
        x = np.zeros(s)
        g = q.copy()
    else:
        x = x0.copy()
        g = 0.5 * (A @ (A.T @ x)) + q
    converged = False
    cols: dict[int, np.ndarray] = {}  # Gram columns formed so far
    for _ in range(max_iters):
        y = np.maximum(x - g / diag, 0.0) - x
        i = int(np.argmax(np.abs(y)))
        if abs(y[i]) < tol:
            converged = True
            break
        col = cols.get(i)
        if col is None:
            col = 0.5 * (A @ A[i])
            cols[i] = col
        x[i] += y[i]
        g += y[i] * col
    half_At_x = 0.5 * (A.T @ x)
    value = float(half_At_x @ half_At_x + q @ x)
    return x, value, converged


def _solve_constraint_qp(A: np.ndarray, b: np.ndarray,
                         dim: int, max_iters: int | None = None
                         ) -> tuple[float, np.ndarray, bool]:
    """Minimal ||delta|| subject to A delta <= b, via the dual.

    Rows of A with negligible norm are dropped (they encode vacuous
    constraints from duplicate points); the rest are normalized to unit
    norm, an equivalent rescaling that keeps the stopping tolerance
    meaningful across metric scales. The primal perturbation is
    recovered as delta = -0.5 A' lambda; on non-convergence the solve
    is retried with a tenfold iteration budget before giving up.
    """
    row_sq = np.einsum("ij,ij->i", A, A)
    keep = row_sq >= ROW_DROP_THRESHOLD ** 2
    A = A[keep]
    b = b[keep]
    if A.shape[0] == 0:
        return 0.0, np.zeros(dim), True
    norms = np.sqrt(row_sq[keep])
    A = A / norms[:, None]
    b = b / norms
    s = A.shape[0]
    if max_iters is None:
        max_iters = 20 * s * dim
    tol = 1e-9 * (1.0 + float(np.max(np.abs(b))))
    tol_floor = 1e-15 * (1.0 + float(np.max(np.abs(b))))
    budget = max_iters
    lam = None
    converged = False
    for _ in range(8):
        lam, _, converged = _gcd_qp_gram(A, b, budget, tol, x0=lam)
        if not converged:
            budget *= 10
            continue
        delta = -0.5 * (A.T @ lam)
        # constraint slack in distance units; refine until comfortably
        # inside the feasibility tolerance of downstream checks
        viol = float(np.max(2.0 * norms * (A @ delta - b), initial=0.0))
        if viol <= FEASIBILITY_TARGET or tol <= tol_floor:
            break
        tol = max(0.05 * tol, tol_floor)
    if not converged:
        logger.warning("dual QP did not converge within %d iterations; "
                       "value is not certified", budget)
    delta = -0.5 * (A.T @ lam)
    return float(np.linalg.norm(delta)), delta, converged


class Exact1NNSolver:
    """Per-dataset context for exact 1-NN minimal perturbations.

    Caches the metric-transformed training set and per-class indices so
    repeated queries against the same model stay cheap.
    """

    def __init__(self, train: Dataset, metric: MetricFactor,
                 screening: bool = True):
        if metric.dim != train.num_features:
            raise ValueError("metric dimension does not match training data")
        self.train = train
        self.metric = metric
        self.screening = screening
        self.Xg = metric.transform(train.features)
        self.Xm = train.features @ metric.matrix
        self._xm_sq = np.einsum("ij,ij->i", self.Xm, self.Xm)
        self.labels = train.labels
        self._class_idx = [np.flatnonzero(self.labels == c)
                           for c in range(train.num_classes)]

    def _dists_to(self, x: np.ndarray) -> np.ndarray:
        xg = self.metric.transform(x[None, :])[0]
        return sq_dists_to_point(self.Xg, xg)

    def _same_indices(self, y: int, exclude: int | None) -> np.ndarray:
        same = self._class_idx[y]
        if exclude is not None:
            same = same[same != exclude]
        return same

    def _screen_bounds(self, same: np.ndarray, cand: np.ndarray,
                       dists: np.ndarray) -> np.ndarray:
        """Closed-form lower bound per candidate: the largest clamped
        triplet value over same-class instances."""
        if same.size == 0:
            return np.zeros(cand.shape[0])
        den = self.Xm[same] @ self.Xm[cand].T
        den *= -2.0
        den += self._xm_sq[same][:, None]
        den += self._xm_sq[cand][None, :]
        np.maximum(den, 0.0, out=den)
        np.sqrt(den, out=den)
        num = dists[cand][None, :] - dists[same][:, None]
        if float(den.min()) < DENOMINATOR_GUARD:
            # degenerate pairs (duplicates under M) contribute nothing
            num[den < DENOMINATOR_GUARD] = 0.0
            np.maximum(den, DENOMINATOR_GUARD, out=den)
        den *= 2.0
        num /= den
        np.maximum(num, 0.0, out=num)
        return num.max(axis=0)

    def inner_minimal_perturbation(self, x: np.ndarray, y: int, j: int,
                                   exclude: int | None = None
                                   ) -> tuple[float, np.ndarray]:
        """Smallest perturbation making x at least as close to training
        point j (of a different class) as to every same-class point."""
        x = np.asarray(x, dtype=np.float64)
        if int(self.labels[j]) == y:
            raise ValueError(f"candidate {j} has the protected class {y}")
        same = self._same_indices(y, exclude)
        if same.size == 0:
            raise ValueError(f"no same-class instance of class {y} available")
        dists = self._dists_to(x)
        eps, delta, _ = self._solve_candidate(x, same, j, dists)
        return eps, delta

    def _solve_candidate(self, x: np.ndarray, same: np.ndarray, j: int,
                         dists: np.ndarray
                         ) -> tuple[float, np.ndarray, bool]:
        A = self.Xm[same] - self.Xm[j]
        b = 0.5 * (dists[same] - dists[j])
        return _solve_constraint_qp(A, b, x.shape[0])

    def minimal_perturbation(self, x: np.ndarray, y: int,
                             exclude: int | None = None
                             ) -> tuple[float, np.ndarray]:
        """Exact minimal perturbation norm and an achieving perturbation.

        Returns (0, zero vector) when x is not classified as y in the
        first place. Candidates are visited nearest-first and pruned
        against the incumbent with the closed-form screening bound.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.train.num_features,):
            raise ValueError("query dimension mismatch")
        same = self._same_indices(y, exclude)
        if same.size == 0:
            raise ValueError(f"no same-class instance of class {y} available")
        diff = np.flatnonzero(self.labels != y)
        if diff.size == 0:
            raise ValueError("training data has no other class")

        dists = self._dists_to(x)
        if exclude is not None:
            dists = dists.copy()
            dists[exclude] = np.inf
        nearest = int(np.argmin(dists))
        if int(self.labels[nearest]) != y:
            return 0.0, np.zeros_like(x)

        order = np.argsort(dists[diff], kind="stable")
        cand = diff[order]
        best = np.inf
        best_delta = np.zeros_like(x)
        for start in range(0, cand.size, _SCREEN_BLOCK):
            block = cand[start:start + _SCREEN_BLOCK]
            if self.screening:
                lb = self._screen_bounds(same, block, dists)
            else:
                lb = np.full(block.shape[0], -np.inf)
            for idx, j in enumerate(block):
                if lb[idx] >= best:
                    continue
                eps_j, delta_j, _ = self._solve_candidate(
                    x, same, int(j), dists)
                if eps_j < best:
                    best = eps_j
                    best_delta = delta_j
        return float(best), best_delta


def inner_minimal_perturbation(train: Dataset, m: MetricFactor,
                               x: np.ndarray, y: int, j: int,
                               exclude: int | None = None
                               ) -> tuple[float, np.ndarray]:
    return Exact1NNSolver(train, m).inner_minimal_perturbation(
        x, y, j, exclude=exclude)


def exact_minimal_perturbation(train: Dataset, m: MetricFactor,
                               x: np.ndarray, y: int,
                               exclude: int | None = None,
                               screening: bool = True
                               ) -> tuple[float, np.ndarray]:
    return Exact1NNSolver(train, m, screening=screening).minimal_perturbation(
        x, y, exclude=exclude)


def minimal_perturbation_for_pairs(train: Dataset, m: MetricFactor,
                                   x: np.ndarray,
                                   pairs: list[tuple[int, int]]
                                   ) -> tuple[float, np.ndarray]:
    """Minimal perturbation subject to one closeness constraint per
    (protected index i, target index j) pair: x + delta must end up at
    least as close to x_j as to x_i. Generalizes the per-candidate
    solve to arbitrary constraint sets.
    """
    x = np.asarray(x, dtype=np.float64)
    Xm = train.features @ m.matrix
    Xg = m.transform(train.features)
    dists = sq_dists_to_point(Xg, m.transform(x[None, :])[0])
    i_idx = np.array([p[0] for p in pairs], dtype=np.int64)
    j_idx = np.array([p[1] for p in pairs], dtype=np.int64)
    A = Xm[i_idx] - Xm[j_idx]
    b = 0.5 * (dists[i_idx] - dists[j_idx])
    eps, delta, _ = _solve_constraint_qp(A, b, x.shape[0])
    return eps, delta
