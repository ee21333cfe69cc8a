"""Robustness certification for Mahalanobis K-NN.

Per-instance lower bounds on the minimal adversarial l2 perturbation:
the closed-form triplet bound, its kth-min/kth-max aggregation over
training pairs (sound for any K and any number of classes), and
robust-error curves over a radius grid.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .knn import KnnModel
from .metric import MetricFactor, pairwise_sq_dists, sq_dists_to_point

# below this value of ||M (x+ - x-)|| the triplet is treated as degenerate
DENOMINATOR_GUARD = 1e-12


@dataclass(frozen=True)
class CertificationResult:
    """Per-instance lower bounds (l2 norm units), clamped at 0."""

    lower_bounds: np.ndarray
    is_exact: np.ndarray

    def __post_init__(self):
        if self.lower_bounds.shape != self.is_exact.shape:
            raise ValueError("lower_bounds and is_exact must align")
        if np.any(self.lower_bounds < 0):
            raise ValueError("lower bounds must be nonnegative")


@dataclass(frozen=True)
class RobustErrorCurve:
    """Robust error as a function of the perturbation radius."""

    radii: tuple[float, ...]
    errors: tuple[float, ...]
    kind: str  # "certified" | "empirical"

    def __post_init__(self):
        if len(self.radii) != len(self.errors):
            raise ValueError("radii and errors must have equal length")
        if any(r < 0 for r in self.radii):
            raise ValueError("radii must be nonnegative")
        if any(b < a for a, b in zip(self.radii, self.radii[1:])):
            raise ValueError("radii must be ascending")
        if self.kind not in ("certified", "empirical"):
            raise ValueError(f"unknown curve kind {self.kind!r}")

    def to_csv(self, radius_strings: list[str] | None = None) -> str:
        if radius_strings is None:
            radius_strings = [format(r, "g") for r in self.radii]
        lines = ["radius,robust_error"]
        for rs, e in zip(radius_strings, self.errors):
            lines.append(f"{rs},{e:.6f}")
        return "\n".join(lines) + "\n"

    def write_csv(self, path, radius_strings: list[str] | None = None):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv(radius_strings))


def curve_from_bounds(bounds: np.ndarray, radii, kind: str) -> RobustErrorCurve:
    """Robust error at radius r = fraction of instances with bound <= r."""
    bounds = np.asarray(bounds, dtype=np.float64)
    errors = tuple(float(np.mean(bounds <= r)) for r in radii)
    return RobustErrorCurve(radii=tuple(float(r) for r in radii),
                            errors=errors, kind=kind)


def triplet_epsilon(x_plus: np.ndarray, x_minus: np.ndarray,
                    x: np.ndarray, m: MetricFactor) -> float:
    """Signed minimal-perturbation bound of the triplet problem.

    Value: (d_M(x,x-) - d_M(x,x+)) / (2 ||M (x+ - x-)||). The positive
    part is the norm of the smallest perturbation making x at least as
    close to x- as to x+; a nonpositive value means no perturbation is
    needed. Returns 0 when x+ and x- coincide under M (the constraint
    then holds with equality everywhere).
    """
    x_plus = np.asarray(x_plus, dtype=np.float64)
    x_minus = np.asarray(x_minus, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    d = m.dim
    if x_plus.shape != (d,) or x_minus.shape != (d,) or x.shape != (d,):
        raise ValueError("dimension mismatch in triplet inputs")
    u = x_plus - x_minus
    denom = float(np.linalg.norm(m.matrix @ u))
    if denom < DENOMINATOR_GUARD:
        return 0.0
    vp = x - x_plus
    vm = x - x_minus
    num = float(vm @ m.matrix @ vm) - float(vp @ m.matrix @ vp)
    return num / (2.0 * denom)


def _eps_tilde_matrix(Xm_same, Xm_diff, d_same, d_diff,
                      sq_same=None, sq_diff=None) -> np.ndarray:
    """Triplet values for all (same-class i, other-class j) pairs.

    Entry [i, j] uses x+ = x_i, x- = x_j; d_same/d_diff are the metric
    distances from the test point to each candidate. Degenerate pairs
    (coincident under the metric) get value 0.
    """
    if sq_same is None:
        sq_same = np.einsum("ij,ij->i", Xm_same, Xm_same)
    if sq_diff is None:
        sq_diff = np.einsum("ij,ij->i", Xm_diff, Xm_diff)
    den = Xm_same @ Xm_diff.T
    den *= -2.0
    den += sq_same[:, None]
    den += sq_diff[None, :]
    np.maximum(den, 0.0, out=den)
    np.sqrt(den, out=den)
    num = d_diff[None, :] - d_same[:, None]
    if den.size and float(den.min()) < DENOMINATOR_GUARD:
        num[den < DENOMINATOR_GUARD] = 0.0
        np.maximum(den, DENOMINATOR_GUARD, out=den)
    den *= 2.0
    num /= den
    return num


def _kth_largest_per_column(E: np.ndarray, k: int) -> np.ndarray:
    """Partitions E in place along axis 0."""
    s = E.shape[0]
    if s >= k:
        E.partition(s - k, axis=0)
        return E[s - k, :]
    # fewer than k same-class instances: fall back to the s-th largest
    # (the minimum), which only loosens the bound soundly
    return E.min(axis=0)


def _kth_smallest(v: np.ndarray, k: int) -> float:
    return float(np.partition(v, k - 1)[k - 1])


def _bound_from_dists(model: KnnModel, Xm: np.ndarray, d_all: np.ndarray,
                      y: int, exclude: int | None,
                      groups: dict | None = None) -> float:
    k = (model.k_neighbors + 1) // 2
    if groups is not None and exclude is None:
        same, diff, sq_same, sq_diff = groups[y]
    else:
        labels = model.train.labels
        same = np.flatnonzero(labels == y)
        if exclude is not None:
            same = same[same != exclude]
        diff = np.flatnonzero(labels != y)
        sq_same = sq_diff = None
    if same.size < 1:
        raise ValueError(f"no instance of class {y} available")
    if diff.size < k:
        raise ValueError(
            f"need at least {k} instances of other classes, "
            f"found {diff.size}")
    E = _eps_tilde_matrix(Xm[same], Xm[diff], d_all[same], d_all[diff],
                          sq_same, sq_diff)
    col_vals = _kth_largest_per_column(E, k)
    return _kth_smallest(col_vals, k)


def _class_groups(labels: np.ndarray, num_classes: int,
                  Xm: np.ndarray) -> dict:
    xm_sq = np.einsum("ij,ij->i", Xm, Xm)
    groups = {}
    for c in range(num_classes):
        same = np.flatnonzero(labels == c)
        diff = np.flatnonzero(labels != c)
        groups[c] = (same, diff, xm_sq[same], xm_sq[diff])
    return groups


def knn_lower_bound(model: KnnModel, x: np.ndarray, y: int,
                    exclude: int | None = None) -> float:
    """Signed lower bound on the minimal perturbation flipping the K-NN
    prediction away from class y.

    Evaluates the triplet value for every (same-class, other-class)
    pair, takes the k-th largest over same-class instances per
    candidate and the k-th smallest over candidates, k = (K+1)/2.
    O(N^2) per query and independent of K. Nonpositive results indicate
    the instance is (or is nearly) misclassified already.
    """
    x = np.asarray(x, dtype=np.float64)
    Xm = model.train.features @ model.metric.matrix
    xg = model.metric.transform(x[None, :])[0]
    d_all = sq_dists_to_point(model.train_transformed, xg)
    return _bound_from_dists(model, Xm, d_all, y, exclude)


def certification_bounds(model: KnnModel, test: Dataset,
                         mode: str = "theorem1",
                         threads: int = 1) -> CertificationResult:
    """Per-instance certified lower bounds for a test set.

    mode "theorem1" uses the pairwise aggregation bound for any odd K;
    mode "exact1nn" computes the exact minimal perturbation (K=1 only).
    """
    if mode not in ("theorem1", "exact1nn"):
        raise ValueError(f"unknown certification mode {mode!r}")
    if test.num_features != model.train.num_features:
        raise ValueError("test feature dimension does not match training")
    n = test.num_instances
    bounds = np.zeros(n)

    if mode == "exact1nn":
        if model.k_neighbors != 1:
            raise ValueError("exact certification requires K=1")
        from .exact_1nn import Exact1NNSolver

        solver = Exact1NNSolver(model.train, model.metric)

        def work(i: int) -> float:
            eps, _ = solver.minimal_perturbation(
                test.features[i], int(test.labels[i]))
            return eps

        exact = True
    else:
        Xm = model.train.features @ model.metric.matrix
        Qg = model.metric.transform(test.features)
        groups = _class_groups(model.train.labels,
                               model.train.num_classes, Xm)

        def work(i: int) -> float:
            d_all = sq_dists_to_point(model.train_transformed, Qg[i])
            return _bound_from_dists(model, Xm, d_all,
                                     int(test.labels[i]), None, groups)

        exact = False

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for i, v in enumerate(pool.map(work, range(n))):
                bounds[i] = v
    else:
        for i in range(n):
            bounds[i] = work(i)

    np.maximum(bounds, 0.0, out=bounds)
    return CertificationResult(lower_bounds=bounds,
                               is_exact=np.full(n, exact))


def certified_curve(model: KnnModel, test: Dataset, radii,
                    mode: str = "theorem1",
                    threads: int = 1) -> RobustErrorCurve:
    """Certified robust-error curve over an ascending radius grid."""
    radii = [float(r) for r in radii]
    if any(b < a for a, b in zip(radii, radii[1:])) or \
            any(r < 0 for r in radii):
        raise ValueError("radii must be ascending and nonnegative")
    result = certification_bounds(model, test, mode=mode, threads=threads)
    return curve_from_bounds(result.lower_bounds, radii, "certified")
