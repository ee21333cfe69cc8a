"""Hard-label decision-based attack on Mahalanobis K-NN.

Produces per-instance upper bounds on the minimal adversarial l2
perturbation: starting from a misclassified anchor, binary-search to
the decision boundary, then random-walk along it (orthogonal jitter
followed by a contraction toward the clean input, keeping only
candidates that stay misclassified). Any returned perturbation is
re-verified to flip the prediction, so the upper-bound semantics hold
regardless of attack quality.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .certify import RobustErrorCurve, curve_from_bounds
from .dataset import Dataset
from .knn import KnnModel, predict

BOUNDARY_REFINE_TOL = 1e-6
_ADAPT_WINDOW = 20


@dataclass(frozen=True)
class AttackResult:
    """Upper bounds (inf when no adversarial point was found) and the
    adversarial points achieving them."""

    upper_bounds: np.ndarray
    adversarials: np.ndarray


def _bisect_to_boundary(model: KnnModel, x: np.ndarray, y: int,
                        adv: np.ndarray) -> np.ndarray:
    """Shrink an adversarial point along the segment toward x until it
    sits within BOUNDARY_REFINE_TOL of the decision boundary."""
    gap = float(np.linalg.norm(adv - x))
    if gap == 0.0:
        return adv
    lo, hi = 0.0, 1.0  # x + t*(adv - x); t=hi is adversarial
    while (hi - lo) * gap > BOUNDARY_REFINE_TOL:
        mid = 0.5 * (lo + hi)
        if predict(model, x + mid * (adv - x)) != y:
            hi = mid
        else:
            lo = mid
    return x + hi * (adv - x)


def _initial_adversarial(model: KnnModel, x: np.ndarray,
                         y: int) -> np.ndarray | None:
    """Nearest training point (in input l2) that the model classifies
    differently from y."""
    order = np.argsort(np.linalg.norm(model.train.features - x, axis=1),
                       kind="stable")
    for idx in order:
        point = model.train.features[idx]
        if predict(model, point) != y:
            return point.copy()
    return None


def boundary_attack(model: KnnModel, x: np.ndarray, y: int,
                    steps: int = 1000, seed: int = 0
                    ) -> tuple[float, np.ndarray]:
    """Upper bound on the minimal perturbation for one instance.

    Returns (norm, adversarial point); (0, x) when x is already
    misclassified, (inf, x) when no differently-classified anchor
    exists at all.
    """
    x = np.asarray(x, dtype=np.float64)
    if predict(model, x) != y:
        return 0.0, x.copy()
    anchor = _initial_adversarial(model, x, y)
    if anchor is None:
        return np.inf, x.copy()

    rng = np.random.default_rng(seed)
    best = _bisect_to_boundary(model, x, y, anchor)
    orth_scale = 0.1 * float(np.linalg.norm(anchor - x))
    toward = 0.1
    successes: list[bool] = []

    for _ in range(steps):
        direction = best - x
        dist = float(np.linalg.norm(direction))
        if dist == 0.0:
            break
        unit = direction / dist
        eta = rng.standard_normal(x.shape[0])
        eta -= (eta @ unit) * unit
        eta_norm = float(np.linalg.norm(eta))
        if eta_norm > 0.0:
            eta *= orth_scale / eta_norm
        candidate = best + eta
        # re-project to the sphere of the current distance, then contract
        cand_dir = candidate - x
        cand_dist = float(np.linalg.norm(cand_dir))
        if cand_dist > 0.0:
            candidate = x + cand_dir * (dist / cand_dist)
        orth_ok = predict(model, candidate) != y
        successes.append(orth_ok)
        if orth_ok:
            stepped = x + (1.0 - toward) * (candidate - x)
            if predict(model, stepped) != y:
                best = stepped
                toward = min(toward * 1.1, 0.5)
            else:
                best = candidate
                toward = max(toward * 0.9, 1e-4)
        if len(successes) >= _ADAPT_WINDOW:
            rate = float(np.mean(successes[-_ADAPT_WINDOW:]))
            orth_scale *= 1.1 if rate > 0.5 else 0.9
            successes.clear()

    best = _bisect_to_boundary(model, x, y, best)
    best_norm = float(np.linalg.norm(best - x))
    if predict(model, best) == y:  # never happens; defensive re-check
        return np.inf, x.copy()
    return best_norm, best


def attack_bounds(model: KnnModel, test: Dataset, steps: int = 1000,
                  seed: int = 0, threads: int = 1) -> AttackResult:
    """Attack every test instance; generators are derived from
    (seed, instance index) so instances are independent and the result
    does not depend on scheduling."""
    n = test.num_instances

    def work(i: int):
        return boundary_attack(model, test.features[i],
                               int(test.labels[i]), steps=steps,
                               seed=_instance_seed(seed, i))

    bounds = np.empty(n)
    advs = np.empty_like(test.features)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, range(n)))
    else:
        results = [work(i) for i in range(n)]
    for i, (norm, adv) in enumerate(results):
        bounds[i] = norm
        advs[i] = adv
    return AttackResult(upper_bounds=bounds, adversarials=advs)


def _instance_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence((seed, index)).generate_state(1)[0])


def empirical_curve(model: KnnModel, test: Dataset, radii,
                    steps: int = 1000, seed: int = 0,
                    threads: int = 1) -> RobustErrorCurve:
    """Empirical robust-error curve: the fraction of instances whose
    attack perturbation fits within each radius."""
    radii = [float(r) for r in radii]
    if any(b < a for a, b in zip(radii, radii[1:])) or \
            any(r < 0 for r in radii):
        raise ValueError("radii must be ascending and nonnegative")
    result = attack_bounds(model, test, steps=steps, seed=seed,
                           threads=threads)
    return curve_from_bounds(result.upper_bounds, radii, "empirical")
