"""Robust metric training.

Minimizes the average loss of the closed-form triplet robustness value
over sampled neighbor pairs (or over the exact order-statistic
selection), with the analytic gradient taken through the factor G of
M = G^T G. Pair selection never contributes to the gradient. One Adam
step is taken per epoch on the full-batch gradient, and neighbor lists
are refreshed with the current metric at the start of every epoch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .certify import DENOMINATOR_GUARD
from .dataset import Dataset
from .metric import MetricFactor, pairwise_sq_dists

LOSS_KINDS = ("negative", "hinge", "exponential", "logistic")
OBJECTIVES = ("sampled", "exact_kth")


@dataclass(frozen=True)
class LossFn:
    """Monotonically non-increasing margin loss applied to the
    robustness value."""

    kind: str

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.kind!r}")

    def value(self, eps):
        eps = np.asarray(eps, dtype=np.float64)
        if self.kind == "negative":
            return -eps
        if self.kind == "hinge":
            return np.maximum(1.0 - eps, 0.0)
        if self.kind == "exponential":
            return np.exp(-eps)
        return np.logaddexp(0.0, -eps)  # overflow-safe logistic

    def derivative(self, eps):
        eps = np.asarray(eps, dtype=np.float64)
        if self.kind == "negative":
            return np.full_like(eps, -1.0)
        if self.kind == "hinge":
            return np.where(eps < 1.0, -1.0, 0.0)
        if self.kind == "exponential":
            return -np.exp(-eps)
        # -sigmoid(-eps), computed from exp(-|eps|) to avoid overflow
        t = np.exp(-np.abs(eps))
        return np.where(eps >= 0.0, -t / (1.0 + t), -1.0 / (1.0 + t))


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "negative"
    epochs: int = 1000
    neighborhood: int = 10
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    objective: str = "sampled"
    k_neighbors: int = 1  # K of the target classifier, used by exact_kth
    factor_rows: int | None = None  # None means square D x D

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.neighborhood < 1:
            raise ValueError("neighborhood must be at least 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.k_neighbors < 1 or self.k_neighbors % 2 == 0:
            raise ValueError("K must be an odd positive integer")
        if self.factor_rows is not None and self.factor_rows < 1:
            raise ValueError("factor_rows must be positive")

    def loss_fn(self) -> LossFn:
        return LossFn(self.loss)


@dataclass(frozen=True)
class EpochPairs:
    """Per-instance sampled/selected triplet partners; -1 marks an
    instance skipped for lack of a usable pair."""

    plus: np.ndarray
    minus: np.ndarray

    @property
    def valid(self) -> np.ndarray:
        return (self.plus >= 0) & (self.minus >= 0)

    @property
    def skipped(self) -> int:
        return int(np.sum(~self.valid))


def _nearest_from_pool(d_row: np.ndarray, pool: np.ndarray,
                       count: int) -> np.ndarray:
    if count >= pool.size:
        return pool
    cut = np.argpartition(d_row[pool], count - 1)[:count]
    return pool[cut]


def _candidate_lists(features: np.ndarray, labels: np.ndarray,
                     class_idx: list[np.ndarray], G: np.ndarray,
                     neighborhood: int):
    """Nearest same-class (excluding self) and different-class
    candidate indices per instance, under the current metric."""
    Xg = features @ G.T
    D2 = pairwise_sq_dists(Xg, Xg)
    n = features.shape[0]
    all_idx = np.arange(n)
    same_cands: list[np.ndarray] = []
    diff_cands: list[np.ndarray] = []
    for i in range(n):
        c = labels[i]
        base = class_idx[c]
        count = min(neighborhood, base.size - 1)
        if count < 1:
            same_cands.append(np.empty(0, dtype=np.int64))
        else:
            # take count+1 nearest including i itself, then drop i
            cut = _nearest_from_pool(D2[i], base, min(count + 1, base.size))
            cut = cut[cut != i]
            if cut.size > count:
                order = np.lexsort((cut, D2[i][cut]))[:count]
                cut = cut[order]
            same_cands.append(cut)
        pool = all_idx[labels != c]
        if pool.size == 0:
            diff_cands.append(np.empty(0, dtype=np.int64))
        else:
            diff_cands.append(
                _nearest_from_pool(D2[i], pool, min(neighborhood, pool.size)))
    return same_cands, diff_cands


def randnear_pair(train: Dataset, m: MetricFactor, i: int,
                  neighborhood: int,
                  rng: np.random.Generator) -> tuple[int, int]:
    """Sample one same-class and one different-class partner for
    instance i, each uniform over its nearest `neighborhood` candidates
    under the current metric. Selection carries no gradient."""
    labels = train.labels
    y = int(labels[i])
    xg = m.transform(train.features)
    d_row = pairwise_sq_dists(xg[i][None, :], xg)[0]
    same_pool = np.flatnonzero(labels == y)
    same_pool = same_pool[same_pool != i]
    diff_pool = np.flatnonzero(labels != y)
    if same_pool.size == 0:
        raise ValueError(f"instance {i} has no same-class peer")
    if diff_pool.size == 0:
        raise ValueError("training data has a single class")
    same = _nearest_from_pool(d_row, same_pool,
                              min(neighborhood, same_pool.size))
    diff = _nearest_from_pool(d_row, diff_pool,
                              min(neighborhood, diff_pool.size))
    return (int(same[rng.integers(same.size)]),
            int(diff[rng.integers(diff.size)]))


def sample_epoch_pairs(train: Dataset, G: np.ndarray, cfg: TrainConfig,
                       rng: np.random.Generator) -> EpochPairs:
    """Refresh neighbor lists under the current metric and sample one
    (same-class, different-class) pair per instance."""
    labels = train.labels
    class_idx = [np.flatnonzero(labels == c)
                 for c in range(train.num_classes)]
    same_cands, diff_cands = _candidate_lists(
        train.features, labels, class_idx, G, cfg.neighborhood)
    n = train.num_instances
    plus = np.full(n, -1, dtype=np.int64)
    minus = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        sc, dc = same_cands[i], diff_cands[i]
        if sc.size == 0 or dc.size == 0:
            continue
        plus[i] = sc[rng.integers(sc.size)]
        minus[i] = dc[rng.integers(dc.size)]
    return EpochPairs(plus=plus, minus=minus)


def select_exact_pairs(train: Dataset, G: np.ndarray,
                       cfg: TrainConfig) -> EpochPairs:
    """Deterministic pair selection through the order statistics of the
    triplet values: per instance, the k-th smallest over other-class
    candidates of the k-th largest over same-class partners,
    k = (K+1)/2, leave-one-out."""
    k = (cfg.k_neighbors + 1) // 2
    labels = train.labels
    M = G.T @ G
    Xm = train.features @ M
    Xg = train.features @ G.T
    D2 = pairwise_sq_dists(Xg, Xg)
    n = train.num_instances
    plus = np.full(n, -1, dtype=np.int64)
    minus = np.full(n, -1, dtype=np.int64)
    for t in range(n):
        y = labels[t]
        same = np.flatnonzero(labels == y)
        same = same[same != t]
        diff = np.flatnonzero(labels != y)
        if same.size == 0 or diff.size < k:
            continue
        den = np.sqrt(np.maximum(pairwise_sq_dists(Xm[same], Xm[diff]), 0.0))
        num = D2[t][diff][None, :] - D2[t][same][:, None]
        vals = np.zeros_like(num)
        ok = den >= DENOMINATOR_GUARD
        np.divide(num, 2.0 * den, out=vals, where=ok)
        s = same.size
        if s >= k:
            arg_i = np.argpartition(vals, s - k, axis=0)[s - k, :]
        else:
            arg_i = np.argmin(vals, axis=0)
        col_vals = vals[arg_i, np.arange(diff.size)]
        j_pos = int(np.argpartition(col_vals, k - 1)[k - 1])
        plus[t] = same[arg_i[j_pos]]
        minus[t] = diff[j_pos]
    return EpochPairs(plus=plus, minus=minus)


def _triplet_batch(X, Xp, Xm_, G, loss: LossFn):
    """Triplet values, per-instance losses, and the gradient integrand
    for a batch of (x, x+, x-) rows under M = G^T G."""
    M = G.T @ G
    Vp = X - Xp
    Vm = X - Xm_
    U = Xp - Xm_
    GVp = Vp @ G.T
    GVm = Vm @ G.T
    num = np.einsum("ij,ij->i", GVm, GVm) - np.einsum("ij,ij->i", GVp, GVp)
    W = U @ M
    s_val = np.einsum("ij,ij->i", W, W)
    root = np.sqrt(s_val)
    ok = root >= DENOMINATOR_GUARD
    eps = np.zeros_like(num)
    np.divide(num, 2.0 * root, out=eps, where=ok)
    losses = np.where(ok, loss.value(eps), 0.0)
    lp = np.where(ok, loss.derivative(eps), 0.0)
    c1 = np.zeros_like(num)
    np.divide(lp, root, out=c1, where=ok)
    c2 = np.zeros_like(num)
    np.divide(lp * num, 2.0 * s_val * root, out=c2, where=ok)
    S = (Vm.T @ (c1[:, None] * Vm) - Vp.T @ (c1[:, None] * Vp)
         - U.T @ (c2[:, None] * W) - W.T @ (c2[:, None] * U))
    return eps, losses, G @ S


def objective_and_gradient(train: Dataset, G: np.ndarray, cfg: TrainConfig,
                           pairs: EpochPairs
                           ) -> tuple[float, np.ndarray]:
    """Average loss over the epoch's triplets and its exact gradient in
    G, holding the selected pair indices fixed. Skipped instances and
    degenerate triplets contribute zero loss and zero gradient, but
    still count in the 1/N normalization."""
    n = train.num_instances
    valid = pairs.valid
    if not np.any(valid):
        return 0.0, np.zeros_like(G)
    X = train.features[valid]
    Xp = train.features[pairs.plus[valid]]
    Xm_ = train.features[pairs.minus[valid]]
    _, losses, grad_sum = _triplet_batch(X, Xp, Xm_, G, cfg.loss_fn())
    return float(np.sum(losses) / n), grad_sum / n


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, G: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(G), v=np.zeros_like(G))

    def step(self, G: np.ndarray, grad: np.ndarray, lr: float,
             beta1: float, beta2: float, eps: float) -> np.ndarray:
        self.t += 1
        self.m = beta1 * self.m + (1.0 - beta1) * grad
        self.v = beta2 * self.v + (1.0 - beta2) * grad * grad
        m_hat = self.m / (1.0 - beta1 ** self.t)
        v_hat = self.v / (1.0 - beta2 ** self.t)
        return G - lr * m_hat / (np.sqrt(v_hat) + eps)


def initial_factor(dim: int, factor_rows: int | None) -> np.ndarray:
    rows = dim if factor_rows is None else factor_rows
    if rows > dim:
        raise ValueError(f"factor_rows {rows} exceeds dimension {dim}")
    return np.eye(rows, dim)


def train(train_data: Dataset, cfg: TrainConfig,
          loss_log=None,
          on_epoch: Callable[[int, float], None] | None = None
          ) -> MetricFactor:
    """Run the full training loop and return the learned metric.

    Per epoch: refresh neighbor candidates with the current metric,
    draw pairs, take one Adam step on the full-batch gradient. Writes
    `epoch,loss` lines to loss_log when given.
    """
    if train_data.num_classes < 2:
        raise ValueError("training requires at least two classes")
    G = initial_factor(train_data.num_features, cfg.factor_rows)
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState.like(G)
    log_fh = open(loss_log, "w", encoding="utf-8") if loss_log else None
    try:
        if log_fh:
            log_fh.write("epoch,loss\n")
        for epoch in range(cfg.epochs):
            if cfg.objective == "sampled":
                pairs = sample_epoch_pairs(train_data, G, cfg, rng)
            else:
                pairs = select_exact_pairs(train_data, G, cfg)
            loss, grad = objective_and_gradient(train_data, G, cfg, pairs)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                bad = _first_non_finite(train_data, G, cfg, pairs)
                raise RuntimeError(
                    f"non-finite loss/gradient at epoch {epoch}, "
                    f"instance {bad}")
            G = adam.step(G, grad, cfg.lr, cfg.beta1, cfg.beta2,
                          cfg.adam_eps)
            if log_fh:
                log_fh.write(f"{epoch},{loss:.10g}\n")
            if on_epoch is not None:
                on_epoch(epoch, loss)
    finally:
        if log_fh:
            log_fh.close()
    return MetricFactor(G)


def _first_non_finite(train_data, G, cfg, pairs) -> int:
    valid_idx = np.flatnonzero(pairs.valid)
    X = train_data.features[valid_idx]
    Xp = train_data.features[pairs.plus[valid_idx]]
    Xm_ = train_data.features[pairs.minus[valid_idx]]
    eps, losses, _ = _triplet_batch(X, Xp, Xm_, G, cfg.loss_fn())
    bad = ~(np.isfinite(eps) & np.isfinite(losses))
    if np.any(bad):
        return int(valid_idx[np.flatnonzero(bad)[0]])
    return -1
