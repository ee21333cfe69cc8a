"""Mahalanobis metric parameterized by a factor G with M = G^T G.

The distance is the squared quadratic form d_M(x, x') = (x-x')^T M (x-x'),
not its square root. Storing the factor instead of M keeps M positive
semi-definite by construction; a rectangular (r x D) factor gives a
low-rank M.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MetricFormatError(ValueError):
    """Raised for malformed metric files."""


@dataclass(frozen=True)
class MetricFactor:
    factor: np.ndarray  # (r, D)
    matrix: np.ndarray = field(init=False)  # (D, D) cached G^T G

    def __post_init__(self):
        G = np.ascontiguousarray(np.atleast_2d(np.asarray(
            self.factor, dtype=np.float64)))
        if G.ndim != 2:
            raise ValueError("factor must be a 2-D matrix")
        object.__setattr__(self, "factor", G)
        M = G.T @ G
        # enforce exact symmetry against rounding in the product
        M = 0.5 * (M + M.T)
        G.setflags(write=False)
        M.setflags(write=False)
        object.__setattr__(self, "matrix", M)

    @classmethod
    def identity(cls, dim: int) -> "MetricFactor":
        return cls(np.eye(dim))

    @property
    def dim(self) -> int:
        return self.factor.shape[1]

    @property
    def rank_rows(self) -> int:
        return self.factor.shape[0]

    def transform(self, X: np.ndarray) -> np.ndarray:
        """Map points through G; squared euclidean distances in the
        transformed space equal d_M in the original space."""
        return np.asarray(X) @ self.factor.T

    def scaled(self, c: float) -> "MetricFactor":
        """Factor for the metric c*M (c > 0)."""
        if c <= 0:
            raise ValueError("scale must be positive")
        return MetricFactor(np.sqrt(c) * self.factor)


def mahalanobis_distance(m: MetricFactor, x: np.ndarray,
                         xp: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    xp = np.asarray(xp, dtype=np.float64)
    if x.shape != (m.dim,) or xp.shape != (m.dim,):
        raise ValueError(
            f"dimension mismatch: metric dim {m.dim}, "
            f"points {x.shape} and {xp.shape}")
    diff = x - xp
    d = float(diff @ m.matrix @ diff)
    return max(d, 0.0)


def pairwise_sq_dists(Xg: np.ndarray, Yg: np.ndarray) -> np.ndarray:
    """Cross squared euclidean distances between rows of two point sets.

    Callers pass G-transformed coordinates to get Mahalanobis distances.
    Result is clamped at 0 against cancellation noise.
    """
    x_sq = np.einsum("ij,ij->i", Xg, Xg)
    y_sq = np.einsum("ij,ij->i", Yg, Yg)
    d = x_sq[:, None] + y_sq[None, :] - 2.0 * (Xg @ Yg.T)
    np.maximum(d, 0.0, out=d)
    return d


def sq_dists_to_point(Xg: np.ndarray, xg: np.ndarray) -> np.ndarray:
    """Squared euclidean distances from each row of Xg to the point xg."""
    return pairwise_sq_dists(Xg, xg[None, :])[:, 0]


def save_metric(m: MetricFactor, path) -> None:
    """Write the factor: header `r D`, then r rows of D floats with 17
    significant digits."""
    r, d = m.factor.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{r} {d}\n")
        for row in m.factor:
            fh.write(" ".join(format(v, ".17g") for v in row) + "\n")


def load_metric(path) -> MetricFactor:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise MetricFormatError("empty metric file")
    header = lines[0].split()
    if len(header) != 2:
        raise MetricFormatError(f"bad header {lines[0]!r}, expected 'r D'")
    try:
        r, d = int(header[0]), int(header[1])
    except ValueError:
        raise MetricFormatError(
            f"non-integer header {lines[0]!r}") from None
    if len(lines) - 1 != r:
        raise MetricFormatError(
            f"header says {r} rows but file has {len(lines) - 1}")
    rows = []
    for ln in lines[1:]:
        vals = ln.split()
        if len(vals) != d:
            raise MetricFormatError(
                f"row has {len(vals)} values, expected {d}")
        rows.append([float(v) for v in vals])
    return MetricFactor(np.array(rows, dtype=np.float64))
