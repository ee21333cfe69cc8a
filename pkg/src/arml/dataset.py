"""Labeled datasets in LIBSVM text format.

Features are held as a dense float matrix; sparse indices absent from a
line are zero. Original label values (e.g. -1/+1 or 1..10) are remapped
to contiguous 0-based class ids by ascending original value, and the
mapping is kept for reporting.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import IO, Iterable, Union

import numpy as np


class DatasetFormatError(ValueError):
    """Raised for malformed LIBSVM input or inconsistent dataset shapes."""


@dataclass(frozen=True)
class Dataset:
    """Immutable labeled dataset.

    features: (N, D) float64 matrix.
    labels: (N,) int64 class ids in [0, num_classes).
    original_labels: original label value for each class id, ascending.
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    original_labels: tuple[float, ...]

    def __post_init__(self):
        self.features.setflags(write=False)
        self.labels.setflags(write=False)

    @property
    def num_instances(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def _iter_lines(text: Union[str, IO[str], Iterable[str]]) -> Iterable[str]:
    if isinstance(text, str):
        return io.StringIO(text)
    return text


def parse_libsvm(text: Union[str, IO[str], Iterable[str]],
                 dim_hint: int | None = None) -> Dataset:
    """Parse LIBSVM-format text into a dense Dataset.

    Each nonempty line is ``<label> <index>:<value> ...`` with strictly
    increasing 1-based indices; ``#`` starts a comment to end of line.
    The feature dimension is the largest index seen, or dim_hint if larger.
    """
    if dim_hint is not None and dim_hint < 1:
        raise DatasetFormatError(f"dim_hint must be positive, got {dim_hint}")

    raw_labels: list[float] = []
    rows: list[list[tuple[int, float]]] = []
    max_index = 0

    for lineno, line in enumerate(_iter_lines(text), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        tokens = body.split()
        try:
            label = float(tokens[0])
        except ValueError:
            raise DatasetFormatError(
                f"line {lineno}: label {tokens[0]!r} is not numeric") from None
        pairs: list[tuple[int, float]] = []
        prev_index = 0
        for tok in tokens[1:]:
            idx_str, sep, val_str = tok.partition(":")
            if not sep:
                raise DatasetFormatError(
                    f"line {lineno}: expected index:value, got {tok!r}")
            try:
                idx = int(idx_str)
                val = float(val_str)
            except ValueError:
                raise DatasetFormatError(
                    f"line {lineno}: non-numeric token {tok!r}") from None
            if idx <= prev_index:
                raise DatasetFormatError(
                    f"line {lineno}: index {idx} not strictly increasing")
            prev_index = idx
            pairs.append((idx, val))
        max_index = max(max_index, prev_index)
        raw_labels.append(label)
        rows.append(pairs)

    if not rows:
        raise DatasetFormatError("empty stream: no instances found")

    dim = max(max_index, dim_hint or 0)
    if dim == 0:
        raise DatasetFormatError("no feature indices found and no dim_hint")

    features = np.zeros((len(rows), dim), dtype=np.float64)
    for i, pairs in enumerate(rows):
        for idx, val in pairs:
            features[i, idx - 1] = val

    originals = np.asarray(raw_labels)
    classes = np.unique(originals)
    labels = np.searchsorted(classes, originals).astype(np.int64)
    return Dataset(features=features, labels=labels,
                   num_classes=len(classes),
                   original_labels=tuple(float(c) for c in classes))


def load_dataset(path, dim_hint: int | None = None) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_libsvm(fh, dim_hint=dim_hint)


def _format_value(v: float) -> str:
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return format(v, ".17g")


def dump_libsvm(data: Dataset) -> str:
    """Serialize to LIBSVM text, omitting zero features.

    Labels are written as their original values. Reparsing (with
    dim_hint = num_features) reproduces features and class ids exactly.
    """
    lines = []
    for i in range(data.num_instances):
        parts = [_format_value(data.original_labels[data.labels[i]])]
        row = data.features[i]
        for j in np.nonzero(row)[0]:
            parts.append(f"{j + 1}:{_format_value(row[j])}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


def save_dataset(data: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_libsvm(data))


def sample_subset(data: Dataset, n: int, seed: int) -> Dataset:
    """Draw n instances uniformly without replacement.

    Selection is a partial Fisher-Yates shuffle driven by a PCG64
    generator seeded with `seed`, so the draw sequence is reproducible.
    The subset keeps the original index order and the parent's class
    id mapping.
    """
    if n < 1:
        raise ValueError(f"sample size must be positive, got {n}")
    if n > data.num_instances:
        raise ValueError(
            f"cannot sample {n} from {data.num_instances} instances")
    rng = np.random.default_rng(seed)
    idx = np.arange(data.num_instances)
    for i in range(n):
        j = int(rng.integers(i, data.num_instances))
        idx[i], idx[j] = idx[j], idx[i]
    keep = np.sort(idx[:n])
    return Dataset(features=data.features[keep].copy(),
                   labels=data.labels[keep].copy(),
                   num_classes=data.num_classes,
                   original_labels=data.original_labels)
