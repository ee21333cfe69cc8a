import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from arml.dataset import Dataset, load_dataset  # noqa: E402

# Real benchmark datasets (LIBSVM distribution) are looked up here; run
# scripts/fetch_data.py to download them. Tests that need them skip
# with an explanation when the files are absent.
DATA_DIR = Path(os.environ.get(
    "ARML_DATA_DIR", Path(__file__).resolve().parents[1] / "data"))

DATASET_FILES = {
    "splice": ("splice", "splice.t"),
    "pendigits": ("pendigits", "pendigits.t"),
    "satimage": ("satimage.scale", "satimage.scale.t"),
    "usps": ("usps", "usps.t"),
}


def dataset_available(name: str) -> bool:
    train_name, test_name = DATASET_FILES[name]
    return (DATA_DIR / train_name).exists() and (DATA_DIR / test_name).exists()


def load_benchmark(name: str) -> tuple[Dataset, Dataset]:
    if not dataset_available(name):
        pytest.skip(
            f"benchmark dataset {name!r} not present under {DATA_DIR}; "
            f"run scripts/fetch_data.py (network required) or set "
            f"ARML_DATA_DIR")
    train_name, test_name = DATASET_FILES[name]
    train = load_dataset(DATA_DIR / train_name)
    test = load_dataset(DATA_DIR / test_name, dim_hint=train.num_features)
    if test.num_features > train.num_features:
        train = load_dataset(DATA_DIR / train_name,
                             dim_hint=test.num_features)
    return train, test


@pytest.fixture
def toy_two_class() -> Dataset:
    """Four class-0 points and three class-1 points in the plane."""
    X = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0],
                  [3.0, 0.0], [3.0, 1.0], [2.0, 2.0]])
    y = np.array([0, 0, 0, 0, 1, 1, 1], dtype=np.int64)
    return Dataset(features=X, labels=y, num_classes=2,
                   original_labels=(0.0, 1.0))
