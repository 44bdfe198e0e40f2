import numpy as np
import pytest

from minconv.data import make_advection_split, normalize_dataset


def assert_within(actual, expected, rtol, atol=0.0, label=""):
    """allclose with a report of the worst offender."""
    actual = np.asarray(actual)
    expected = np.asarray(expected)
    excess = np.abs(actual - expected) - (rtol * np.abs(expected) + atol)
    worst = float(excess.max())
    assert worst <= 0, f"{label} exceeds tolerance by {worst:.3e}"


def max_rel_err(actual, expected, floor=1e-300):
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    return float(np.max(np.abs(actual - expected) /
                        np.maximum(np.abs(expected), floor)))


@pytest.fixture(scope="session")
def advection_small():
    """Shared 16x16 advection splits (normalized, f32) for trainer tests."""
    train = make_advection_split(16, 25, 24, "train", 0)
    test = make_advection_split(16, 25, 12, "test", 0)
    train_n, stats = normalize_dataset(train)
    test_n, _ = normalize_dataset(test, stats)
    return train_n.astype(np.float32), test_n.astype(np.float32)
