import numpy as np
import pytest

from crowdloss.annotations import MISSING, AnnotationMatrix, Dataset


def numeric_gradient(fn, vector, step=1e-5):
    """Central finite differences of scalar ``fn`` at ``vector``."""
    vector = np.array(vector, dtype=float)
    grad = np.zeros_like(vector)
    for k in range(vector.size):
        old = vector[k]
        vector[k] = old + step
        up = fn(vector)
        vector[k] = old - step
        down = fn(vector)
        vector[k] = old
        grad[k] = (up - down) / (2 * step)
    return grad


def max_relative_error(analytic, numeric, floor=1e-6):
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def random_labels(rng, n, a, m=2, p_missing=0.3):
    labels = rng.integers(0, m, size=(n, a))
    labels[rng.random((n, a)) < p_missing] = MISSING
    empty = (labels == MISSING).all(axis=1)
    labels[empty, 0] = rng.integers(0, m, size=empty.sum())
    return labels


def make_dataset(labels, features=None, num_classes=2, seed=0):
    labels = np.asarray(labels)
    n = labels.shape[0]
    if features is None:
        features = np.random.default_rng(seed).standard_normal((n, 3))
    return Dataset(features, AnnotationMatrix(labels, num_classes), [f"s{i}" for i in range(n)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record a pass/fail line for an acceptance criterion, then assert it."""
    results = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def check(number, name, passed, detail=""):
        line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {name}" + (f" ({detail})" if detail else "")
        results.append((number, line))
        print(line)
        assert passed, line

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE_KEY, [])
    if results:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(results):
            terminalreporter.write_line(line)
