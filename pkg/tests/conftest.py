import warnings

import numpy as np
import pytest

from incsim.losses import EmptySelectionWarning
from incsim.strategies import SessionData


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _quiet_empty_selection():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptySelectionWarning)
        yield


def blob_images(classes, per_class, side=16, noise=0.5, seed=0):
    """Each class is a fixed random prototype image plus Gaussian noise."""
    gen = np.random.default_rng(seed)
    xs, ys = [], []
    for c in classes:
        proto = np.random.default_rng(1000 + c).normal(size=(1, side, side))
        xs.append(proto + noise * gen.normal(size=(per_class, 1, side, side)))
        ys.extend([c] * per_class)
    return np.concatenate(xs), np.array(ys, dtype=np.int64)


def blob_session(classes, train=20, val=6, seed=0):
    tx, ty = blob_images(classes, train, seed=seed)
    vx, vy = blob_images(classes, val, seed=seed + 1)
    return SessionData(tx, ty, vx, vy)


@pytest.fixture
def toy_session():
    return blob_session


# -- acceptance report ------------------------------------------------------------------

_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """``report(name, passed, detail)`` records one line for the end-of-run acceptance summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def report(name, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        lines.append(line)
        print(line)
        return passed

    return report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
