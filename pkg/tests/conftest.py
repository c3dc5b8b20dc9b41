import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from concurl.dataio import make_gaussian_blobs
from concurl.trainer import TrainConfig

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_ACCEPTANCE_LINES = []


@pytest.fixture
def record_criterion():
    """Log one pass/fail line per acceptance criterion, printed at session end."""

    def record(number, passed, detail):
        _ACCEPTANCE_LINES.append(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_blobs():
    return make_gaussian_blobs(3, 8, 5, spread=0.5, separation=3.0, seed=3)


@pytest.fixture
def tiny_cfg():
    return TrainConfig(epochs=2, batch_size=8, encoder_hidden=(6,), feat_dim=5, head_hidden=6, embed_dim=4,
                       ensemble_size=3, m_noise=5, eval_every=1, kmeans_inits=3)


def fd_grad(f, p, h=1e-5):
    """Central finite differences of scalar f() w.r.t. array p (perturbed in place)."""
    num = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        orig = p[idx]
        p[idx] = orig + h
        up = f()
        p[idx] = orig - h
        down = f()
        p[idx] = orig
        num[idx] = (up - down) / (2 * h)
    return num


def rel_err(analytic, numeric, floor=1e-8):
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), floor)
    return float(np.abs(analytic - numeric).max() / scale)
