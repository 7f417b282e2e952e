import numpy as np
import pytest

from flowprior.flow import FlowModel, randomize
from flowprior.tensor import gaussian, make_rng


def central_difference(f, x, u, h=1e-5):
    """Directional derivative of scalar ``f`` at ``x`` along ``u``."""
    return (f(x + h * u) - f(x - h * u)) / (2 * h)


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def unit(rng, shape):
    u = gaussian(rng, shape)
    return u / np.linalg.norm(u)


def param_direction(rng, params):
    d = [gaussian(rng, p.shape) for p in params]
    norm = np.sqrt(sum(float(np.sum(a * a)) for a in d))
    return [a / norm for a in d]


def tiny_model(seed, shape=(1, 4, 4), blocks=2, steps=2, hidden=4, scale=0.2):
    """Small model with every parameter perturbed, so no layer is trivial."""
    model = FlowModel.create(shape, blocks, steps, hidden, seed=seed)
    return randomize(model, make_rng(1000 + seed), scale)


@pytest.fixture
def rng():
    return make_rng(1234)


# --- acceptance criteria reporting ---

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    n = marker.args[0]
    ok = _criteria.get(n, True) and report.passed
    if report.skipped:
        ok = False
    _criteria[n] = ok


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if _criteria[n] else 'FAIL'}")
