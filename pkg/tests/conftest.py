import numpy as np
import pytest

from ndesolve.vectorfield import FunctionField, ScalarLinearField, mlp


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def mlp_field():
    return mlp([2, 8, 2], activation="tanh", seed=7, scale=1.0)


def decay(lam=-1.0):
    return ScalarLinearField(lam, 1)


def time_field(fn, dim=1):
    """Field f(t, y) = fn(t), independent of y."""
    return FunctionField(
        lambda t, y, p: np.broadcast_to(np.asarray(fn(t), float), y.shape).copy(),
        lambda t, y, p: np.zeros(y.shape[:-1] + (dim, dim)),
        dim, dim,
    )


# ---------------------------------------------------------------- acceptance reporting

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}
    config.addinivalue_line("markers", "criterion(number, title): an acceptance criterion")


@pytest.fixture
def detail(request):
    """Call with keyword measurements; they are shown on the criterion's PASS/FAIL line."""
    def record(**values):
        request.node.user_properties.append(("detail", values))
    return record


def _fmt(v):
    return f"{v:.4g}" if isinstance(v, float) else str(v)


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when not in ("setup", "call"):
        return rep
    if rep.when == "setup" and rep.passed:
        return rep
    number, title = marker.args
    values = {}
    for key, val in item.user_properties:
        if key == "detail":
            values.update(val)
    status = "PASS" if rep.passed else "FAIL"
    text = ", ".join(f"{k}={_fmt(v)}" for k, v in values.items())
    line = f"CRITERION {number:2d} {status}  {title}" + (f"  [{text}]" if text else "")
    item.config.stash[_RESULTS][number] = line
    print(line)
    return rep


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
