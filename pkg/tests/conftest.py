import numpy as np
import pytest

from poiattr.ingest import SyntheticConfig, generate_synthetic, normalize_trajectories


def central_difference(f, param, idx, step=1e-6):
    """d f / d param[idx] by central differences; restores the entry."""
    orig = param.data[idx]
    param.data[idx] = orig + step
    up = f()
    param.data[idx] = orig - step
    down = f()
    param.data[idx] = orig
    return (up - down) / (2 * step)


def rel_err(a, b, floor=1e-12):
    return abs(a - b) / max(abs(a), abs(b), floor)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    cfg = SyntheticConfig(n_users=6, n_pois=60, n_categories=4, days=3, extent_m=600.0, rng_seed=5)
    catalog, trajs = generate_synthetic(cfg)
    return catalog, normalize_trajectories(trajs)


_CRITERIA = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        detail = dict(report.user_properties).get("criterion", "")
        _CRITERIA[name] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n.split("_")[2])):
        outcome, detail = _CRITERIA[name]
        num = name.split("_")[2]
        label = " ".join(name.split("_")[3:])
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {num} ({label}): {verdict}  {detail}")
