import numpy as np
import pytest

from dynrf.dataset import generate_dataset, load_dataset
from dynrf.scenes import SceneSpec

TINY_SPEC = SceneSpec("orbiting_blob", frames=3, cameras=8, width=24, height=24, seed=7)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    generate_dataset(TINY_SPEC, root, n_steps=256)
    return root


@pytest.fixture()
def tiny_dataset(tiny_dataset_dir):
    return load_dataset(tiny_dataset_dir)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ------------------------------------------------------

_criteria: dict[str, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): test belongs to a named acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (rep.when == "call" or rep.failed or rep.skipped):
        return
    _criteria.setdefault(marker.args[0], []).append(
        (item.name, rep.outcome, [(k, v) for k, v in rep.user_properties]))


def _fmt(v):
    return f"{v:.4g}" if isinstance(v, float) else str(v)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.write_sep("=", "acceptance criteria")
    for name, runs in _criteria.items():
        ok = all(outcome == "passed" for _, outcome, _ in runs)
        failed = [test for test, outcome, _ in runs if outcome != "passed"]
        values = ", ".join(f"{k}={_fmt(v)}" for _, _, props in runs for k, v in props)
        line = f"{'PASS' if ok else 'FAIL'}  {name}"
        if values:
            line += f"  [{values}]"
        if failed:
            line += f"  failed: {', '.join(failed)}"
        tr.write_line(line)
