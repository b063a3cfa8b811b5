import numpy as np
import pytest

from dubflow.tokens import StreamLayout
from dubflow.toyworld import ToyConfig, gen_corpus

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when not in ("setup", "call"):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "seen": False})
    if call.when == "call":
        entry["seen"] = True
    if call.excinfo is not None:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "PASS" if entry["ok"] and entry["seen"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {status}  {entry['title']}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def toy_cfg():
    return ToyConfig()


@pytest.fixture(scope="session")
def toy_corpus(toy_cfg):
    return gen_corpus(toy_cfg, 24)


@pytest.fixture
def small_layout():
    return StreamLayout(m=1, n=1, k=1, v=4)
