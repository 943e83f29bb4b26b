import math
import os
from pathlib import Path

import pytest

# Expensive maps and truth sets persist between runs.
os.environ.setdefault("UPLINK_VLP_CACHE", str(Path(__file__).parent / ".cache"))

from uplink_vlp.channel import ChannelParams, SystemFilter  # noqa: E402
from uplink_vlp.estimator import make_truth  # noqa: E402
from uplink_vlp.fingerprint import cached_map  # noqa: E402
from uplink_vlp.regression import fit_scene  # noqa: E402
from uplink_vlp.scene import reference_scene  # noqa: E402

TRIALS = 10_000
SEED = 1

_criteria: dict[int, list[str]] = {}


def report(n: int, ok: bool, text: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {text}"
    print(line)
    _criteria.setdefault(n, []).append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    lines = [line for n in sorted(_criteria) for line in _criteria[n]]
    for line in lines:
        terminalreporter.write_line(line)
    passed = sum(line.startswith("[PASS]") for line in lines)
    terminalreporter.write_line(f"{passed}/{len(lines)} checks passed")


@pytest.fixture(scope="session")
def scene():
    return reference_scene()


@pytest.fixture(scope="session")
def params():
    return ChannelParams()


@pytest.fixture(scope="session")
def map14(scene, params):
    return cached_map(scene, 0.14, params)


@pytest.fixture(scope="session")
def truth(scene, params):
    return make_truth(scene, TRIALS, SEED, params)


@pytest.fixture(scope="session")
def surfaces(scene, params):
    return fit_scene(scene, 0.10, params)


@pytest.fixture(scope="session")
def dense10(scene, params):
    return cached_map(scene, 0.10, params)


@pytest.fixture(scope="session")
def filtered():
    """(map, truth) per LED bandwidth, built on demand."""
    scene, params = reference_scene(), ChannelParams()
    store = {}

    def get(bw):
        if bw not in store:
            flt = SystemFilter(f_led=bw)
            store[bw] = (cached_map(scene, 0.14, params, flt),
                         make_truth(scene, TRIALS, SEED, params, flt), flt)
        return store[bw]

    return get


INF = math.inf
