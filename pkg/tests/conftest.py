import pathlib
import shutil

import numpy as np
import pytest

from spinecomplete import _accel

FIXTURE_DIR = pathlib.Path(__file__).parent / "fixtures" / "rgbd"
FIXTURE_MANIFEST = FIXTURE_DIR / "manifest.json"


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    """Run the test once with the compiled kernels and once with the numpy fallback."""
    if request.param == "numba" and not _accel.HAVE_NUMBA:
        pytest.skip("numba not installed")
    with _accel.use_numba(request.param == "numba"):
        yield request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def fixture_copy(tmp_path):
    """A writable copy of the bundled RGB-D fixture; returns the manifest path."""
    dst = tmp_path / "rgbd"
    shutil.copytree(FIXTURE_DIR, dst)
    return str(dst / "manifest.json")


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def report_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
