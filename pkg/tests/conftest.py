import os

# per-step timings are specified single-threaded
for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import pytest  # noqa: E402

import benchmark  # noqa: E402

ACCEPTANCE = {}


@pytest.fixture(scope="session")
def trained():
    """Source-trained segmentor and synthesizer (trained on first use, then cached on disk)."""
    return benchmark.trained_models()


@pytest.fixture
def record():
    def _record(number, title, passed, detail):
        ACCEPTANCE[number] = (title, bool(passed), detail)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:2d}. {title}: {detail}")
