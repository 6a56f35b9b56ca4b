import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from lookalike.customer_data import SynthConfig, TimeWindow, generate_synthetic


@pytest.fixture(scope="session")
def small_universe():
    return generate_synthetic(SynthConfig(400, 6, 3, TimeWindow(0, 120), True, 11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Acceptance criteria record (name -> (passed, detail)); printed in the terminal summary.
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def accept(request):
    def record(name: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE[name] = (bool(ok), detail)
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
        with request.config.pluginmanager.get_plugin("capturemanager").global_and_fixture_disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
