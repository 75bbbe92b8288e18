import numpy as np
import pytest
from hypothesis import settings

from mesic.config import builtin
from mesic.simulate import build_scenario, run

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def runs():
    """Integrated builtin scenarios, computed once per session."""
    cache = {}

    def get(name, **overrides):
        key = (name, repr(sorted(overrides.items())))
        if key not in cache:
            cache[key] = run(build_scenario(builtin(name, **overrides)))
        return cache[key]

    return get


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance report collected by ``test_acceptance``."""
    import sys

    for mod in list(sys.modules.values()):
        report = getattr(mod, "ACCEPTANCE_REPORT", None)
        if report is not None and report.entries:
            terminalreporter.section("acceptance criteria")
            for line in report.lines():
                terminalreporter.write_line(line)
            return
