import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", derandomize=True, deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    if mod is None:
        return
    terminalreporter.section("acceptance criteria")
    for k in range(1, 12):
        tag = f"C{k}"
        terminalreporter.write_line(mod.LINES.get(tag, f"[{tag}] FAIL  did not report (errored or deselected)"))
