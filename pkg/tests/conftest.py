import numpy as np
import pytest

from sparsecon.config import default_config
from sparsecon.pipeline import run_in_memory


class ExactDynamics:
    """Stand-in for a learned IGP that returns the true derivatives."""

    def __init__(self, system):
        self.system = system
        n = system.state_dim
        self.input_mask = np.ones(n + system.control_dim, bool)

    def predict(self, Z):
        Z = np.atleast_2d(Z)
        n = self.system.state_dim
        return self.system.dynamics(Z[:, :n], Z[:, n:])


@pytest.fixture(scope="session")
def unicycle_run():
    """Default unicycle pipeline, seed 0, trained once per session."""
    cfg = default_config("unicycle")
    art, report = run_in_memory(cfg)
    return cfg, art, report


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance(capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""

    def report(number, title, ok, detail):
        line = f"ACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
