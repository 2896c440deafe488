import math

import numpy as np
import pytest

from millstab.dynamics import ProcessParameters, simulate_dde, tooth_period
from millstab.sld import GridSpec, compute_sld

TABLE1 = ProcessParameters()
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one acceptance line; the test still asserts on the outcome."""
    def report(tag: str, ok: bool, detail: str) -> bool:
        line = f"{tag} {'PASS' if ok else 'FAIL'} {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[0][1:])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def table1():
    return TABLE1


@pytest.fixture(scope="session")
def table1_grid():
    """Default 200 x 100 lobe diagram for the nominal parameters (shared, ~10 s)."""
    return compute_sld(TABLE1, GridSpec())


@pytest.fixture(scope="session")
def unstable_run():
    """Noise-free run at (11500 rpm, 1 mm) over 0.03 s."""
    return simulate_dde(TABLE1, [(0.0, 11500.0)], 1.0, 0.03)


@pytest.fixture(scope="session")
def shipped():
    from millstab.closed_loop import Scenario, shipped_scenario
    return Scenario.from_dict(shipped_scenario())


@pytest.fixture(scope="session")
def online_report(shipped):
    from millstab.closed_loop import run_scenario, with_mode
    return run_scenario(with_mode(shipped, "online_control"))


@pytest.fixture(scope="session")
def offline_report(shipped):
    from millstab.closed_loop import run_scenario, with_mode
    return run_scenario(with_mode(shipped, "offline_control"))


def rms(x):
    return float(np.sqrt(np.mean(np.sum(np.atleast_2d(x) ** 2, axis=-1))))


def delay(speed, params=TABLE1):
    return tooth_period(params.teeth_count, speed)


def free_decay_rate(params=TABLE1):
    return params.damping_ratio * params.natural_frequency


def log_energy_slope(traj, start_fraction=0.5):
    t = traj.t
    mask = t >= t[0] + start_fraction * (t[-1] - t[0])
    e = np.sum(traj.q[mask] ** 2, axis=1)
    return float(np.polyfit(t[mask], np.log(e + 1e-300), 1)[0])


__all__ = ["TABLE1", "rms", "delay", "free_decay_rate", "log_energy_slope", "math"]
