import pytest

from sohtl.dataset import SynthProfile, synth_battery

# (criterion number, label, status, detail) recorded by test_acceptance
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, label, status, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"[{status}] {number:>2}. {label}: {detail}")


@pytest.fixture(scope="session")
def small_battery():
    """40 short cycles, enough for p=f=4 pipelines that train in about a second."""
    return synth_battery(SynthProfile(n_cycles=40, base_cycle_length=48, knee_cycle=20,
                                      fade_rate_post=5e-3, seed=3, battery_id="SMALL"))
