import numpy as np
import pytest

from dualloss.data.synth import SynthConfig, synth_dataset


@pytest.fixture(scope="session")
def small_synth():
    """Six separable classes, 40 samples each: fast enough for loop-level tests."""
    return synth_dataset(SynthConfig(per_class=40, dim=16))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion; shown in the terminal summary."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", {})

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
