import numpy as np
import pytest

from psb.numerics import Param


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance(request):
    """Record and print a one-line verdict for an acceptance criterion."""
    def report(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        request.config._acceptance_lines.append(line)
        return ok
    return report


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_params(rng, *shapes, positive=False):
    out = []
    for i, s in enumerate(shapes):
        x = rng.standard_normal(s)
        if positive:
            x = np.abs(x) + 0.5
        out.append(Param(x, name=f"p{i}"))
    return out
