import numpy as np
import pytest

from scorestring.fields import analytic_fields, appendix_c_mixture, make_schedule


@pytest.fixture(scope="session")
def linear():
    return make_schedule("linear")


@pytest.fixture(scope="session")
def mix2():
    return appendix_c_mixture(2)


@pytest.fixture(scope="session")
def oracle2(linear, mix2):
    return analytic_fields(linear, mix2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report():
    """Record one PASS/FAIL line per criterion; returns whether it passed."""

    def report(number, name, passed, detail, seconds, limit):
        ok = bool(passed) and seconds < limit
        line = (f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail} "
                f"[{seconds:.1f}s, limit {limit:.0f}s]")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
