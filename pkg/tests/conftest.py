import warnings

import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for the acceptance summary."""

    def record(k, title, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {k:>2}: {title}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE_LINES.append((k, line))
        print(line)
        return ok

    return record


@pytest.fixture(autouse=True)
def _quiet_substeps():
    # OU substep refinement is reported as a warning; the statistical tests do not care
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="OU step too large", category=RuntimeWarning)
        yield


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES, key=lambda t: t[0]):
            terminalreporter.write_line(line)
