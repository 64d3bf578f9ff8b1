import contextlib

import pytest

# criterion id -> (title, passed); filled by the acceptance module
ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Context manager recording PASS/FAIL for one acceptance criterion."""

    @contextlib.contextmanager
    def record(number, title):
        try:
            yield
        except BaseException:
            ACCEPTANCE[number] = (title, False)
            print(f"ACCEPTANCE {number}: FAIL  {title}")
            raise
        ACCEPTANCE[number] = (title, True)
        print(f"ACCEPTANCE {number}: PASS  {title}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")
