import pytest

from relpos import tensor as T

# criterion number -> (name, passed, detail); filled by the acceptance suite
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture(autouse=True)
def _reset_precision():
    T.set_precision("float32")
    yield
    T.set_precision("float32")


@pytest.fixture
def f64():
    with T.precision("float64"):
        yield


@pytest.fixture
def criterion():
    """Record one acceptance line and assert it."""

    def record(number: int, name: str, passed: bool, detail: str = "") -> None:
        ACCEPTANCE[number] = (name, bool(passed), detail)
        print(f"criterion {number} {'PASS' if passed else 'FAIL'}: {name} {detail}")
        assert passed, f"criterion {number} ({name}) failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, 9):
        if number not in ACCEPTANCE:
            terminalreporter.write_line(f"criterion {number} FAIL: not recorded (errored or deselected)")
            continue
        name, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number} {'PASS' if passed else 'FAIL'}: {name} | {detail}")
