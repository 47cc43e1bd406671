import pytest

from helpers import toy_config, toy_data

_criteria: dict[int, str] = {}


def pytest_runtest_logreport(report):
    item_marks = getattr(report, "criterion", None)
    if item_marks is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _criteria[item_marks] = "PASS" if report.outcome == "passed" else "FAIL"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = mark.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        terminalreporter.write_line(f"criterion {n}: {_criteria[n]}")


@pytest.fixture(scope="session")
def toy():
    return toy_data(0)


@pytest.fixture(scope="session")
def toy_run(toy):
    from mlhash.trainer import train
    tr, _, _, cb = toy
    return train(tr, cb, toy_config(0))
