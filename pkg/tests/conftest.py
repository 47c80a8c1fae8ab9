import numpy as np
import pytest

from helpers import random_model  # noqa: F401


@pytest.fixture
def nprng():
    return np.random.default_rng(12345)



_criteria: dict[int, list] = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", tuple(mark.args)))


def pytest_runtest_logreport(report):
    for key, (number, title) in report.user_properties:
        if key != "criterion":
            continue
        if report.when == "call" or report.failed:
            entry = _criteria.setdefault(number, [title, True])
            entry[1] = entry[1] and report.passed


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, ok = _criteria[number]
        terminalreporter.write_line(f"criterion {number} ({title}): {'PASS' if ok else 'FAIL'}")
