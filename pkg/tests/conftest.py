import re

import numpy as np
import pytest
import torch

_CRITERIA = {}  # number -> {"title", "outcome", "detail"}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
    yield


@pytest.fixture
def criterion(request):
    """Record the measured detail for an acceptance criterion test named ``test_criterion_<n>_...``."""
    num = int(re.match(r"test_criterion_(\d+)", request.node.name).group(1))
    entry = _CRITERIA.setdefault(num, {"title": "", "outcome": None, "detail": ""})

    def record(title, detail):
        entry["title"], entry["detail"] = title, detail

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = re.match(r"test_criterion_(\d+)", item.name)
    if not m or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    entry = _CRITERIA.setdefault(int(m.group(1)), {"title": "", "outcome": None, "detail": ""})
    entry["outcome"] = "PASS" if rep.passed else "FAIL"
    if not entry["title"]:
        entry["title"] = item.name


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        e = _CRITERIA[num]
        line = f"criterion {num}: {e['outcome'] or 'NOT RUN'}  {e['title']}"
        if e["detail"]:
            line += f"  [{e['detail']}]"
        terminalreporter.write_line(line)
