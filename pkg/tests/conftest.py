import socket
from collections import defaultdict
from pathlib import Path

import pytest

from scgprompt.dataset import load_task
from scgprompt.scenarios import planted_split, planted_task

ROOT = Path(__file__).resolve().parent.parent
TASKS = ROOT / "tasks"
DATA = Path(__file__).resolve().parent / "data"

_criteria: dict[str, list[str]] = defaultdict(list)
_labels: dict[str, str] = {}


class NetworkBlocked(RuntimeError):
    pass


@pytest.fixture(autouse=True)
def no_network(request, monkeypatch):
    """Offline tests must not open sockets; live tests opt out."""
    if request.node.get_closest_marker("live"):
        yield
        return
    opened = []

    def guard(*args, **kwargs):
        opened.append(args)
        raise NetworkBlocked("network access attempted in an offline test")

    monkeypatch.setattr(socket.socket, "connect", guard)
    monkeypatch.setattr(socket, "create_connection", guard)
    yield opened


@pytest.fixture
def planted():
    task, table = planted_task()
    return task, table, planted_split(table)


@pytest.fixture(params=["pandemic", "traffic", "swissmetro"])
def domain_task(request):
    return load_task(TASKS / request.param)


def pytest_runtest_logreport(report):
    marker = getattr(report, "_acceptance", None)
    if marker is None:
        return
    key, label = marker
    _labels[key] = label
    if report.when == "call" or report.outcome in ("failed", "skipped"):
        _criteria[key].append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is not None:
        report._acceptance = (m.args[0], m.kwargs.get("label", m.args[1] if len(m.args) > 1 else ""))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")

    def order(key):
        digits = "".join(ch for ch in key if ch.isdigit())
        return int(digits) if digits else 0

    for key in sorted(_criteria, key=order):
        outcomes = _criteria[key]
        if "failed" in outcomes:
            verdict = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        terminalreporter.write_line(f"{key:<5} {verdict:<4}  {_labels[key]}  ({len(outcomes)} checks)")
