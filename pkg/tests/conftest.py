import pytest

from rattest.provision import SupplyChain, honest_device


@pytest.fixture(scope="session")
def chain():
    return SupplyChain.generate(b"test-chain")


@pytest.fixture
def device(chain):
    return honest_device(chain, "device-1")


@pytest.fixture
def psk():
    return b"0123456789abcdef-psk"


# acceptance criteria reporting: tests marked ``criterion(n, title)`` are
# tallied and summarised one line per criterion after the run

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_runtest_logreport(report):
    mark = getattr(report, "_criterion", None)
    if mark is None:
        return
    if report.when == "call" or report.failed or report.skipped:
        number, title = mark
        entry = _criteria.setdefault(number, {"title": title, "ok": True, "seen": False})
        entry["seen"] = True
        entry["ok"] &= report.passed or (report.when != "call" and not report.failed and not report.skipped)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result()._criterion = mark.args


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        e = _criteria[number]
        status = "PASS" if e["ok"] and e["seen"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {e['title']}")
