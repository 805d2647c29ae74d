import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion label")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    label = marker.args[0]
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        if hasattr(rep, "wasxfail"):
            status = "FAIL (expected, see README)" if rep.skipped else "PASS (unexpected)"
        else:
            status = "PASS" if rep.passed else "FAIL"
        detail = dict(item.user_properties).get("detail", "")
        _RESULTS[item.nodeid] = (label, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, status, detail in sorted(_RESULTS.values(), key=lambda r: _key(r[0])):
        line = f"{status:<6} {label}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))


def _key(label):
    head = label.split()[0].rstrip("abcdefghij.:")
    return (int(head) if head.isdigit() else 99, label)
