# criterion number -> {"title": str, "outcomes": [str], "notes": [str]}
_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "outcomes": [], "notes": []})
    if call.when == "setup" and call.excinfo is not None:
        entry["outcomes"].append("skip" if call.excinfo.errisinstance(_skip_types()) else "fail")
    elif call.when == "call":
        if call.excinfo is None:
            entry["outcomes"].append("pass")
        else:
            entry["outcomes"].append("skip" if call.excinfo.errisinstance(_skip_types()) else "fail")
        entry["notes"].extend(v for k, v in item.user_properties if k == "note")


def _skip_types():
    import pytest

    return (pytest.skip.Exception,)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        outs = entry["outcomes"]
        if "fail" in outs:
            status = "FAIL"
        elif "pass" in outs:
            status = "PASS"
        else:
            status = "SKIP"
        extra = "; ".join(entry["notes"])
        tr.write_line(f"criterion {number:2d} [{status}] {entry['title']}" + (f" :: {extra}" if extra else ""))
