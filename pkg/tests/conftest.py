import pytest

# criterion number -> (title, outcome, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    number = getattr(item.function, "criterion", None)
    if number is None:
        return
    title = item.function.criterion_title
    detail = item.user_properties and dict(item.user_properties).get("detail", "") or ""
    if rep.when == "call":
        ACCEPTANCE[number] = (title, "PASS" if rep.passed else "FAIL", detail)
    elif rep.when == "setup" and rep.skipped:
        reason = rep.longrepr[2] if isinstance(rep.longrepr, tuple) else str(rep.longrepr)
        ACCEPTANCE[number] = (title, "SKIP", reason)
    elif rep.failed and number not in ACCEPTANCE:
        ACCEPTANCE[number] = (title, "FAIL", f"{rep.when} error")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, status, detail = ACCEPTANCE[number]
        line = f"criterion {number:2d} {status}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
