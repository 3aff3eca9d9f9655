import os

import pytest
from hypothesis import settings

settings.register_profile("ci", deadline=None, max_examples=60, derandomize=True)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

# acceptance results, keyed by criterion number: (passed, title, note)
_CRITERIA: dict[int, tuple[bool, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n; reported in the terminal summary")


@pytest.fixture
def note(request):
    """Attach a one-line measurement summary to the running acceptance test."""

    def _note(text: str) -> None:
        request.node.criterion_note = text

    return _note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    n, title = mark.args
    text = getattr(item, "criterion_note", "")
    if rep.failed and not text:
        crash = getattr(rep.longrepr, "reprcrash", None)
        text = crash.message.splitlines()[0] if crash else "error"
    _CRITERIA[n] = (rep.passed, title, text)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, title, text = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {text}")
