from __future__ import annotations

import pytest

_TITLES = {
    1: "gradient fidelity",
    2: "zero gradient on clipped branches",
    3: "single sub-action degeneracy",
    4: "GAE oracle equivalence",
    5: "unclipped-count ordering",
    6: "clipping beats no clipping",
    7: "learning beats random baseline",
    8: "large-eps robustness",
    9: "async integrity",
    10: "serial determinism",
}
_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.fixture
def record(request):
    """Attach a one-line detail to the current criterion's summary line."""
    def _record(detail: str) -> None:
        request.node.user_properties.append(("detail", detail))

    return _record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if report.when == "call" or (report.when == "setup" and report.failed):
        detail = "; ".join(v for k, v in item.user_properties if k == "detail")
        if report.failed and not detail:
            detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
        _RESULTS[n] = (report.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        ok, detail = _RESULTS[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {_TITLES.get(n, '')}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
