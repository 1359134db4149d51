"""Shared pytest plumbing: a registry of end-to-end check outcomes.

Each entry in CHECKS is one headline guarantee the package makes; the
matching test records a pass/fail verdict plus the measured numbers,
and the terminal summary prints one line per guarantee so a run can be
audited without scrolling through the full log.
"""

CHECKS = (
    "reflectance-model",
    "gradients-vs-finite-differences",
    "transport-reference-values",
    "shadow-labels-vs-visibility",
    "pipeline-recovery",
    "ablations-degrade-recovery",
    "relighting-and-edits",
    "deterministic-artifacts",
)

_results: dict = {}


def record_result(name: str, passed: bool, detail: str) -> None:
    assert name in CHECKS, f"unknown check name: {name}"
    _results[name] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _results:
        return
    tr = terminalreporter
    tr.section("toolkit guarantees")
    for name in CHECKS:
        if name in _results:
            passed, detail = _results[name]
            tag = "PASS" if passed else "FAIL"
        else:
            tag, detail = "SKIP", "not exercised in this run"
        tr.write_line(f"[{tag}] {name}: {detail}")
