"""Collects the per-criterion verdict lines of the acceptance suite."""

import pytest

CRITERIA = {
    1: "filter-oracle equivalence",
    2: "gradient correctness",
    3: "resampling unbiasedness",
    4: "reward-rule conformance",
    5: "degenerate-filter equivalence",
    6: "trivial-map learning",
    7: "scaled directional claim",
    8: "path optimality bound",
    9: "determinism",
    10: "constraint checker soundness",
}
_LINES: dict[int, str] = {}


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` records and prints the line for criterion ``n``."""

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {CRITERIA[n]}: {detail}"
        _LINES[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        terminalreporter.write_line(
            _LINES.get(n, f"criterion {n:2d} FAIL  {CRITERIA[n]}: did not complete"))
