"""Prints one verdict line per numbered acceptance criterion after the run."""
from __future__ import annotations

import re

CRITERIA = {
    1: "density-correction oracle equivalence on 10,000 random profiles",
    2: "SH fitting recovery and residual optimality",
    3: "analytic gradients match central finite differences",
    4: "compositing weight/transmittance invariants and closed forms",
    5: "desk-scale ablation: PSNR margin, floater ratio, runtime",
    6: "vi-only render no brighter than full at the glint peak",
    7: "byte-exact format round-trips and seeded rerun determinism",
}

_PATTERN = re.compile(r"test_criterion_(\d+)")


def pytest_terminal_summary(terminalreporter):
    verdicts = {}
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            match = _PATTERN.search(getattr(report, "nodeid", ""))
            if match:
                number = int(match.group(1))
                ok = outcome == "passed" and verdicts.get(number, True)
                verdicts[number] = ok
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(verdicts):
        verdict = "PASS" if verdicts[number] else "FAIL"
        terminalreporter.write_line(
            f"criterion {number}: {verdict} - {CRITERIA.get(number, '')}")
