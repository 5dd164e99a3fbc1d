"""Acceptance result reporting.

Acceptance tests call :func:`helpers.record`; the terminal summary then
prints one PASS/FAIL line per criterion, merging sub-checks (6a, 6b, 6c).
"""

import helpers

CRITERIA = {
    "1": "code storage is 4 bytes per Gaussian",
    "2": "analytic gradients match finite differences",
    "3": "tiled compositor matches brute-force oracle",
    "4": "binary codec bijection and straight-through estimator",
    "5": "segmentation quality on the default synthetic scene",
    "6": "ablation directions",
    "7": "class-map inference structure and cost",
    "8": "determinism across runs and thread counts",
}


def pytest_terminal_summary(terminalreporter):
    results = helpers.ACCEPTANCE
    if not results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for key, title in CRITERIA.items():
        parts = [r for r in results if r[0].rstrip("abc") == key]
        if not parts:
            tr.write_line(f"criterion {key}: NOT RUN  {title}")
            continue
        ok = all(r[1] for r in parts)
        detail = "; ".join(f"{r[0]}: {r[2]}" if len(parts) > 1 else r[2] for r in parts)
        tr.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {title}  [{detail}]")
