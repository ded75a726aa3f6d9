"""Acceptance suite: one test per criterion, each printing its summary line."""
import pytest

from hysteresis.acceptance import CRITERIA, run_criterion


@pytest.mark.parametrize("name", list(CRITERIA), ids=[f"{CRITERIA[n][0]:02d}-{n}" for n in CRITERIA])
def test_criterion(name):
    result = run_criterion(name)
    print()
    print(result.line())
    for c in result.checks:
        print(f"    {c.label}: {c.statistic:.6g} ({'<=' if c.kind == 'max' else '>='} {c.bound:g}) "
              f"{'ok' if c.passed else 'FAIL'}")
    assert result.passed, result.line()
