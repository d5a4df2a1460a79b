"""Acceptance gate: every criterion from the verification suite must pass
within its wall-clock budget. One test per criterion, one line per result."""

import time

import pytest

from visplan import acceptance


@pytest.mark.parametrize("name,budget,check",
                         [pytest.param(n, b, f, id=n.replace(" ", "-"))
                          for n, b, f in acceptance.CRITERIA])
def test_criterion(name, budget, check):
    start = time.perf_counter()
    ok, detail = check()
    elapsed = time.perf_counter() - start
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({elapsed:.1f}s)")
    assert ok, detail
    assert elapsed <= budget, f"{name} took {elapsed:.1f}s, budget {budget:.0f}s"
