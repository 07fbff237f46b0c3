import time

import pytest

from turbos.verify import SUITES, run_suite


def test_every_suite_registered():
    assert set(SUITES) == {"numerics", "ssd", "attention", "moe", "model", "cpsim", "rlmath"}
    assert all(SUITES[s] for s in SUITES)


def test_all_suites_pass_quickly():
    t0 = time.perf_counter()
    results = run_suite("all", seed=3, trials=3)
    assert time.perf_counter() - t0 < 300
    failed = [r.line() for r in results if not r.passed]
    assert not failed, failed
    assert len({r.name for r in results}) == len(results)


def test_check_line_format():
    line = run_suite("numerics", trials=1)[0].line()
    head, name, verdict, dev = line.split()
    assert head == "CHECK" and verdict in ("pass", "fail") and float(dev) >= 0


def test_unknown_suite():
    with pytest.raises(KeyError):
        run_suite("nope")
