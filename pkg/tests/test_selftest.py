import pytest

from nbtcomplete import selftest


@pytest.mark.parametrize("check", selftest.CHECKS, ids=[c.__name__ for c in selftest.CHECKS])
def test_selftest_check(check):
    ok, detail = check()
    assert ok, detail


def test_run_all_reports_every_check():
    lines = []
    assert selftest.run_all(verbose=True, out=lines.append)
    assert sum(line.startswith("PASS") for line in lines) == len(selftest.CHECKS)
