from mutualattack.selfcheck import CHECKS, CheckResult, run_checks


def test_every_builtin_check_passes():
    results = run_checks()
    assert [r.name for r in results] == list(CHECKS)
    failed = [r for r in results if not r.passed]
    assert not failed, failed


def test_failures_are_collected_not_raised():
    def broken():
        raise AssertionError("nope")

    def fine():
        return None

    results = run_checks({"broken": broken, "fine": fine})
    assert results == [
        CheckResult("broken", False, "AssertionError: nope"),
        CheckResult("fine", True),
    ]
