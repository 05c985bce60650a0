from collections import defaultdict

import pytest

_CHECKS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_CHECKS] = defaultdict(list)


@pytest.fixture
def acceptance(request):
    """``acceptance(criterion, name, ok, detail)`` records one sub-check of an acceptance criterion."""
    checks = request.config.stash[_CHECKS]

    def record(criterion: int, name: str, ok: bool, detail: str = "") -> bool:
        checks[criterion].append((name, bool(ok), detail))
        print(f"  criterion {criterion} / {name}: {'ok' if ok else 'NOT MET'} {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, config):
    checks = config.stash.get(_CHECKS, {})
    if not checks:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(checks):
        subs = checks[criterion]
        verdict = "PASS" if all(ok for _, ok, _ in subs) else "FAIL"
        failed = [f"{name} ({detail})" for name, ok, detail in subs if not ok]
        tail = f"  unmet: {'; '.join(failed)}" if failed else ""
        terminalreporter.write_line(f"CRITERION {criterion}: {verdict}  [{len(subs)} checks]{tail}")
