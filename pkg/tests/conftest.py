import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria: one pass/fail line each, printed in the terminal summary
ACCEPTANCE = pytest.StashKey[dict]()
EXPECTED = pytest.StashKey[set]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = {}
    config.stash[EXPECTED] = set()
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion number")


def pytest_collection_modifyitems(session, config, items):
    config.stash[EXPECTED] = {m.args[0] for item in items for m in item.iter_markers("acceptance")}


@pytest.fixture
def criterion(request):
    """Record ``(ok, detail)`` for a criterion part; parts of one criterion are combined."""
    store = request.config.stash[ACCEPTANCE]

    def record(number, ok, detail, part=""):
        store.setdefault(number, {})[part] = (bool(ok), detail)
        print(f"criterion {number}{part}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(ACCEPTANCE, {})
    numbers = sorted(set(store) | config.stash.get(EXPECTED, set()))
    if not numbers:
        return
    terminalreporter.section("acceptance criteria")
    for number in numbers:
        parts = store.get(number)
        if not parts:
            terminalreporter.write_line(f"criterion {number}: FAIL  (no result recorded)")
            continue
        ok = all(v[0] for v in parts.values())
        if list(parts) == [""]:
            detail = parts[""][1]
        else:
            detail = "; ".join(f"{k} {'pass' if v[0] else 'FAIL'} {v[1]}" for k, v in sorted(parts.items()))
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
