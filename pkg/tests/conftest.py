import contextlib
import time

import numpy as np
import pytest

ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """Context manager that records one pass/fail line per acceptance criterion.

    The body sets ``res["ok"]`` and ``res["detail"]``; an exception records a fail.
    """
    lines = request.config.stash[ACCEPTANCE]

    @contextlib.contextmanager
    def run(number, title):
        res = {"ok": False, "detail": ""}
        t0 = time.perf_counter()
        try:
            yield res
        except Exception as e:
            res["ok"] = False
            if not res["detail"]:
                res["detail"] = f"{type(e).__name__}: {e}"
            raise
        finally:
            status = "PASS" if res["ok"] else "FAIL"
            line = f"criterion {number} {status}  {title}: {res['detail']} ({time.perf_counter() - t0:.1f} s)"
            lines.append(line)
            print(line)

    return run


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
