import numpy as np
import pytest

from spectra_invar import tensor as T


def numeric_grad(f, arrays, eps=1e-3):
    """Central differences of scalar ``f()`` w.r.t. every element of each array (perturbed in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            fp = f()
            a[i] = old - eps
            fm = f()
            a[i] = old
            g[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


@pytest.fixture
def leaf():
    def make(arr):
        return T.Tensor(np.array(arr, dtype=np.float64), requires_grad=True)
    return make


# acceptance reporting: tests marked criterion(n) get one PASS/FAIL line in the terminal summary
_VERDICTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not rep.failed:
        return
    n = mark.args[0]
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed:
        reason = rep.longrepr.reprcrash.message.splitlines()[0] if hasattr(rep.longrepr, "reprcrash") else ""
        detail = f"{detail} | {reason}" if detail else reason
    _VERDICTS[n] = ("PASS" if rep.passed else "FAIL", item.name, detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        verdict, name, detail = _VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {name}  {detail}")
