import pytest

from berknash.scenarios import make_builtin

ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])


@pytest.fixture(scope="session")
def builtin():
    cache: dict = {}

    def get(name, **params):
        key = (name, repr(sorted(params.items())))
        if key not in cache:
            cache[key] = make_builtin(name, params)
        return cache[key]

    return get


def finite_spec(fam, true, payoff, prior=None, thetas=None, outcomes=(0.0, 1.0), actions=None, sid="toy"):
    """Small categorical scenario description; fam is theta x action x outcome."""
    n_t, n_a = len(fam), len(fam[0])
    thetas = thetas if thetas is not None else [[float(i)] for i in range(n_t)]
    return {
        "id": sid,
        "grid": {"points": thetas},
        "actions": {"values": actions if actions is not None else [float(a) for a in range(n_a)]},
        "outcomes": {"kind": "finite", "values": list(outcomes)},
        "kernel": {"kind": "categorical", "prob": fam},
        "true_kernel": {"kind": "categorical", "prob": true},
        "payoff": {"kind": "table", "values": payoff},
        "prior": {"weights": prior if prior is not None else [1.0] * n_t},
    }
