from fractions import Fraction

import numpy as np
import pytest

from berknash.inference import kl_min_set
from berknash.model import GameScenario, MixedAction
from berknash.scenarios import (
    ParamOutOfRange,
    UnknownBuiltin,
    describe_builtin,
    list_builtins,
    make_builtin,
)


def test_builtin_names():
    assert set(list_builtins()) == {
        "coin",
        "misspecified-bernoulli",
        "overconfidence",
        "adverse-selection",
        "monopolist",
        "effort-game",
        "slow-learning",
    }


@pytest.mark.parametrize("name", ["overconfidence", "adverse-selection", "monopolist", "effort-game", "slow-learning"])
@pytest.mark.parametrize("resolution", [1, 2, 4])
def test_builtins_validate_when_refined(name, resolution):
    scn = make_builtin(name, {"resolution": resolution})
    if not isinstance(scn, GameScenario):
        assert np.all(np.isfinite(scn.kl_table))


def test_every_reference_has_provenance():
    for name in list_builtins():
        refs = describe_builtin(name)["references"]
        assert refs
        for ref in refs.values():
            assert set(ref) == {"value", "provenance"}
            assert ref["provenance"].split(":")[0] in {"SOURCE", "DERIVED", "TRIVIAL"}


def test_unknown_builtin_and_bad_params():
    with pytest.raises(UnknownBuiltin):
        make_builtin("nope")
    with pytest.raises(ParamOutOfRange):
        make_builtin("overconfidence", {"alpha": 1.0})
    with pytest.raises(ParamOutOfRange):
        make_builtin("overconfidence", {"theta_bar": 0.5})
    with pytest.raises(ParamOutOfRange):
        make_builtin("monopolist", {"colour": 1})


def test_monopolist_pure_low_price_minimizer(builtin):
    scn = builtin("monopolist")
    rep = kl_min_set(scn, MixedAction.of([1.0, 0.0]))
    assert len(rep.indices) == 1
    assert tuple(scn.grid.points[rep.indices[0]]) == pytest.approx((40.0, 3.0))


def test_overconfidence_projection_formula(builtin):
    scn = builtin("overconfidence")
    step = scn.grid.points[1, 0] - scn.grid.points[0, 0]
    for a in (0, 50, 150, 300):
        x = scn.actions.values[a]
        theta_m = 1 + (1 - 2) / (2 + x)
        k = int(np.argmin(scn.kl_table[:, a]))
        assert abs(scn.grid.points[k, 0] - theta_m) <= step / 2 + 1e-12


def test_adverse_selection_projection_is_conditional_pmf(builtin):
    scn = builtin("adverse-selection")
    joint = [[Fraction(x, 20) for x in row] for row in ((3, 1, 1), (1, 3, 1), (1, 2, 7))]
    costs = (1.0, 2.0, 3.0)
    for a, price in enumerate(scn.actions.values):
        rows = [r for c, r in zip(costs, joint) if c <= price]
        if not rows:
            continue
        F = sum(sum(r) for r in rows)
        pmf = np.array([float(sum(r[j] for r in rows) / F) for j in range(3)])
        rep = kl_min_set(scn, MixedAction.pure(scn.n_actions, a))
        assert len(rep.indices) == 1
        assert np.array_equal(scn.grid.points[rep.indices[0]], pmf)


def test_slow_learning_threshold_and_kernel(builtin):
    scn = builtin("slow-learning")
    assert scn.actions.values[-1] == pytest.approx(0.5)
    assert scn.policy_override.kappa == pytest.approx(0.25)
    # below a_bar the second model is KL-closer at every positive action
    assert np.all(scn.kl_table[1, 1:] < scn.kl_table[0, 1:])
    assert scn.kl_table[0, 0] == pytest.approx(scn.kl_table[1, 0])


def test_effort_game_oracle_solves_fixed_point():
    from berknash.scenarios import effort_game_oracle

    a = effort_game_oracle()
    s = 2 * a + a * a
    assert a == pytest.approx(0.5 * (1 + s) / (2 + s) * (1 + a), abs=1e-14)
    with pytest.raises(ParamOutOfRange):
        make_builtin("effort-game", {"theta_star": 1.0})
