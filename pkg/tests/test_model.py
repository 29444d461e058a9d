import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from berknash.model import (
    ActionSet,
    AllZero,
    Belief,
    DimensionMismatch,
    EmptyGrid,
    LengthMismatch,
    MixedAction,
    NormalizationError,
    ParameterGrid,
    SupportViolation,
    ValidationError,
    belief_from_weights,
    build_scenario,
    dumps_spec,
    load_scenario,
    scenario_to_spec,
)

from conftest import finite_spec


def coin_like(**kw):
    fam = [[[0.75, 0.25]], [[0.25, 0.75]]]
    return finite_spec(fam, [[0.5, 0.5]], [[0.0, 0.0]], **kw)


def test_build_minimal_scenario():
    scn = build_scenario(coin_like())
    assert scn.n_theta == 2 and scn.n_actions == 1
    assert np.allclose(scn.prior.probs, [0.5, 0.5])
    assert not scn.kl_table.flags.writeable


def test_rows_must_normalize():
    spec = coin_like()
    spec["kernel"]["prob"][0][0] = [0.7, 0.25]
    with pytest.raises(NormalizationError):
        build_scenario(spec)


def test_support_condition_enforced():
    spec = coin_like()
    spec["kernel"]["prob"][0][0] = [1.0, 0.0]
    with pytest.raises(SupportViolation):
        build_scenario(spec)


def test_zero_prior_weight_rejected():
    with pytest.raises(SupportViolation):
        build_scenario(coin_like(prior=[1.0, 0.0]))


def test_shape_errors():
    spec = coin_like()
    spec["true_kernel"]["prob"] = [[0.5, 0.5], [0.5, 0.5]]
    with pytest.raises(DimensionMismatch):
        build_scenario(spec)
    with pytest.raises(DimensionMismatch):
        build_scenario(coin_like(prior=[1.0, 1.0, 1.0]))


def test_missing_key():
    spec = coin_like()
    del spec["payoff"]
    with pytest.raises(ValidationError):
        build_scenario(spec)


def test_empty_grid():
    with pytest.raises(EmptyGrid):
        ParameterGrid.from_points([])


def test_belief_errors():
    with pytest.raises(AllZero):
        belief_from_weights([0.0, 0.0])
    with pytest.raises(LengthMismatch):
        belief_from_weights([1.0, 1.0], n=3)


def test_mixed_action_validates():
    with pytest.raises(ValidationError):
        MixedAction.of([0.5, 0.6])
    assert MixedAction.pure(3, 1).support == [1]


def test_interval_actions_locate():
    acts = ActionSet.interval(0.0, 1.0, 11)
    ref = acts.locate(0.25)
    assert (ref.lo, ref.hi) == (2, 3)
    assert ref.w == pytest.approx(0.5)
    assert np.allclose(ref.weights(11) @ acts.values, 0.25)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(1e-300, 1e300), min_size=1, max_size=30))
def test_belief_normalizes(weights):
    b = belief_from_weights(weights)
    assert abs(b.probs.sum() - 1.0) <= 1e-12
    assert np.all(b.probs >= 0)


def test_log_weights_survive_extreme_magnitudes():
    b = Belief(np.array([-1e6, -1e6 + np.log(3.0)]))
    assert np.allclose(b.probs, [0.25, 0.75])


def test_spec_round_trip_is_fixed_point(tmp_path, builtin):
    for name in ("coin", "monopolist", "slow-learning", "adverse-selection"):
        text = dumps_spec(scenario_to_spec(builtin(name)))
        p = tmp_path / f"{name}.json"
        p.write_text(text)
        again = dumps_spec(scenario_to_spec(load_scenario(str(p))))
        assert again == text
        json.loads(text)


def test_round_trip_preserves_tables(builtin):
    scn = builtin("monopolist")
    back = build_scenario(scenario_to_spec(scn))
    assert np.array_equal(back.kl_table, scn.kl_table)
    assert np.array_equal(back.prior.probs, scn.prior.probs)
