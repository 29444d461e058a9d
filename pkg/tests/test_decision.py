import numpy as np
import pytest
from scipy.special import softmax

from berknash.decision import best_reply_set, expected_utility, logit_choice, logit_probs
from berknash.model import belief_from_weights, build_scenario, point_belief

from conftest import finite_spec


def bets():
    fam = [[[0.75, 0.25], [0.75, 0.25]], [[0.25, 0.75], [0.25, 0.75]]]
    return build_scenario(finite_spec(fam, [[0.5, 0.5], [0.5, 0.5]], [[1.0, 0.0], [0.0, 1.0]]))


def test_expected_utility_under_model():
    scn = bets()
    assert expected_utility(scn, 0, 0) == pytest.approx(0.75)
    assert expected_utility(scn, 1, 0) == pytest.approx(0.25)


def test_best_reply_and_ties():
    scn = bets()
    assert best_reply_set(scn, point_belief(2, 0)).indices == (0,)
    assert best_reply_set(scn, point_belief(2, 1)).indices == (1,)
    tie = best_reply_set(scn, belief_from_weights([1.0, 1.0]))
    assert tie.indices == (0, 1)
    assert tie.to_csv().splitlines()[0] == "action_index,utility,optimal_flag"


def test_logit_matches_softmax():
    u = np.array([0.3, -1.2, 2.0, 2.0])
    for tau in (0.01, 0.5, 3.0):
        assert np.allclose(logit_probs(u, tau), softmax(u / tau), atol=1e-15)
    with pytest.raises(ValueError):
        logit_probs(u, 0.0)


def test_logit_choice_uniform_at_indifference():
    scn = bets()
    mix = logit_choice(scn, belief_from_weights([1.0, 1.0]), 0.1)
    assert np.allclose(mix.probs, [0.5, 0.5])


def test_override_bypasses_utility(builtin):
    scn = builtin("slow-learning")
    br = best_reply_set(scn, belief_from_weights([1.0, 1.0]))
    kappa = scn.policy_override.kappa
    assert br.override is not None
    assert br.override.weights(scn.n_actions) @ scn.actions.values == pytest.approx(kappa / 4)
    assert best_reply_set(scn, point_belief(2, 0)).indices == (0,)
