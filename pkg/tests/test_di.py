import math

import numpy as np
import pytest

from berknash import di
from berknash.dynamics import PathRecord, simulate_path
from berknash.equilibrium import check_equilibrium
from berknash.model import MixedAction, ValidationError, build_scenario

from conftest import finite_spec


def dominant():
    # one model, action 1 always pays more
    return build_scenario(finite_spec([[[0.5, 0.5], [0.5, 0.5]]], [[0.5, 0.5], [0.5, 0.5]], [[0.0, 0.0], [1.0, 1.0]]))


def two_basins():
    fam = [[[0.9, 0.1], [0.5, 0.5]], [[0.5, 0.5], [0.1, 0.9]]]
    return build_scenario(finite_spec(fam, [[0.9, 0.1], [0.1, 0.9]], [[1.0, 0.0], [0.0, 1.0]]))


def test_project_simplex():
    x = di.project_simplex(np.array([0.7, 0.7, -0.2]))
    assert x.sum() == pytest.approx(1.0) and x.min() >= 0
    assert np.allclose(x, [0.5, 0.5, 0.0])


def test_dominant_action_velocity_set():
    vs = di.di_velocity_set(dominant(), [0.3, 0.7])
    assert np.allclose(vs.velocities, [[-0.3, 0.3]])
    assert not vs.contains_zero
    for rule in di.SELECTIONS:
        assert np.allclose(vs.select(rule), [-0.3, 0.3])
    with pytest.raises(ValidationError):
        vs.select("fastest")


def test_closed_form_flow():
    tr = di.integrate_di(dominant(), [1.0, 0.0], 3.0, dt=1e-3)
    exact = 1 - np.exp(-tr.times)
    assert np.max(np.abs(tr.sigma[:, 1] - exact)) < 1e-3
    assert tr.max_drift < 1e-12


def test_exponential_decay_toward_pure_rest_point():
    tr = di.integrate_di(dominant(), [0.6, 0.4], 2.0, dt=1e-3)
    assert np.max(np.abs(tr.sigma[:, 0] - 0.6 * np.exp(-tr.times))) < 1e-3


def test_euler_is_first_order():
    scn = dominant()
    errs = []
    for dt in (1e-2, 5e-3):
        tr = di.integrate_di(scn, [1.0, 0.0], 1.0, dt=dt)
        errs.append(abs(tr.sigma[-1, 1] - (1 - math.exp(-1))))
    assert errs[1] == pytest.approx(errs[0] / 2, rel=0.05)


def test_monopolist_rest_point(builtin):
    scn = builtin("monopolist")
    sigma = [1 - 1 / 36, 1 / 36]
    vs = di.di_velocity_set(scn, sigma)
    assert vs.contains_zero
    assert check_equilibrium(scn, MixedAction.of(sigma), "generalized").flags["passed"]
    tr = di.integrate_di(scn, sigma, 0.5, dt=1e-3)
    assert np.max(np.abs(tr.sigma - tr.sigma[0])) < 1e-9
    off = di.di_velocity_set(scn, [0.5, 0.5])
    assert not off.contains_zero
    assert np.all(off.velocities[:, 1] < 0)


def test_monopolist_probe_consistent(builtin):
    v = di.probe_global_attraction(builtin("monopolist"), [[1 - 1 / 36, 1 / 36]], eps=0.01, T=40, dt=1e-3)
    assert v.verdict == "consistent with globally attracting"
    assert v.max_entry_time <= 35.1 and v.stayed_inside


def test_two_basins_counterexample():
    v = di.probe_global_attraction(two_basins(), [[1.0, 0.0]], eps=0.01, T=10, dt=1e-2)
    assert v.verdict == "not globally attracting"
    assert v.counterexample["final"][1] > 0.5
    # the KL tie at one half is a mixed rest point
    assert di.di_velocity_set(two_basins(), [0.5, 0.5]).contains_zero
    rest = [[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]]
    both = di.probe_global_attraction(two_basins(), rest, eps=0.01, T=10, dt=1e-2)
    assert both.verdict == "consistent with globally attracting"


def test_whole_simplex_is_trivially_attracting():
    assert di.probe_global_attraction(two_basins(), None).verdict == "consistent with globally attracting"


def test_three_actions_every_frequency_rests():
    # the models are tied everywhere so each action is a best reply to some admissible belief
    fam = [[[0.9, 0.1]] * 3, [[0.1, 0.9]] * 3]
    scn = build_scenario(finite_spec(fam, [[0.5, 0.5]] * 3, [[1.125, -0.125], [-0.125, 1.125], [0.6, 0.6]]))
    for sigma in ([0.2, 0.3, 0.5], [0.9, 0.05, 0.05]):
        assert di.di_velocity_set(scn, sigma).contains_zero
        assert check_equilibrium(scn, MixedAction.of(sigma), "generalized").flags["passed"]
    tr = di.integrate_di(scn, [0.2, 0.3, 0.5], 1.0, dt=1e-2)
    assert np.allclose(tr.sigma, [0.2, 0.3, 0.5])
    moved = di.integrate_di(scn, [0.2, 0.3, 0.5], 1.0, dt=1e-2, selection="index_order")
    assert np.allclose(moved.sigma.sum(axis=1), 1.0) and moved.sigma.min() >= 0


def test_trajectory_csv():
    tr = di.integrate_di(dominant(), [1.0, 0.0], 0.01, dt=1e-3)
    lines = tr.to_csv().splitlines()
    assert lines[0] == "t,sigma_0,sigma_1,selection"
    assert len(lines) == 12


def test_constant_path_is_shadowed():
    scn = dominant()
    T = 5000
    p = PathRecord(scn.id, 0, T, {}, np.ones(T, dtype=np.int32), np.zeros(T, dtype=np.int16),
                   np.array([T]), np.zeros((1, 1)), np.array([[0.0, 1.0]]), np.zeros(1), 2)
    rep = di.shadowing_distance(scn, p, window=1.0, dt=0.01)
    assert max(rep.distances) < 1e-2


def test_monopolist_shadowing_improves_late(builtin):
    scn = builtin("monopolist")
    p = simulate_path(scn, None, 20000, 2, "logit:0.05")
    rep = di.shadowing_distance(scn, p, window=1.0, dt=0.01, anchors=[50, 2000])
    assert rep.distances[-1] < 0.05
    assert rep.distances[-1] < rep.distances[0]


def test_window_too_long(builtin):
    scn = builtin("monopolist")
    p = simulate_path(scn, None, 100, 0)
    with pytest.raises(di.WindowTooLong):
        di.shadowing_distance(scn, p, window=10.0)
