"""Parameterized builtin scenarios with closed-form reference values."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Mapping

import numpy as np
from scipy.optimize import brentq

from .model import (
    ActionSet,
    BerkNashError,
    GameScenario,
    ParameterGrid,
    PlayerModel,
    Scenario,
    ValidationError,
    belief_from_weights,
    build_scenario,
)


class UnknownBuiltin(BerkNashError):
    pass


class ParamOutOfRange(ValidationError):
    pass


@dataclass(frozen=True)
class BuiltinDescriptor:
    name: str
    summary: str
    defaults: Mapping[str, Any]
    knobs: tuple[str, ...]
    builder: Callable[[dict], Any] = field(repr=False)

    def describe(self) -> dict:
        return {"name": self.name, "summary": self.summary, "defaults": dict(self.defaults), "resolution_knobs": list(self.knobs)}


def _ref(value: Any, provenance: str) -> dict:
    return {"value": value, "provenance": provenance}


def _bernoulli_spec(name: str, p_true: float, thetas: list[float], prior, bets: bool) -> dict:
    for v in [p_true, *thetas]:
        if not 0.0 < v < 1.0:
            raise ParamOutOfRange("Bernoulli probabilities must lie strictly between 0 and 1")
    n = len(thetas)
    actions = [0.0, 1.0] if bets else [0.0]
    fam = [[[1 - t, t] for _ in actions] for t in thetas]
    true = [[1 - p_true, p_true] for _ in actions]
    payoff = [[1.0, 0.0], [0.0, 1.0]] if bets else [[0.0, 0.0]]
    prior = [1.0 / n] * n if prior is None else list(prior)
    return {
        "id": name,
        "grid": {"points": [[t] for t in thetas], "labels": [f"{t:g}" for t in thetas]},
        "actions": {"values": actions, "provenance": {"kind": "native-finite"}},
        "outcomes": {"kind": "finite", "values": [0.0, 1.0]},
        "kernel": {"kind": "categorical", "prob": fam},
        "true_kernel": {"kind": "categorical", "prob": true},
        "payoff": {"kind": "table", "values": payoff},
        "prior": {"weights": prior},
    }


def _bern_kl(p: float, q: float) -> float:
    return p * math.log(p / q) + (1 - p) * math.log((1 - p) / (1 - q))


def _coin(p: dict) -> Scenario:
    spec = _bernoulli_spec("coin", p["p_true"], list(p["thetas"]), p["prior"], p["bets"])
    spec["metadata"] = {
        "params": p,
        "references": {
            "log_odds_step": _ref(math.log(3.0), "DERIVED: log(0.75/0.25)"),
            "tied_kl": _ref(True, "SOURCE: both parameters tied in KL"),
        },
    }
    return build_scenario(spec)


def _misspecified_bernoulli(p: dict) -> Scenario:
    thetas = list(p["thetas"])
    spec = _bernoulli_spec("misspecified-bernoulli", p["p_true"], thetas, p["prior"], False)
    kls = [_bern_kl(p["p_true"], t) for t in thetas]
    k_min = min(kls)
    minimizers = [i for i, k in enumerate(kls) if k <= k_min + 1e-12]
    C = [i for i in range(len(thetas)) if i not in minimizers]
    rho_C = min(kls[i] for i in C) - k_min if C else None
    spec["metadata"] = {
        "params": p,
        "references": {
            "min_set": _ref(minimizers, "SOURCE: unique minimizer 0.6 at the defaults"),
            "rate_set": _ref(C, "DERIVED: complement of the minimizer set"),
            "rho_C": _ref(rho_C, "DERIVED: closed-form Bernoulli KL values"),
        },
    }
    return build_scenario(spec)


def _overconfidence_root(alpha: float, alpha_star: float, theta_star: float, a_max: float) -> float:
    def g(a: float) -> float:
        return a - (theta_star + theta_star * (alpha_star - alpha) / (alpha + a))

    if g(0.0) >= 0:
        return 0.0
    if g(a_max) <= 0:
        return a_max
    return brentq(g, 0.0, a_max, xtol=1e-15)


def _overconfidence(p: dict) -> Scenario:
    alpha, alpha_star, theta_star, theta_bar = p["alpha"], p["alpha_star"], p["theta_star"], p["theta_bar"]
    if p["mode"] not in ("overconfidence", "any"):
        raise ParamOutOfRange("mode must be 'overconfidence' or 'any'")
    if p["mode"] == "overconfidence" and not alpha > alpha_star:
        raise ParamOutOfRange("overconfidence requires alpha > alpha_star")
    if theta_bar < theta_star:
        raise ParamOutOfRange("theta_bar must be at least theta_star")
    if alpha <= 0 or alpha_star < 0 or theta_star <= 0:
        raise ParamOutOfRange("alpha, theta_star must be positive and alpha_star nonnegative")
    r = int(p["resolution"])
    n_a = (int(p["n_actions"]) - 1) * r + 1
    n_t = (int(p["n_theta"]) - 1) * r + 1
    actions = np.linspace(0.0, p["a_max"], n_a)
    thetas = np.linspace(0.0, theta_bar, n_t)
    means = (alpha + actions)[None, :] * thetas[:, None]
    true = (alpha_star + actions) * theta_star
    root = _overconfidence_root(alpha, alpha_star, theta_star, p["a_max"])
    spec = {
        "id": "overconfidence",
        "grid": {"points": thetas[:, None].tolist(), "labels": [f"{t:.6g}" for t in thetas]},
        "actions": {
            "values": actions.tolist(),
            "provenance": {"kind": "discretized-interval", "lo": 0.0, "hi": float(p["a_max"]), "n": n_a},
        },
        "outcomes": {"kind": "gaussian"},
        "kernel": {"kind": "gaussian", "means": means.tolist()},
        "true_kernel": {"kind": "gaussian", "means": true.tolist()},
        "payoff": {"kind": "affine", "c0": (-0.5 * actions**2).tolist(), "c1": [1.0] * n_a},
        "prior": {"weights": [1.0] * n_t},
        "metadata": {
            "params": p,
            "references": {
                "theta_m": _ref("theta_star + theta_star*(alpha_star-alpha)/(alpha+a)", "SOURCE"),
                "equilibrium_action": _ref(root, "DERIVED: bisection on c'(a) = theta_m(a)"),
                "truth_benchmark": _ref(theta_star, "SOURCE: (c')^{-1}(theta_star)"),
            },
        },
    }
    return build_scenario(spec)


def overconfidence_theta_m(a, alpha, alpha_star, theta_star):
    return theta_star + theta_star * (alpha_star - alpha) / (alpha + np.asarray(a))


# joint table of (seller cost, buyer value) in units of 1/20; rows are costs
_AS_TABLE = ((3, 1, 1), (1, 3, 1), (1, 2, 7))
_AS_DENOM = 20


def _adverse_selection(p: dict) -> Scenario:
    costs = [float(c) for c in p["costs"]]
    values = [float(v) for v in p["values"]]
    table = [[Fraction(x, _AS_DENOM) for x in row] for row in p["joint"]]
    if len(costs) != len(table) or any(len(r) != len(values) for r in table):
        raise ParamOutOfRange("joint table must be costs x values")
    if sum(sum(r) for r in table) != 1 or any(x <= 0 for r in table for x in r):
        raise ParamOutOfRange("joint table must be positive and sum to one")
    if sorted(costs) != costs or len(set(costs)) != len(costs) or 0.0 in values:
        raise ParamOutOfRange("costs must be increasing and values nonzero")
    prices = np.round(np.arange(0.0, p["price_max"] + 1e-9, p["price_step"] / int(p["resolution"])), 12)
    # lattice of interior value pmfs with the table's denominator
    D = int(p["lattice"])
    pts = [
        (Fraction(i, D), Fraction(j, D), Fraction(D - i - j, D))
        for i in range(1, D)
        for j in range(1, D - i)
    ]
    if len(values) != 3:
        raise ParamOutOfRange("the builtin uses three buyer values")
    n_t = len(pts)
    grid = [[float(x) for x in pt] for pt in pts]

    def cum(a: float):
        rows = [r for c, r in zip(costs, table) if c <= a]
        joint = [sum((r[j] for r in rows), Fraction(0)) for j in range(len(values))]
        return sum(joint, Fraction(0)), joint

    fam, true, pay, cond = [], [], [], {}
    for a in prices:
        F, joint = cum(a)
        true.append([float(1 - F)] + [float(x) for x in joint])
        pay.append([0.0] + [v - a for v in values])
        if F > 0:
            cond[float(a)] = [float(x / F) for x in joint]
    for pt in pts:
        row = []
        for a in prices:
            F, _ = cum(a)
            row.append([float(1 - F)] + [float(F * x) for x in pt])
        fam.append(row)
    oracle = adverse_selection_scan(costs, values, p["joint"], prices)
    spec = {
        "id": "adverse-selection",
        "grid": {"points": grid, "labels": ["(" + ", ".join(str(x) for x in pt) + ")" for pt in pts]},
        "actions": {"values": prices.tolist(), "provenance": {"kind": "native-finite"}},
        "outcomes": {"kind": "finite", "values": [0.0] + values},
        "kernel": {"kind": "categorical", "prob": fam},
        "true_kernel": {"kind": "categorical", "prob": true},
        "payoff": {"kind": "table", "values": pay},
        "prior": {"weights": [1.0] * n_t},
        "metadata": {
            "params": p,
            "references": {
                "conditional_pmf": _ref({str(k): v for k, v in cond.items()}, "SOURCE: P(V | S <= a)"),
                "equilibrium_prices": _ref(oracle, "DERIVED: exhaustive scan"),
            },
        },
    }
    return build_scenario(spec)


def adverse_selection_scan(costs, values, joint, prices) -> list[float]:
    """Prices a with a in argmax_b F(b) (E[V | S <= a] - b), by direct enumeration."""
    tab = [[Fraction(x, _AS_DENOM) for x in r] for r in joint]
    out = []
    for a in prices:
        rows = [r for c, r in zip(costs, tab) if c <= a]
        F = sum((sum(r) for r in rows), Fraction(0))
        if F == 0:
            continue
        ev = sum(v * float(sum(r[j] for r in rows) / F) for j, v in enumerate(values))
        scores = []
        for b in prices:
            Fb = float(sum((sum(r) for c, r in zip(costs, tab) if c <= b), Fraction(0)))
            scores.append(Fb * (ev - b))
        best = max(scores)
        if scores[list(prices).index(a)] >= best - 1e-9:
            out.append(float(a))
    return out


def _monopolist(p: dict) -> Scenario:
    r = int(p["resolution"])
    a_lo, a_hi, b_lo, b_hi = p["alpha_lo"], p["alpha_hi"], p["beta_lo"], p["beta_hi"]
    if not (a_lo < a_hi and b_lo < b_hi):
        raise ParamOutOfRange("parameter box must have positive width")
    n_alpha = int(round((a_hi - a_lo) / p["alpha_step"])) * r + 1
    n_beta = int(round((b_hi - b_lo) * p["beta_div"])) * r + 1
    alphas = np.linspace(a_lo, a_hi, n_alpha)
    betas = b_lo + np.arange(n_beta) / (p["beta_div"] * r)
    betas[-1] = b_hi
    prices = np.array(p["prices"], dtype=float)
    A, B = np.meshgrid(alphas, betas, indexing="ij")
    pts = np.column_stack([A.ravel(), B.ravel()])
    means = pts[:, :1] - pts[:, 1:] * prices[None, :]
    spec = {
        "id": "monopolist",
        "grid": {"points": pts.tolist(), "labels": [f"({x:.6g}, {y:.6g})" for x, y in pts]},
        "actions": {"values": prices.tolist(), "provenance": {"kind": "native-finite"}},
        "outcomes": {"kind": "gaussian"},
        "kernel": {"kind": "gaussian", "means": means.tolist()},
        "true_kernel": {"kind": "gaussian", "means": list(map(float, p["true_means"]))},
        "payoff": {"kind": "affine", "c0": [0.0] * len(prices), "c1": prices.tolist()},
        "prior": {"weights": [1.0] * len(pts)},
        "metadata": {
            "params": p,
            "references": {
                "sigma_star": _ref(1 / 36, "SOURCE"),
                "theta_m_sigma_star": _ref([40.0, 10 / 3], "SOURCE"),
                "boundary_beta": _ref("(3+92*s)/(1+24*s)", "SOURCE"),
                "pure_minimizer": _ref([40.0, 3.0], "SOURCE"),
            },
        },
    }
    return build_scenario(spec)


def monopolist_boundary_beta(s: float) -> float:
    return (3 + 92 * s) / (1 + 24 * s)


def _slow_learning(p: dict) -> Scenario:
    t1, t2, beta, beta_star = p["theta1"], p["theta2"], p["beta"], p["beta_star"]
    if not (0 < t1 < t2) or not (beta < beta_star):
        raise ParamOutOfRange("need 0 < theta1 < theta2 and beta < beta_star")
    a_bar = (beta_star - beta) / (t2 - t1)
    kappa = 0.5 * a_bar if p["kappa"] is None else float(p["kappa"])
    if not 0 < kappa / 4 <= a_bar:
        raise ParamOutOfRange("kappa must keep the maximal action within (0, a_bar]")
    truth = {"theta1": t1, "theta2": t2}[p["truth"]]
    r = int(p["resolution"])
    n = (int(p["n_actions"]) - 1) * r + 1
    actions = np.linspace(0.0, a_bar, n)
    thetas = [t1, t2]
    fam = [[[1 - (a * t + beta), a * t + beta] for a in actions] for t in thetas]
    true = [[1 - (a * truth + beta_star), a * truth + beta_star] for a in actions]
    for row in [*true, *(x for f in fam for x in f)]:
        if not 0 < row[1] < 1:
            raise ParamOutOfRange("signal probabilities must stay strictly inside (0, 1)")
    spec = {
        "id": "slow-learning",
        "grid": {"points": [[t1], [t2]], "labels": ["theta1", "theta2"]},
        "actions": {"values": actions.tolist(), "provenance": {"kind": "discretized-interval", "lo": 0.0, "hi": a_bar, "n": n}},
        "outcomes": {"kind": "finite", "values": [0.0, 1.0]},
        "kernel": {"kind": "categorical", "prob": fam},
        "true_kernel": {"kind": "categorical", "prob": true},
        "payoff": {"kind": "table", "values": [[0.0, 0.0]] * n},
        "prior": {"weights": [0.5, 0.5]},
        "policy_override": {"kind": "product", "kappa": kappa, "indices": [0, 1]},
        "metadata": {
            "params": p,
            "references": {
                "a_bar": _ref(a_bar, "SOURCE: (beta_star - beta)/(theta2 - theta1)"),
                "classification": _ref({"0": "unstable", "1": "locally_stable"}, "SOURCE: truth theta1"),
            },
        },
    }
    return build_scenario(spec)


def _effort_game(p: dict) -> GameScenario:
    alpha, alpha_star, theta_star, theta_bar = p["alpha"], p["alpha_star"], p["theta_star"], p["theta_bar"]
    if not alpha > alpha_star:
        raise ParamOutOfRange("the effort game uses alpha > alpha_star")
    if theta_bar < theta_star:
        raise ParamOutOfRange("theta_bar must be at least theta_star")
    if not theta_star < 1.0:
        # c'(a)/a = 1 for c(a) = a^2/2; best responses must eventually fall below the diagonal
        raise ParamOutOfRange("the effort game needs theta_star < 1 for bounded best responses")
    r = int(p["resolution"])
    n_a = (int(p["n_actions"]) - 1) * r + 1
    n_t = (int(p["n_theta"]) - 1) * r + 1
    thetas = np.linspace(0.0, theta_bar, n_t)
    grid = ParameterGrid.from_points(thetas[:, None])
    acts = ActionSet.interval(0.0, p["a_max"], n_a)

    def s_of(joint):
        return joint[:, 0] + joint[:, 1] + joint[:, 0] * joint[:, 1]

    def mean(th, joint):
        return np.asarray(th)[:, :1] * (alpha + s_of(joint))[None, :]

    def true_mean(joint):
        return theta_star * (alpha_star + s_of(joint))

    players = []
    for i in range(2):
        players.append(
            PlayerModel(
                name=f"player{i + 1}",
                grid=grid,
                actions=acts,
                mean=mean,
                true_mean=true_mean,
                c0=(lambda joint, i=i: -0.5 * joint[:, i] ** 2),
                c1=(lambda joint: np.ones(joint.shape[0])),
                prior=belief_from_weights(np.ones(n_t)),
            )
        )
    root = effort_game_oracle(alpha, alpha_star, theta_star)
    meta = {
        "params": p,
        "references": {
            "theta_m": _ref("theta_star*(alpha_star+s)/(alpha+s)", "SOURCE"),
            "symmetric_effort": _ref(root, "DERIVED: scalar fixed point"),
        },
    }
    return GameScenario("effort-game", tuple(players), meta)


def effort_game_oracle(alpha: float = 2.0, alpha_star: float = 1.0, theta_star: float = 0.5) -> float:
    """Symmetric solution of a = theta_m(a) (1 + a) with s = 2a + a^2, by bracketing."""

    def g(a: float) -> float:
        s = 2 * a + a * a
        return a - theta_star * (alpha_star + s) / (alpha + s) * (1 + a)

    hi = 1.0
    while g(hi) < 0:
        hi *= 2.0
        if hi > 1e6:
            raise ValueError("no symmetric solution")
    return brentq(g, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps)


BUILTINS: dict[str, BuiltinDescriptor] = {}


def _register(name, summary, defaults, knobs, builder):
    BUILTINS[name] = BuiltinDescriptor(name, summary, defaults, knobs, builder)


_register(
    "coin",
    "Two-point Bernoulli model tied in KL; beliefs oscillate forever.",
    {"p_true": 0.5, "thetas": [0.25, 0.75], "prior": None, "bets": False},
    (),
    _coin,
)
_register(
    "misspecified-bernoulli",
    "Bernoulli truth 0.5 with a misspecified four-point grid; posterior concentrates on 0.6.",
    {"p_true": 0.5, "thetas": [0.25, 0.3, 0.6, 0.9], "prior": None},
    (),
    _misspecified_bernoulli,
)
_register(
    "overconfidence",
    "Gaussian output with overestimated ability; effort below the truth-based benchmark.",
    {
        "alpha": 2.0,
        "alpha_star": 1.0,
        "theta_star": 1.0,
        "theta_bar": 2.0,
        "a_max": 3.0,
        "n_actions": 301,
        "n_theta": 2001,
        "mode": "overconfidence",
        "resolution": 1,
    },
    ("n_actions", "n_theta", "resolution"),
    _overconfidence,
)
_register(
    "adverse-selection",
    "Buyer posting prices who wrongly treats seller cost and value as independent.",
    {
        "costs": [1.0, 2.0, 3.0],
        "values": [1.5, 3.0, 5.0],
        "joint": [list(r) for r in _AS_TABLE],
        "price_max": 4.0,
        "price_step": 0.25,
        "lattice": 20,
        "resolution": 1,
    },
    ("price_step", "resolution"),
    _adverse_selection,
)
_register(
    "monopolist",
    "Monopolist learning a linear demand curve from two prices; unique mixed equilibrium.",
    {
        "alpha_lo": 33.0,
        "alpha_hi": 40.0,
        "beta_lo": 3.0,
        "beta_hi": 3.5,
        "alpha_step": 0.25,
        "beta_div": 120,
        "prices": [2.0, 10.0],
        "true_means": [34.0, 2.0],
        "resolution": 1,
    },
    ("alpha_step", "beta_div", "resolution"),
    _monopolist,
)
_register(
    "effort-game",
    "Two overconfident players whose output depends on both efforts.",
    {
        "alpha": 2.0,
        "alpha_star": 1.0,
        "theta_star": 0.5,
        "theta_bar": 2.0,
        "a_max": 3.0,
        "n_actions": 400,
        "n_theta": 2001,
        "resolution": 1,
    },
    ("n_actions", "n_theta", "resolution"),
    _effort_game,
)
_register(
    "slow-learning",
    "Effort that vanishes at point beliefs; one point belief is stable, the other is not.",
    {
        "theta1": 0.2,
        "theta2": 0.6,
        "beta": 0.1,
        "beta_star": 0.3,
        "truth": "theta1",
        "kappa": None,
        "n_actions": 11,
        "resolution": 1,
    },
    ("n_actions", "resolution"),
    _slow_learning,
)


def list_builtins() -> list[str]:
    return list(BUILTINS)


def describe_builtin(name: str) -> dict:
    if name not in BUILTINS:
        raise UnknownBuiltin(name)
    out = BUILTINS[name].describe()
    out["references"] = make_builtin(name).metadata.get("references", {})
    return out


def make_builtin(name: str, params: Mapping[str, Any] | None = None):
    """Build a named scenario; unknown parameter names are rejected."""
    if name not in BUILTINS:
        raise UnknownBuiltin(f"unknown builtin {name!r}; choose from {', '.join(BUILTINS)}")
    desc = BUILTINS[name]
    merged = dict(desc.defaults)
    for k, v in (params or {}).items():
        if k not in merged:
            raise ParamOutOfRange(f"{name} has no parameter {k!r}")
        merged[k] = v
    return desc.builder(merged)
