"""Simulated learning paths and the diagnostics run on them.

Every period consumes exactly two uniforms from a single generator, in this
order: the choice draw (tie-break among optimal actions, or the logit sample),
then the outcome draw (inverse CDF). Outcome draws therefore stay aligned across
policies. Beliefs are carried as the prior log-weights plus a running sum of
log-likelihoods, accumulated strictly left to right so any replay of the recorded
outcomes reproduces them bit for bit.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import Any, Iterator, Sequence

import numpy as np
from scipy.special import logsumexp, ndtri
from scipy.stats import linregress, norm

from .decision import DEFAULT_OPT_TOL
from .equilibrium import check_equilibrium
from .inference import DEFAULT_SET_TOL, _kl_rows, min_set_indices, q_moments
from .model import (
    ActionRef,
    Belief,
    BerkNashError,
    MixedAction,
    Scenario,
    ValidationError,
    belief_from_weights,
)

EXOGENEITY_TOL = 1e-12
CHECKPOINTS = 200
ZERO_ODDS_RTOL = 1.5e-8  # about sqrt(machine epsilon)
DEFAULT_Q_GRID = tuple(2.0**k for k in range(-7, 4))
_CHUNK = 1 << 16
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class OutOfRange(BerkNashError):
    pass


class DegenerateMass(BerkNashError):
    pass


# Policies ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Policy:
    kind: str  # "myopic", "logit" or "override"
    tol: float = DEFAULT_OPT_TOL
    tau: float | None = None

    @classmethod
    def parse(cls, text: str) -> "Policy":
        """'myopic', 'myopic:1e-9', 'logit:0.01' or 'override'."""
        name, _, arg = text.partition(":")
        if name == "myopic":
            return cls("myopic", float(arg) if arg else DEFAULT_OPT_TOL)
        if name == "logit":
            if not arg:
                raise ValidationError("logit policy needs a temperature, e.g. logit:0.01")
            tau = float(arg)
            if tau <= 0:
                raise ValidationError("logit temperature must be positive")
            return cls("logit", tau=tau)
        if name == "override":
            return cls("override")
        raise ValidationError(f"unknown policy {text!r}")

    def describe(self) -> dict:
        if self.kind == "logit":
            return {"kind": "logit", "tau": self.tau}
        if self.kind == "myopic":
            return {"kind": "myopic", "tol": self.tol}
        return {"kind": "override"}


def _resolve(scn: Scenario, policy: Policy | str) -> Policy:
    if isinstance(policy, str):
        policy = Policy.parse(policy)
    if scn.policy_override is not None:
        return Policy("override")
    if policy.kind == "override":
        raise ValidationError("override policy needs a scenario with an injected action rule")
    return policy


# Path record --------------------------------------------------------------------------


@dataclass(eq=False)
class PathRecord:
    scenario_id: str
    seed: Any
    horizon: int
    policy: dict
    actions: np.ndarray  # int32, length T
    outcomes: np.ndarray  # outcome indices (finite) or values (gaussian)
    checkpoint_t: np.ndarray
    checkpoint_logw: np.ndarray  # normalized log-probabilities, one row per checkpoint
    checkpoint_sigma: np.ndarray
    prior_logw: np.ndarray
    n_actions: int
    action_values: np.ndarray | None = None  # continuous actions of an injected rule
    metadata: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.horizon

    def belief_at_checkpoint(self, k: int) -> Belief:
        return Belief(self.checkpoint_logw[k])

    @property
    def final_belief(self) -> Belief:
        return Belief(self.checkpoint_logw[-1])

    def save(self, directory: str) -> None:
        save_path(self, directory)


def checkpoint_schedule(T: int) -> np.ndarray:
    step = math.ceil(T / CHECKPOINTS)
    ts = list(range(step, T + 1, step))
    if not ts or ts[-1] != T:
        ts.append(T)
    return np.array(ts, dtype=np.int64)


def _normalize_rows(logw: np.ndarray) -> np.ndarray:
    return logw - logsumexp(logw, axis=-1, keepdims=True)


def _frequencies(actions: np.ndarray, ts: np.ndarray, n: int) -> np.ndarray:
    out = np.empty((len(ts), n))
    for k, t in enumerate(ts):
        out[k] = np.bincount(actions[:t], minlength=n) / t
    return out


def _seed_sequence(seed: Any) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    if isinstance(seed, (list, tuple)):
        return np.random.SeedSequence([int(s) for s in seed])
    return np.random.SeedSequence(int(seed))


def make_generator(seed: Any) -> np.random.Generator:
    """PCG64 generator for an integer seed or a (master_seed, replication) pair."""
    return np.random.Generator(np.random.PCG64(_seed_sequence(seed)))


def is_subjectively_exogenous(scn: Scenario) -> bool:
    """True when no subjective kernel depends on the action."""
    t = scn.family.table
    return bool(np.max(np.abs(t - t[:, :1])) <= EXOGENEITY_TOL)


def _data_exogenous(scn: Scenario) -> bool:
    t = scn.true_kernel.table
    return is_subjectively_exogenous(scn) and bool(np.max(np.abs(t - t[:1])) <= EXOGENEITY_TOL)


def _choose(scn: Scenario, pol: Policy, probs: np.ndarray, u_choice: float) -> tuple[int, ActionRef | None]:
    if pol.kind == "override":
        ref = scn.actions.locate(scn.policy_override.value(probs))
        return ref.nearest, ref
    u = scn.utility_table @ probs
    if pol.kind == "myopic":
        best = np.flatnonzero(u >= u.max() - pol.tol)
        return int(best[min(int(u_choice * len(best)), len(best) - 1)]), None
    z = np.exp((u - u.max()) / pol.tau)
    cdf = np.cumsum(z / z.sum())
    return int(min(np.searchsorted(cdf, u_choice, side="right"), len(cdf) - 1)), None


def _choose_batch(scn: Scenario, pol: Policy, probs: np.ndarray, u_choice: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    """Vectorized version of _choose over rows of beliefs."""
    if pol.kind == "override":
        vals = scn.policy_override.kappa * np.prod(probs[:, list(scn.policy_override.indices)], axis=1)
        refs = [scn.actions.locate(v) for v in vals]
        return np.array([r.nearest for r in refs], dtype=np.int32), vals
    u = probs @ scn.utility_table.T
    if pol.kind == "myopic":
        mask = u >= u.max(axis=1, keepdims=True) - pol.tol
        counts = mask.sum(axis=1)
        pick = np.minimum((u_choice * counts).astype(np.int64), counts - 1)
        order = np.cumsum(mask, axis=1) - 1
        hit = mask & (order == pick[:, None])
        return np.argmax(hit, axis=1).astype(np.int32), None
    z = np.exp((u - u.max(axis=1, keepdims=True)) / pol.tau)
    cdf = np.cumsum(z / z.sum(axis=1, keepdims=True), axis=1)
    idx = (cdf <= u_choice[:, None]).sum(axis=1)
    return np.minimum(idx, scn.n_actions - 1).astype(np.int32), None


def _draw_outcome(scn: Scenario, a: int | ActionRef, u: float):
    if scn.is_gaussian:
        return float(scn.true_at(a)) + float(ndtri(u))
    cdf = np.cumsum(scn.true_at(a))
    return int(min(np.searchsorted(cdf, u, side="right"), len(cdf) - 1))


def _loglik(scn: Scenario, a: int | ActionRef, y) -> np.ndarray:
    if scn.is_gaussian:
        return -0.5 * (y - scn.subjective_at(a)) ** 2 - _HALF_LOG_2PI
    with np.errstate(divide="ignore"):
        return np.log(scn.subjective_at(a)[:, y])


def simulate_path(
    scn: Scenario,
    prior: Belief | None = None,
    T: int = 1000,
    seed: Any = 0,
    policy: Policy | str = "myopic",
    fast: bool | None = None,
) -> PathRecord:
    """Simulate T periods of choice, outcome and Bayes update.

    When neither the true kernel nor any subjective kernel depends on the action,
    the belief path does not depend on choices and is computed in vectorized
    chunks; ``fast=False`` forces the period-by-period loop (same output).
    """
    if T < 1:
        raise ValidationError("horizon must be at least 1")
    pol = _resolve(scn, policy)
    prior = scn.prior if prior is None else prior
    if len(prior) != scn.n_theta:
        raise ValidationError("prior does not match the parameter grid")
    rng = make_generator(seed)
    ts = checkpoint_schedule(T)
    if fast is None:
        fast = _data_exogenous(scn)
    elif fast and not _data_exogenous(scn):
        raise ValidationError("vectorized simulation needs action-independent kernels")
    sim = _simulate_fast if fast else _simulate_loop
    actions, outcomes, values, ck_logw = sim(scn, prior, T, rng, pol, ts)
    return PathRecord(
        scenario_id=scn.id,
        seed=list(seed) if isinstance(seed, (list, tuple)) else int(seed),
        horizon=int(T),
        policy=pol.describe(),
        actions=actions,
        outcomes=outcomes,
        checkpoint_t=ts,
        checkpoint_logw=ck_logw,
        checkpoint_sigma=_frequencies(actions, ts, scn.n_actions),
        prior_logw=np.array(prior.logw, dtype=float),
        n_actions=scn.n_actions,
        action_values=values,
    )


def _simulate_loop(scn, prior, T, rng, pol, ts):
    n = scn.n_theta
    actions = np.empty(T, dtype=np.int32)
    outcomes = np.empty(T, dtype=float if scn.is_gaussian else np.int16)
    values = np.empty(T) if pol.kind == "override" else None
    ck = np.empty((len(ts), n))
    S = np.zeros(n)
    prior_logw = np.asarray(prior.logw, dtype=float)
    k = 0
    t = 0
    while t < T:
        block = rng.random((min(_CHUNK, T - t), 2))
        for u_c, u_y in block:
            logw = prior_logw + S
            probs = np.exp(logw - logw.max())
            probs /= probs.sum()
            a, ref = _choose(scn, pol, probs, u_c)
            act = ref if ref is not None else a
            y = _draw_outcome(scn, act, u_y)
            S = S + _loglik(scn, act, y)
            actions[t] = a
            outcomes[t] = y
            if values is not None:
                values[t] = scn.policy_override.value(probs)
            t += 1
            if t == ts[k]:
                ck[k] = _normalize_rows(prior_logw + S)
                k += 1
    return actions, outcomes, values, ck


def _outcome_loglik_table(scn: Scenario) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(scn.subjective_at(0))  # theta x y, action-independent here


def _simulate_fast(scn, prior, T, rng, pol, ts):
    n = scn.n_theta
    actions = np.empty(T, dtype=np.int32)
    outcomes = np.empty(T, dtype=float if scn.is_gaussian else np.int16)
    values = np.empty(T) if pol.kind == "override" else None
    ck = np.empty((len(ts), n))
    prior_logw = np.asarray(prior.logw, dtype=float)
    if scn.is_gaussian:
        m_true = float(scn.true_at(0))
        means = scn.subjective_at(0)
    else:
        cdf = np.cumsum(scn.true_at(0))
        ll_tab = _outcome_loglik_table(scn)
    S = np.zeros(n)
    t = 0
    k = 0
    while t < T:
        c = min(_CHUNK, T - t)
        u = rng.random((c, 2))
        if scn.is_gaussian:
            y = m_true + ndtri(u[:, 1])
            ll = -0.5 * (y[:, None] - means[None, :]) ** 2 - _HALF_LOG_2PI
        else:
            y = np.minimum(np.searchsorted(cdf, u[:, 1], side="right"), len(cdf) - 1)
            ll = ll_tab[:, y].T
        # beliefs before each period's choice: prior + S_{t-1}
        stacked = np.cumsum(np.vstack([S[None, :], ll]), axis=0)
        before = prior_logw + stacked[:-1]
        probs = np.exp(before - before.max(axis=1, keepdims=True))
        probs /= probs.sum(axis=1, keepdims=True)
        a, vals = _choose_batch(scn, pol, probs, u[:, 0])
        actions[t : t + c] = a
        outcomes[t : t + c] = y
        if values is not None:
            values[t : t + c] = vals
        after = stacked[1:]
        while k < len(ts) and ts[k] <= t + c:
            ck[k] = _normalize_rows(prior_logw + after[ts[k] - t - 1])
            k += 1
        S = stacked[-1]
        t += c
    return actions, outcomes, values, ck


# Replay ----------------------------------------------------------------------------------


def _step_refs(scn: Scenario, path: PathRecord, lo: int, hi: int) -> list:
    if path.action_values is not None:
        return [scn.actions.locate(v) for v in path.action_values[lo:hi]]
    return list(path.actions[lo:hi])


def replay_log_likelihoods(scn: Scenario, path: PathRecord) -> Iterator[tuple[int, np.ndarray]]:
    """Yield (start, cumulative log-likelihood rows) chunks reproducing the path's sums."""
    S = np.zeros(scn.n_theta)
    T = path.horizon
    exo = _data_exogenous(scn) and path.action_values is None
    if exo and not scn.is_gaussian:
        ll_tab = _outcome_loglik_table(scn)
    for lo in range(0, T, _CHUNK):
        hi = min(T, lo + _CHUNK)
        ys = path.outcomes[lo:hi]
        if exo and not scn.is_gaussian:
            ll = ll_tab[:, ys.astype(np.int64)].T
        elif exo:
            ll = -0.5 * (ys[:, None] - scn.subjective_at(0)[None, :]) ** 2 - _HALF_LOG_2PI
        else:
            ll = np.array([_loglik(scn, a, y) for a, y in zip(_step_refs(scn, path, lo, hi), ys.tolist())])
        stacked = np.cumsum(np.vstack([S[None, :], ll]), axis=0)
        yield lo, stacked[1:]
        S = stacked[-1]


def replay_final_logw(scn: Scenario, path: PathRecord) -> np.ndarray:
    last = None
    for _, rows in replay_log_likelihoods(scn, path):
        last = rows[-1]
    return _normalize_rows(path.prior_logw + last)


# Frequencies and convergence ------------------------------------------------------------------


def empirical_frequency(path: PathRecord, t: int) -> MixedAction:
    if not 1 <= t <= path.horizon:
        raise OutOfRange(f"t must lie in [1, {path.horizon}]")
    return MixedAction(np.bincount(path.actions[:t], minlength=path.n_actions) / t)


@dataclass
class ConvergenceReport:
    action_limit: int | None
    frequency_limit: np.ndarray | None
    belief_limit: np.ndarray | None
    equilibrium_check: dict | None
    window: int
    tolerance: float

    def to_json(self) -> dict:
        return {
            "action_limit": self.action_limit,
            "frequency_limit": None if self.frequency_limit is None else self.frequency_limit.tolist(),
            "belief_limit": None if self.belief_limit is None else self.belief_limit.tolist(),
            "equilibrium_check": self.equilibrium_check,
            "window": self.window,
            "tolerance": self.tolerance,
        }


def diagnose_convergence(scn: Scenario, path: PathRecord, window: int, freq_tol: float = 1e-2) -> ConvergenceReport:
    """Detect a limit action or limit frequency over the last ``window`` periods and check it."""
    T = path.horizon
    if not 1 <= window < T:
        raise ValidationError("window must satisfy 1 <= window < T")
    tail = path.actions[T - window :]
    action_limit = int(tail[0]) if np.all(tail == tail[0]) else None
    s_T = empirical_frequency(path, T).probs
    s_w = empirical_frequency(path, T - window).probs
    freq = s_T if np.max(np.abs(s_T - s_w)) < freq_tol else None
    k = int(np.searchsorted(path.checkpoint_t, T - window, side="right")) - 1
    belief = None
    if k >= 0:
        probs = np.exp(path.checkpoint_logw[k:])
        if np.max(np.abs(probs - probs[-1])) < freq_tol:
            belief = probs[-1]
    check = None
    if action_limit is not None or freq is not None:
        sigma = MixedAction.pure(scn.n_actions, action_limit) if action_limit is not None else MixedAction.of(freq)
        res = check_equilibrium(scn, sigma, "standard")
        gen = check_equilibrium(scn, sigma, "generalized")
        check = {
            "sigma": sigma.probs.tolist(),
            "standard_gap": res.optimality_gap,
            "standard_passed": res.flags["passed"],
            "generalized_gap": gen.optimality_gap,
            "generalized_passed": gen.flags["passed"],
            "weak_identification": res.weak_identification,
        }
    return ConvergenceReport(action_limit, freq, belief, check, window, freq_tol)


# Posterior concentration -------------------------------------------------------------------------


@dataclass
class RateReport:
    slope: float
    stderr: float
    intercept: float
    rho_C: float
    n_points: int
    relative_error: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


def concentration_rate(scn: Scenario, path: PathRecord, C: Sequence[int], set_tol: float = DEFAULT_SET_TOL) -> RateReport:
    """Least-squares slope of log mu_t(C) over the second half of the checkpoints."""
    C = sorted(int(c) for c in C)
    if not C:
        raise ValidationError("C must be nonempty")
    sigma = empirical_frequency(path, path.horizon).probs
    values = scn.kl_table @ sigma
    minimizers = set(int(i) for i in min_set_indices(values, set_tol))
    if minimizers & set(C):
        raise ValidationError("C must not contain a KL minimizer of the limiting frequency")
    keep = path.checkpoint_t >= path.horizon / 2
    ts = path.checkpoint_t[keep].astype(float)
    logm = logsumexp(path.checkpoint_logw[keep][:, C], axis=1)
    if not np.all(np.isfinite(logm)):
        raise DegenerateMass("posterior mass on C underflowed to zero")
    if len(ts) < 3:
        raise ValidationError("not enough checkpoints in the second half")
    fit = linregress(ts, logm)
    rho = float(values[C].min() - values.min())
    rel = abs(fit.slope + rho) / rho if rho > 0 else math.inf
    return RateReport(float(fit.slope), float(fit.stderr), float(fit.intercept), rho, int(len(ts)), float(rel))


# Oscillation ------------------------------------------------------------------------------


@dataclass
class OscillationReport:
    crossings: int
    equal_odds_visits: int
    max_abs_log_odds: float
    min_mass: float
    max_mass: float
    final_log_odds: float
    replay_exact: bool

    def to_json(self) -> dict:
        return dict(self.__dict__)


def count_sign_changes(x: np.ndarray, zero_tol: float | np.ndarray = 1e-9, start_sign: int = 0) -> tuple[int, int]:
    """Sign changes of a sequence, treating |x| <= zero_tol as no sign; returns (count, last sign).

    ``zero_tol`` may be an array with one tolerance per entry.
    """
    s = np.where(x > zero_tol, 1, np.where(x < -zero_tol, -1, 0))
    s = s[s != 0]
    if s.size == 0:
        return 0, start_sign
    count = int(np.count_nonzero(s[1:] != s[:-1]))
    if start_sign != 0 and s[0] != start_sign:
        count += 1
    return count, int(s[-1])


def oscillation_stats(scn: Scenario, path: PathRecord, theta: int, theta_prime: int) -> OscillationReport:
    """Equal-odds crossings and extreme posterior masses from a dense replay of the outcomes."""
    if theta == theta_prime:
        raise ValidationError("theta and theta_prime must differ")
    prior = path.prior_logw
    L0 = float(prior[theta] - prior[theta_prime])
    crossings, sign = count_sign_changes(np.array([L0]))
    visits = 0
    max_abs = abs(L0)
    p0 = np.exp(prior - logsumexp(prior))[theta]
    min_mass = max_mass = float(p0)
    last = None
    for _, rows in replay_log_likelihoods(scn, path):
        logw = prior + rows
        L = logw[:, theta] - logw[:, theta_prime]
        # cumulative sums carry rounding proportional to their size; equal odds is judged relative to it
        tol = ZERO_ODDS_RTOL * (np.abs(logw[:, theta]) + np.abs(logw[:, theta_prime]) + 1.0)
        c, sign = count_sign_changes(L, tol, start_sign=sign)
        crossings += c
        visits += int(np.count_nonzero(np.abs(L) <= tol))
        max_abs = max(max_abs, float(np.max(np.abs(L))))
        mass = np.exp(logw[:, theta] - logsumexp(logw, axis=1))
        min_mass = min(min_mass, float(mass.min()))
        max_mass = max(max_mass, float(mass.max()))
        last = rows[-1]
    final = _normalize_rows(prior + last)
    exact = bool(np.array_equal(final, path.checkpoint_logw[-1]))
    return OscillationReport(crossings, visits, max_abs, min_mass, max_mass, float(final[theta] - final[theta_prime]), exact)


# Monte Carlo probes ------------------------------------------------------------------------------


def wilson_interval(k: int, n: int, z: float = float(norm.ppf(0.975))) -> tuple[float, float]:
    if n <= 0:
        raise ValueError("n must be positive")
    p = k / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return max(0.0, centre - half), min(1.0, centre + half)


@dataclass
class ProbeReport:
    action: int
    mode: str
    successes: int
    reps: int
    estimate: float
    interval: tuple[float, float]
    params: dict
    meets_target: bool | None = None

    def to_json(self) -> dict:
        out = dict(self.__dict__)
        out["interval"] = list(self.interval)
        return out


def tv_ball(scn: Scenario, a: int, eps: float) -> np.ndarray:
    """Grid points whose outcome law at ``a`` is within eps in total variation of a KL minimizer's."""
    mins = min_set_indices(scn.kl_table[:, a], DEFAULT_SET_TOL)
    if scn.is_gaussian:
        m = scn.subjective_at(a)
        # TV between unit-variance Gaussians: 2 Phi(|d|/2) - 1
        d = np.abs(m[:, None] - m[None, mins])
        tv = 2 * norm.cdf(d / 2) - 1
    else:
        rows = scn.subjective_at(a)
        tv = 0.5 * np.abs(rows[:, None, :] - rows[None, mins, :]).sum(axis=2)
    return np.flatnonzero(tv.min(axis=1) <= eps)


def _ball_prior(scn: Scenario, inside: np.ndarray, eps: float, rng: np.random.Generator) -> Belief:
    n = scn.n_theta
    outside = np.setdiff1d(np.arange(n), inside)
    w = np.zeros(n)
    out_mass = eps * rng.random() * 0.999 if outside.size else 0.0
    w[inside] = rng.dirichlet(np.ones(inside.size)) * (1 - out_mass)
    if outside.size:
        w[outside] = rng.dirichlet(np.ones(outside.size)) * out_mass
    w = np.maximum(w, 1e-300)
    return belief_from_weights(w)


def probe_attraction(
    scn: Scenario,
    a: int,
    mode: str = "positive_attraction",
    reps: int = 100,
    T: int = 2000,
    seed: int = 0,
    eps: float = 0.05,
    kappa: float | None = None,
    window: int | None = None,
    policy: Policy | str = "myopic",
) -> ProbeReport:
    """Fraction of replications whose play settles on ``a``, with a Wilson interval.

    ``uniform_stability`` draws priors with mass above 1 - eps on the TV ball
    around the minimizers at ``a``; ``positive_attraction`` uses the scenario prior.
    Replication r uses the generator seeded by (seed, r).
    """
    if reps < 1:
        raise ValidationError("reps must be at least 1")
    if mode not in ("uniform_stability", "positive_attraction"):
        raise ValidationError(f"unknown probe mode {mode!r}")
    window = window or max(1, T // 10)
    inside = tv_ball(scn, a, eps) if mode == "uniform_stability" else None
    hits = 0
    for r in range(reps):
        prior = scn.prior
        if inside is not None:
            prior = _ball_prior(scn, inside, eps, make_generator((seed, r, 1)))
        path = simulate_path(scn, prior, T, (seed, r), policy)
        tail = path.actions[T - window :]
        if np.all(tail == a):
            hits += 1
    lo, hi = wilson_interval(hits, reps)
    meets = None if kappa is None else bool(lo >= 1 - kappa)
    params = {"eps": eps, "kappa": kappa, "T": T, "seed": seed, "window": window}
    return ProbeReport(a, mode, hits, reps, hits / reps, (lo, hi), params, meets)


# Local stability of point beliefs -------------------------------------------------------------------


@dataclass
class StabilityReport:
    theta: int
    verdict: str
    witness: dict | None
    equilibrium_belief: bool
    unstable_by_nonequilibrium: bool
    rule_continuous: bool
    n_beliefs: int
    q_grid: list

    def to_json(self) -> dict:
        return dict(self.__dict__)


def neighborhood_beliefs(n: int, theta: int, radius: float, per_shell: int = 25, shells: int = 4) -> np.ndarray:
    """Beliefs at L1 distance radius*k/shells from the point mass, for k = 1..shells.

    Directions are the point masses on the nearest grid indices first, then
    random mixtures from a fixed stream, per_shell directions in total.
    """
    others = np.array([i for i in range(n) if i != theta])
    near = others[np.argsort(np.abs(others - theta), kind="stable")][:per_shell]
    dirs = []
    for j in near:
        d = np.zeros(len(others))
        d[np.searchsorted(others, j)] = 1.0
        dirs.append(d)
    rng = np.random.default_rng(0)
    while len(dirs) < per_shell:
        dirs.append(rng.dirichlet(np.ones(len(others))))
    out = []
    for k in range(1, shells + 1):
        r = radius * k / shells
        for d in dirs:
            p = np.zeros(n)
            p[theta] = 1 - r / 2
            p[others] = d * r / 2
            out.append(p)
    return np.unique(np.array(out), axis=0)


def classify_stability(
    scn: Scenario,
    theta: int,
    q_grid: Sequence[float] = DEFAULT_Q_GRID,
    neighborhood_radius: float = 0.05,
    belief_mesh: int = 25,
    tol: float = DEFAULT_OPT_TOL,
) -> StabilityReport:
    """q-dominance test of the point belief on ``theta`` over a sampled neighbourhood."""
    n = scn.n_theta
    if n < 2:
        raise ValidationError("stability needs at least two parameters")
    beliefs = neighborhood_beliefs(n, theta, neighborhood_radius, belief_mesh)
    acts: list = []
    continuous = True
    ref_pure = _rule(scn, np.eye(n)[theta], tol)
    for p in beliefs:
        act = _rule(scn, p, tol)
        if act is None:
            continuous = False
            act = int(np.argmax(scn.utility_table @ p))
        acts.append(act)
    if ref_pure is None:
        continuous = False
        ref_pure = int(np.argmax(scn.utility_table[:, theta]))
    elif scn.policy_override is None and any(a != ref_pure for a in acts):
        continuous = False
    others = np.array([j for j in range(n) if j != theta])
    verdict, witness = "inconclusive", None
    for q in sorted(q_grid):
        if all(np.all(q_moments(scn, theta, act, q)[others] < 1.0) for act in acts):
            verdict, witness = "locally_stable", {"q": float(q)}
            break
    if verdict == "inconclusive":
        for q in sorted(q_grid):
            beats = np.ones(len(others), dtype=bool)
            for act in acts:
                beats &= q_moments(scn, theta, act, q, reverse=True)[others] < 1.0
            if beats.any():
                verdict, witness = "unstable", {"q": float(q), "theta_prime": int(others[np.argmax(beats)])}
                break
    k_at = _kl_at(scn, ref_pure)
    eq_belief = bool(k_at[theta] <= k_at.min() + DEFAULT_SET_TOL)
    return StabilityReport(
        theta, verdict, witness, eq_belief, not eq_belief, continuous, len(beliefs), [float(q) for q in q_grid]
    )


def _rule(scn: Scenario, probs: np.ndarray, tol: float):
    if scn.policy_override is not None:
        return scn.actions.locate(scn.policy_override.value(probs))
    u = scn.utility_table @ probs
    best = np.flatnonzero(u >= u.max() - tol)
    return int(best[0]) if len(best) == 1 else None


def _kl_at(scn: Scenario, act) -> np.ndarray:
    return _kl_rows(scn, act)


# Persistence ----------------------------------------------------------------------------------------


def _write_npy_gz(path: str, arr: np.ndarray) -> None:
    with open(path, "wb") as fh, gzip.GzipFile(filename="", mode="wb", fileobj=fh, mtime=0) as gz:
        np.save(gz, arr, allow_pickle=False)


def _read_npy_gz(path: str) -> np.ndarray:
    with gzip.open(path, "rb") as gz:
        return np.load(gz, allow_pickle=False)


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def save_path(path: PathRecord, directory: str) -> None:
    """Write a path directory: binary action/outcome columns, checkpoint CSV, manifest last."""
    os.makedirs(directory, exist_ok=True)
    files = {"actions": "actions.npy.gz", "outcomes": "outcomes.npy.gz", "checkpoints": "checkpoints.csv"}
    _write_npy_gz(os.path.join(directory, files["actions"]), path.actions)
    _write_npy_gz(os.path.join(directory, files["outcomes"]), path.outcomes)
    if path.action_values is not None:
        files["action_values"] = "action_values.npy.gz"
        _write_npy_gz(os.path.join(directory, files["action_values"]), path.action_values)
    n_t = path.checkpoint_logw.shape[1]
    header = ["t"] + [f"logw_{i}" for i in range(n_t)] + [f"sigma_{a}" for a in range(path.n_actions)]
    with open(os.path.join(directory, files["checkpoints"]), "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for t, lw, sg in zip(path.checkpoint_t, path.checkpoint_logw, path.checkpoint_sigma):
            fh.write(",".join([str(int(t))] + [_num(x) for x in lw] + [_num(x) for x in sg]) + "\n")
    manifest = {
        "kind": "path",
        "scenario_id": path.scenario_id,
        "seed": path.seed,
        "policy": path.policy,
        "horizon": path.horizon,
        "n_actions": path.n_actions,
        "prior_logw": [float(x) for x in path.prior_logw],
        "files": files,
        "checksums": {k: _sha256(os.path.join(directory, v)) for k, v in files.items()},
        "metadata": path.metadata,
    }
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")


def _num(x: float) -> str:
    return format(float(x), ".17g")


def load_path(directory: str, verify: bool = True) -> PathRecord:
    with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as fh:
        man = json.load(fh)
    files = man["files"]
    if verify:
        for k, name in files.items():
            if _sha256(os.path.join(directory, name)) != man["checksums"][k]:
                raise ValidationError(f"checksum mismatch for {name}")
    actions = _read_npy_gz(os.path.join(directory, files["actions"]))
    outcomes = _read_npy_gz(os.path.join(directory, files["outcomes"]))
    values = _read_npy_gz(os.path.join(directory, files["action_values"])) if "action_values" in files else None
    rows = np.loadtxt(os.path.join(directory, files["checkpoints"]), delimiter=",", skiprows=1, ndmin=2)
    n_t = len(man["prior_logw"])
    return PathRecord(
        scenario_id=man["scenario_id"],
        seed=man["seed"],
        horizon=int(man["horizon"]),
        policy=man["policy"],
        actions=actions,
        outcomes=outcomes,
        checkpoint_t=rows[:, 0].astype(np.int64),
        checkpoint_logw=rows[:, 1 : 1 + n_t],
        checkpoint_sigma=rows[:, 1 + n_t :],
        prior_logw=np.array(man["prior_logw"], dtype=float),
        n_actions=int(man["n_actions"]),
        action_values=values,
        metadata=man.get("metadata", {}),
    )
