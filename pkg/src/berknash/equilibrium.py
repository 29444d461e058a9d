"""Finding and verifying Berk-Nash equilibria and their refinements.

Feasibility of a belief supported on a KL-minimizing set is a small linear
program: maximize t subject to sum_theta mu(theta) [U(a, theta) - U(a', theta)] >= t
for the required rows, mu in the simplex. The equilibrium condition holds when
the optimum is >= -tol. Scenarios with an injected action rule have no linear
structure and are searched on a simplex mesh instead.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from scipy.optimize import brentq, linprog, lsq_linear, minimize_scalar

from .decision import DEFAULT_OPT_TOL, argmax_within, game_utilities, logit_probs
from .inference import DEFAULT_SET_TOL, min_set_indices
from .model import (
    BerkNashError,
    Belief,
    GameScenario,
    MixedAction,
    Scenario,
    ValidationError,
    belief_from_weights,
)

log = logging.getLogger(__name__)

DEFAULT_DAMPING = 0.2
WEAK_ID_TOL = 1e-10
OVERRIDE_MESH = 32


class NonConvergence(BerkNashError):
    pass


class NoSignChange(BerkNashError):
    pass


@dataclass(eq=False)
class EquilibriumResult:
    sigma: MixedAction
    beliefs: dict  # None -> Belief for a single belief, or action index -> Belief
    optimality_gap: float
    kl_support_gap: float = 0.0
    flags: dict = field(default_factory=dict)
    weak_identification: bool | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.flags.get("passed", True))

    def belief(self, a: int | None = None) -> Belief:
        if None in self.beliefs:
            return self.beliefs[None]
        return self.beliefs[a]

    def to_json(self) -> dict:
        def sparse(b: Belief) -> dict:
            p = b.probs
            return {str(i): float(p[i]) for i in np.flatnonzero(p > 0)}

        beliefs = {("all" if k is None else str(k)): sparse(v) for k, v in self.beliefs.items()}
        return {
            "sigma": [float(x) for x in self.sigma.probs],
            "beliefs": beliefs,
            "residuals": {"optimality_gap": float(self.optimality_gap), "kl_support_gap": float(self.kl_support_gap)},
            "flags": _plain(self.flags),
            "weak_identification": self.weak_identification,
            "metadata": _plain(self.metadata),
        }


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


# Feasibility -------------------------------------------------------------------


def max_min_margin(G: np.ndarray) -> tuple[float, np.ndarray]:
    """max over the simplex of min_row (G @ mu), with the maximizing mu."""
    n_rows, n = G.shape
    if n_rows == 0:
        return math.inf, np.full(n, 1.0 / n)
    if n == 1:
        return float(G[:, 0].min()), np.ones(1)
    # variables: mu (n), t; minimize -t
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A_ub = np.hstack([-G, np.ones((n_rows, 1))])
    b_ub = np.zeros(n_rows)
    A_eq = np.zeros((1, n + 1))
    A_eq[0, :n] = 1.0
    bounds = [(0, None)] * n + [(None, None)]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=[1.0], bounds=bounds, method="highs")
    if not res.success:  # pragma: no cover - the program is always feasible and bounded
        raise RuntimeError(f"feasibility program failed: {res.message}")
    mu = np.clip(res.x[:n], 0.0, None)
    mu /= mu.sum()
    # report the margin of the cleaned witness rather than the solver's t
    return float((G @ mu).min()), mu


def _gap_rows(U: np.ndarray, actions: Sequence[int], thetas: np.ndarray) -> np.ndarray:
    """Rows U(a, .) - U(a', .) on the given parameters for a in ``actions`` and every a'."""
    sub = U[:, thetas]
    return np.vstack([sub[a][None, :] - sub for a in actions])


def _simplex_mesh(k: int, m: int) -> np.ndarray:
    """All points of the k-simplex with coordinates in multiples of 1/m."""
    pts = [np.array(c, dtype=float) / m for c in _compositions(m, k)]
    return np.array(pts)


def _compositions(total: int, parts: int):
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


def _override_beliefs(k: int, cap: int = 5000) -> np.ndarray:
    m = OVERRIDE_MESH
    while m > 1 and math.comb(m + k - 1, k - 1) > cap:
        m //= 2
    return _simplex_mesh(k, m) if k > 1 else np.ones((1, 1))


def _override_support(scn: Scenario, thetas: np.ndarray, w: np.ndarray) -> tuple[int, ...]:
    full = np.zeros(scn.n_theta)
    full[thetas] = w
    ref = scn.actions.locate(scn.policy_override.value(full))
    return (ref.lo,) if ref.lo == ref.hi else (ref.lo, ref.hi)


def justify(scn: Scenario, actions: Sequence[int], thetas: np.ndarray, tol: float) -> tuple[float, np.ndarray]:
    """Best belief on ``thetas`` under which every action in ``actions`` is optimal.

    Returns (gap, weights) where gap >= 0 is the largest utility shortfall of a
    required action at the witness.
    """
    thetas = np.asarray(thetas)
    if scn.policy_override is not None:
        best, best_w = math.inf, None
        for w in _override_beliefs(len(thetas)):
            sup = set(_override_support(scn, thetas, w))
            miss = sum(1 for a in actions if a not in sup)
            if miss < best:
                best, best_w = miss, w
                if miss == 0:
                    break
        return float(best), best_w
    G = _gap_rows(scn.utility_table, actions, thetas)
    margin, mu = max_min_margin(G)
    return max(0.0, -margin), mu


def _embed(scn_n: int, thetas: np.ndarray, w: np.ndarray) -> Belief:
    full = np.zeros(scn_n)
    full[thetas] = w
    return belief_from_weights(full)


def _uniform_on(n: int, thetas: Sequence[int]) -> Belief:
    full = np.zeros(n)
    full[list(thetas)] = 1.0
    return belief_from_weights(full)


def weak_identification(scn: Scenario, sigma: MixedAction, thetas: Sequence[int], tol: float = WEAK_ID_TOL) -> bool:
    thetas = list(thetas)
    for a in sigma.support:
        rows = scn.subjective_at(a)[thetas]
        if np.max(np.abs(rows - rows[0])) > tol:
            return False
    return True


# Checks ----------------------------------------------------------------------------


def check_equilibrium(
    scn: Scenario,
    sigma: MixedAction,
    kind: str = "standard",
    tol: float = DEFAULT_OPT_TOL,
    set_tol: float = DEFAULT_SET_TOL,
) -> EquilibriumResult:
    """Verify the equilibrium condition at ``sigma`` with one belief or one belief per support action."""
    if kind not in ("standard", "generalized"):
        raise ValidationError(f"unknown equilibrium kind {kind!r}")
    thetas = min_set_indices(scn.kl_table @ sigma.probs, set_tol)
    support = sigma.support
    if kind == "standard":
        gap, w = justify(scn, support, thetas, tol)
        beliefs = {None: _embed(scn.n_theta, thetas, w)}
    else:
        gap, beliefs = 0.0, {}
        for a in support:
            g, w = justify(scn, [a], thetas, tol)
            gap = max(gap, g)
            beliefs[a] = _embed(scn.n_theta, thetas, w)
    passed = gap <= tol
    flags = {
        "passed": passed,
        "pure": len(support) == 1,
        "mixed": len(support) > 1,
        "generalized": kind == "generalized",
    }
    return EquilibriumResult(
        sigma,
        beliefs,
        gap,
        0.0,
        flags,
        weak_identification(scn, sigma, thetas),
        {"kind": kind, "min_set": [int(t) for t in thetas]},
    )


def check_uniformly_strict(scn: Scenario, a: int, tol: float = DEFAULT_OPT_TOL) -> tuple[bool, dict]:
    """True when ``a`` is the strict best reply at every vertex of its KL-minimizer simplex."""
    thetas = min_set_indices(scn.kl_table[:, a], DEFAULT_SET_TOL)
    if scn.policy_override is not None:
        ok = all(_override_support(scn, thetas, w) == (a,) for w in _override_beliefs(len(thetas)))
        return ok, {"thetas": [int(t) for t in thetas], "method": "mesh"}
    U = scn.utility_table
    others = [b for b in range(scn.n_actions) if b != a]
    if not others:
        return True, {"thetas": [int(t) for t in thetas], "worst_margin": math.inf}
    margins = U[a, thetas][None, :] - U[others][:, thetas]
    k = np.unravel_index(np.argmin(margins), margins.shape)
    worst = float(margins[k])
    report = {
        "thetas": [int(t) for t in thetas],
        "worst_margin": worst,
        "worst_deviation": int(others[k[0]]),
        "worst_theta": int(thetas[k[1]]),
    }
    return worst > tol, report


# Pure and binary-mixed solvers ------------------------------------------------------------


def find_pure_bne(scn: Scenario, tol: float = DEFAULT_OPT_TOL, set_tol: float = DEFAULT_SET_TOL) -> list[EquilibriumResult]:
    out = []
    for a in range(scn.n_actions):
        thetas = min_set_indices(scn.kl_table[:, a], set_tol)
        gap, w = justify(scn, [a], thetas, tol)
        if gap <= tol:
            sigma = MixedAction.pure(scn.n_actions, a)
            strict, _ = check_uniformly_strict(scn, a, tol)
            flags = {"passed": True, "pure": True, "mixed": False, "generalized": False, "uniformly_strict": strict}
            out.append(
                EquilibriumResult(
                    sigma,
                    {None: _embed(scn.n_theta, thetas, w)},
                    gap,
                    0.0,
                    flags,
                    weak_identification(scn, sigma, thetas),
                    {"solver": "pure", "min_set": [int(t) for t in thetas]},
                )
            )
    return out


@dataclass(frozen=True)
class ContinuousProjector:
    """KL projection onto the box spanned by a product grid, for means affine in the parameter."""

    h: np.ndarray  # n_a
    g: np.ndarray  # n_a x d
    true_means: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    c0: np.ndarray
    c1: np.ndarray

    def project(self, probs: np.ndarray) -> np.ndarray:
        w = np.sqrt(np.asarray(probs, dtype=float))
        A = w[:, None] * self.g
        b = w * (self.true_means - self.h)
        res = lsq_linear(A, b, bounds=(self.lo, self.hi), method="bvls", tol=1e-15)
        return res.x

    def utilities(self, theta: np.ndarray) -> np.ndarray:
        return self.c0 + self.c1 * (self.h + self.g @ theta)


def continuous_projector(scn: Scenario) -> ContinuousProjector | None:
    if not scn.is_gaussian or scn.grid.product_axes is None:
        return None
    P = scn.grid.points
    X = np.hstack([np.ones((len(P), 1)), P])
    M = scn.family.table
    coef, *_ = np.linalg.lstsq(X, M, rcond=None)
    if np.max(np.abs(X @ coef - M)) > 1e-9 * max(1.0, float(np.max(np.abs(M)))):
        return None
    axes = scn.grid.product_axes
    return ContinuousProjector(
        h=coef[0],
        g=coef[1:].T.copy(),
        true_means=np.asarray(scn.true_kernel.table, dtype=float),
        lo=np.array([ax[0] for ax in axes]),
        hi=np.array([ax[-1] for ax in axes]),
        c0=np.asarray(scn.payoff.c0),
        c1=np.asarray(scn.payoff.c1),
    )


def _indifference(scn: Scenario, s: float, set_tol: float) -> float:
    probs = np.array([1.0 - s, s])
    thetas = min_set_indices(scn.kl_table @ probs, set_tol)
    u = scn.utility_table[:, thetas].mean(axis=1)
    return float(u[1] - u[0])


def _sign(x: float, tol: float) -> int:
    return 0 if abs(x) <= tol else (1 if x > 0 else -1)


def _transitions(f: Callable[[float], int], lo: float, hi: float, s_lo: int, s_hi: int, xtol: float) -> list:
    """Locate where a piecewise-constant sign pattern changes between lo and hi.

    Returns a list of ('point', x) or ('plateau', left, right) records.
    """
    while hi - lo > xtol:
        mid = 0.5 * (lo + hi)
        s = f(mid)
        if s == s_lo:
            lo = mid
        elif s == s_hi:
            hi = mid
        else:
            left = _transitions(f, lo, mid, s_lo, s, xtol)
            right = _transitions(f, mid, hi, s, s_hi, xtol)
            if s == 0:
                a = left[-1][1] if left and left[-1][0] == "point" else mid
                b = right[0][1] if right and right[0][0] == "point" else mid
                return left[:-1] + [("plateau", a, b)] + right[1:]
            return left + right
    return [("point", 0.5 * (lo + hi))]


def find_mixed_bne_binary(
    scn: Scenario,
    tol: float = DEFAULT_OPT_TOL,
    set_tol: float = DEFAULT_SET_TOL,
    scan: int = 256,
    refine: bool = True,
) -> list[EquilibriumResult]:
    """Interior equilibria of a two-action problem by bracketing the indifference condition.

    The utility difference under the uniform belief on the minimizer set is a step
    function of the mixing weight on a finite grid; every bracket is narrowed to a
    switch point or a zero plateau. When the means are affine in a box-shaped
    parameter grid, each candidate is then sharpened by solving the same condition
    with the exact projection onto the box.
    """
    if scn.n_actions != 2:
        raise ValidationError("find_mixed_bne_binary needs exactly two actions")
    xtol = 1e-13

    def sgn(s: float) -> int:
        return _sign(_indifference(scn, s, set_tol), tol)

    grid = np.linspace(0.0, 1.0, scan + 1)[1:-1]
    signs = [sgn(s) for s in grid]
    candidates: list[tuple] = []
    k = 0
    while k < len(grid):
        j = k
        while j + 1 < len(grid) and signs[j + 1] == signs[k]:
            j += 1
        if signs[k] == 0:
            candidates.append(("plateau", float(grid[k]), float(grid[j])))
        if j + 1 < len(grid) and signs[k] != 0 and signs[j + 1] != 0:
            candidates.extend(_transitions(sgn, float(grid[j]), float(grid[j + 1]), signs[k], signs[j + 1], xtol))
        k = j + 1
    # widen plateaus that touch the scan grid to their true ends
    widened = []
    for c in candidates:
        if c[0] == "plateau":
            a, b = c[1], c[2]
            i_a = int(np.searchsorted(grid, a))
            i_b = int(np.searchsorted(grid, b))
            if i_a > 0 and signs[i_a - 1] != 0:
                a = _transitions(sgn, float(grid[i_a - 1]), a, signs[i_a - 1], 0, xtol)[-1][1]
            if i_b + 1 < len(grid) and signs[i_b + 1] != 0:
                b = _transitions(sgn, b, float(grid[i_b + 1]), 0, signs[i_b + 1], xtol)[0][1]
            widened.append(("plateau", a, b))
        else:
            widened.append(c)

    proj = continuous_projector(scn) if refine else None
    results: list[EquilibriumResult] = []
    for c in widened:
        s_grid = 0.5 * (c[1] + c[2]) if c[0] == "plateau" else c[1]
        meta: dict = {"solver": "mixed-binary", "bracket": list(c)}
        s_final = s_grid
        if proj is not None:
            s_ref = _refine_binary(proj, c, scan)
            if s_ref is not None:
                chk = check_equilibrium(scn, MixedAction.of([1 - s_ref, s_ref]), "standard", tol, set_tol)
                meta["continuous_root"] = s_ref
                if chk.flags["passed"]:
                    s_final = s_ref
                    meta["refined"] = True
                    meta["continuous_minimizer"] = proj.project(np.array([1 - s_ref, s_ref])).tolist()
        sigma = MixedAction.of([1.0 - s_final, s_final])
        res = check_equilibrium(scn, sigma, "standard", tol, set_tol)
        thetas = res.metadata["min_set"]
        res.beliefs = {None: _uniform_on(scn.n_theta, thetas)} if len(thetas) == 1 else res.beliefs
        res.metadata.update(meta)
        if res.flags["passed"]:
            results.append(res)
        else:
            log.info("candidate at %.6g failed verification (gap %.3g)", s_final, res.optimality_gap)
    if not results:
        log.info("%s", NoSignChange("no interior indifference point found"))
    return results + find_pure_bne(scn, tol, set_tol)


def _refine_binary(proj: ContinuousProjector, cand: tuple, scan: int) -> float | None:
    def f(s: float) -> float:
        u = proj.utilities(proj.project(np.array([1.0 - s, s])))
        return float(u[1] - u[0])

    lo, hi = cand[1], cand[2] if cand[0] == "plateau" else cand[1]
    width = max(hi - lo, 2.0 / scan)
    a, b = max(0.0, lo - width), min(1.0, hi + width)
    fa, fb = f(a), f(b)
    if fa == 0.0:
        return a
    if fb == 0.0:
        return b
    if fa * fb > 0:
        return None
    return float(brentq(f, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200))


# Intended strategies -------------------------------------------------------------------


def _starts(n: int) -> list[np.ndarray]:
    starts = [np.eye(n)[i] for i in range(n)]
    starts.append(np.full(n, 1.0 / n))
    return starts


def find_intended_bne(
    scn: Scenario,
    tau: float,
    damping: float = DEFAULT_DAMPING,
    tol: float = 1e-8,
    max_iter: int = 20000,
    set_tol: float = DEFAULT_SET_TOL,
    projection: str = "auto",
) -> list[EquilibriumResult]:
    """Fixed points of sigma = logit(mu(sigma)) with mu uniform on the KL-minimizing set.

    ``projection`` selects how beliefs are formed: "grid" uses the grid minimizers,
    "continuous" the exact projection onto the parameter box (available for
    Gaussian means affine in the parameter), "auto" prefers the latter.
    """
    proj = continuous_projector(scn) if projection in ("auto", "continuous") else None
    if projection == "continuous" and proj is None:
        raise ValidationError("continuous projection is not available for this scenario")

    def target(s: np.ndarray) -> np.ndarray:
        if proj is not None:
            u = proj.utilities(proj.project(s))
        else:
            thetas = min_set_indices(scn.kl_table @ s, set_tol)
            u = scn.utility_table[:, thetas].mean(axis=1)
        return logit_probs(u, tau)

    found: list[EquilibriumResult] = []
    failures = []
    for k, s0 in enumerate(_starts(scn.n_actions)):
        s = s0.copy()
        lam = damping
        tgt = target(s)
        r = float(np.max(np.abs(s - tgt)))
        it = 0
        while r >= tol and it < max_iter:
            it += 1
            while True:
                cand = (1 - lam) * s + lam * tgt
                cand /= cand.sum()
                t_c = target(cand)
                r_c = float(np.max(np.abs(cand - t_c)))
                if r_c < r or lam < 1e-14:
                    break
                lam *= 0.5
            s, tgt, r = cand, t_c, r_c
            lam = min(damping, 2 * lam)
        if r >= tol:
            failures.append({"start": k, "residual": r, "iterations": it})
            continue
        if any(np.max(np.abs(e.sigma.probs - s)) < 1e-6 for e in found):
            continue
        sigma = MixedAction(s / s.sum())
        thetas = min_set_indices(scn.kl_table @ s, set_tol)
        meta = {
            "solver": "intended",
            "start": k,
            "iterations": it,
            "damping": damping,
            "residual": r,
            "projection": "continuous" if proj is not None else "grid",
        }
        if proj is not None:
            meta["continuous_minimizer"] = proj.project(s).tolist()
        flags = {"passed": True, "pure": False, "mixed": True, "generalized": False, "intended": tau}
        found.append(
            EquilibriumResult(
                sigma, {None: _uniform_on(scn.n_theta, thetas)}, 0.0, 0.0, flags, weak_identification(scn, sigma, thetas), meta
            )
        )
    for e in found:
        e.metadata["failed_starts"] = failures
    if failures and not found:
        raise NonConvergence(f"no start converged: {failures}")
    return found


# Rationalizability ---------------------------------------------------------------------


def _mixture_mesh(actions: Sequence[int], n: int, m: int, cap: int = 20000) -> list[np.ndarray]:
    k = len(actions)
    out = []
    if math.comb(m + k - 1, k - 1) <= cap:
        pts = _simplex_mesh(k, m)
    else:
        # vertices, edges at the mesh resolution, and the barycenter
        pts = [np.eye(k)[i] for i in range(k)]
        for i, j in itertools.combinations(range(k), 2):
            for s in range(1, m):
                p = np.zeros(k)
                p[i], p[j] = 1 - s / m, s / m
                pts.append(p)
        pts.append(np.full(k, 1.0 / k))
    for p in pts:
        full = np.zeros(n)
        full[list(actions)] = p
        out.append(full)
    return out


def rationalizable_set(
    scn: Scenario, mixture_mesh: int = 16, tol: float = DEFAULT_OPT_TOL, set_tol: float = DEFAULT_SET_TOL
) -> list[tuple[int, ...]]:
    """Iterate A <- Gamma(A) & A from the full action set; returns the whole sequence."""
    current = tuple(range(scn.n_actions))
    seq = [current]
    cache: dict = {}
    while True:
        justified = set()
        for s in _mixture_mesh(current, scn.n_actions, mixture_mesh):
            thetas = tuple(int(t) for t in min_set_indices(scn.kl_table @ s, set_tol))
            for a in current:
                if a in justified:
                    continue
                key = (thetas, a)
                if key not in cache:
                    cache[key] = justify(scn, [a], np.array(thetas), tol)[0] <= tol
                if cache[key]:
                    justified.add(a)
            if len(justified) == len(current):
                break
        nxt = tuple(a for a in current if a in justified)
        if nxt == current:
            return seq
        seq.append(nxt)
        current = nxt
        if not current:
            return seq


# Games ---------------------------------------------------------------------------------------


def _game_kl(game: GameScenario, i: int, profile: Sequence[MixedAction]) -> np.ndarray:
    player = game.players[i]
    vals, weights = [], []
    for j, mix in enumerate(profile):
        sup = np.flatnonzero(mix.probs > 0)
        vals.append(game.players[j].actions.values[sup])
        weights.append(mix.probs[sup])
    grids = np.meshgrid(*vals, indexing="ij")
    joint = np.column_stack([g.ravel() for g in grids])
    w = np.ones(1)
    for wj in weights:
        w = np.multiply.outer(w, wj).ravel()
    aff = _affine_in_theta(player, joint)
    if aff is not None:
        # quadratic in theta: expand around the weighted moments of the joint rows
        h, g = aff
        r = player.true_mean(joint) - h
        c = 0.5 * float(w @ (r * r))
        b = (w * r) @ g
        A = g.T @ (w[:, None] * g)
        P = player.grid.points
        return c - P @ b + 0.5 * np.einsum("nd,de,ne->n", P, A, P)
    diff = player.true_mean(joint)[None, :] - player.mean(player.grid.points, joint)
    return 0.5 * (diff**2) @ w


def game_min_sets(game: GameScenario, profile: Sequence[MixedAction], set_tol: float = DEFAULT_SET_TOL) -> list[np.ndarray]:
    return [min_set_indices(_game_kl(game, i, profile), set_tol) for i in range(game.n_players)]


def check_game_equilibrium(
    game: GameScenario, profile: Sequence[MixedAction], tol: float = DEFAULT_OPT_TOL, set_tol: float = DEFAULT_SET_TOL
) -> list[float]:
    """Per-player optimality gap of the support under the best belief on that player's minimizers."""
    gaps = []
    for i, thetas in enumerate(game_min_sets(game, profile, set_tol)):
        opp = [m for j, m in enumerate(profile) if j != i]
        # utilities for each minimizer separately, then the feasibility program
        cols = [game_utilities(game, i, _uniform_on(len(game.players[i].grid), [t]), opp) for t in thetas]
        U = np.column_stack(cols)
        support = profile[i].support
        G = np.vstack([U[a][None, :] - U for a in support])
        margin, _ = max_min_margin(G)
        gaps.append(max(0.0, -margin))
    return gaps


def find_game_bne(
    game: GameScenario,
    damping: float = DEFAULT_DAMPING,
    tol: float = DEFAULT_OPT_TOL,
    max_iter: int = 3000,
    set_tol: float = DEFAULT_SET_TOL,
    max_starts: int = 16,
    refine: bool = True,
) -> list[EquilibriumResult]:
    """Damped simultaneous best responses on mixed profiles, beliefs uniform on each minimizer set.

    Starts are all pure profiles when there are at most ``max_starts`` of them, otherwise
    the profiles built from each player's extreme actions; the barycenter is always added.
    """
    sizes = [len(p.actions) for p in game.players]
    if math.prod(sizes) <= max_starts:
        pure = list(itertools.product(*[range(n) for n in sizes]))
    else:
        pure = list(itertools.product(*[sorted({0, n - 1}) for n in sizes]))
    starts = [[MixedAction.pure(n, a) for n, a in zip(sizes, prof)] for prof in pure]
    starts.append([MixedAction(np.full(n, 1.0 / n)) for n in sizes])

    found: list[EquilibriumResult] = []
    failures = []
    for k, prof in enumerate(starts):
        sig = [m.probs.copy() for m in prof]
        converged, it, gaps = False, 0, []
        for it in range(1, max_iter + 1):
            mixes = [MixedAction(s) for s in sig]
            sets = game_min_sets(game, mixes, set_tol)
            targets, gaps = [], []
            for i in range(game.n_players):
                mu = _uniform_on(len(game.players[i].grid), sets[i])
                u = game_utilities(game, i, mu, [m for j, m in enumerate(mixes) if j != i])
                br = argmax_within(u, tol)
                t = np.zeros(sizes[i])
                t[list(br)] = 1.0 / len(br)
                targets.append(t)
                gaps.append(float(u.max() - sig[i] @ u))
            if max(gaps) < tol:
                converged = True
                break
            for i in range(game.n_players):
                s = (1 - damping) * sig[i] + damping * targets[i]
                s[s < 1e-15] = 0.0
                sig[i] = s / s.sum()
        if not converged:
            failures.append({"start": k, "gaps": gaps, "iterations": it})
            continue
        # drop the geometric tail left by damping when the best replies themselves pass
        snapped = [MixedAction(t) for t in targets]
        snap_gaps = check_game_equilibrium(game, snapped, tol, set_tol)
        if max(snap_gaps) < tol:
            sig, gaps = [m.probs for m in snapped], snap_gaps
        mixes = [MixedAction(s) for s in sig]
        if any(all(np.max(np.abs(a.probs - b.probs)) < 1e-6 for a, b in zip(e.metadata["profile"], mixes)) for e in found):
            continue
        sets = game_min_sets(game, mixes, set_tol)
        beliefs = {i: _uniform_on(len(game.players[i].grid), sets[i]) for i in range(game.n_players)}
        res = EquilibriumResult(
            mixes[0],
            beliefs,
            max(gaps),
            0.0,
            {"passed": True, "pure": all(len(m.support) == 1 for m in mixes), "game": True},
            None,
            {"solver": "game", "start": k, "iterations": it, "damping": damping, "player_gaps": gaps, "profile": mixes},
        )
        if refine:
            cont = refine_game_profile(game, [float(m.probs @ game.players[i].actions.values) for i, m in enumerate(mixes)])
            if cont is not None:
                res.metadata["continuous_profile"] = cont["profile"]
                res.metadata["continuous_theta"] = cont["theta"]
                res.metadata["continuous_residual"] = cont["residual"]
        found.append(res)
    for e in found:
        e.metadata["failed_starts"] = failures
    if failures and not found:
        raise NonConvergence(f"no start converged: {failures}")
    return found


def game_profile_json(res: EquilibriumResult) -> dict:
    out = res.to_json()
    meta = dict(out["metadata"])
    meta["profile"] = [[float(x) for x in m.probs] for m in res.metadata["profile"]]
    out["metadata"] = meta
    out.pop("sigma")
    return out


def _affine_in_theta(player, joint: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
    d = player.grid.dim
    base = player.mean(np.zeros((1, d)), joint)[0]
    g = np.stack([player.mean(np.eye(d)[j][None, :], joint)[0] - base for j in range(d)], axis=1)
    probe = player.grid.points[[0, -1]]
    scale = max(1.0, float(np.max(np.abs(base))), float(np.max(np.abs(g))))
    if np.max(np.abs(player.mean(probe, joint) - (base + probe @ g.T))) > 1e-9 * scale:
        return None
    return base, g


def refine_game_profile(game: GameScenario, start: Sequence[float], max_iter: int = 500, xtol: float = 1e-13) -> dict | None:
    """Continuous-action polish of a grid equilibrium.

    Applies when every action set discretizes an interval and perceived means are
    affine in the parameter. Each round projects every player onto the box spanned
    by its parameter grid at the current pure profile and best-responds on the
    action interval.
    """
    if not all(p.actions.is_interval for p in game.players):
        return None
    x = np.array(start, dtype=float)
    thetas: list = [None] * game.n_players

    def project(i: int, prof: np.ndarray) -> np.ndarray | None:
        p = game.players[i]
        joint = prof[None, :]
        aff = _affine_in_theta(p, joint)
        if aff is None:
            return None
        h, g = aff
        b = p.true_mean(joint) - h
        lo, hi = p.grid.points.min(axis=0), p.grid.points.max(axis=0)
        return lsq_linear(g, b, bounds=(lo, hi), method="bvls", tol=1e-15).x

    def best_response(i: int, prof: np.ndarray, theta: np.ndarray) -> float:
        p = game.players[i]
        _, lo, hi, _ = p.actions.provenance

        def u(ai: float) -> float:
            joint = prof.copy()
            joint[i] = ai
            joint = joint[None, :]
            return float(p.c0(joint)[0] + p.c1(joint)[0] * p.mean(theta[None, :], joint)[0, 0])

        r = minimize_scalar(lambda v: -u(v), bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
        a = float(r.x)
        # Newton polish on central differences; exact for payoffs quadratic in own action
        h = 1e-5
        for _ in range(3):
            if a - h < lo or a + h > hi:
                break
            d1 = (u(a + h) - u(a - h)) / (2 * h)
            d2 = (u(a + h) - 2 * u(a) + u(a - h)) / (h * h)
            if d2 >= 0:
                break
            step = -d1 / d2
            if abs(step) > 10 * h:
                break
            a = min(hi, max(lo, a + step))
        return a

    residual = math.inf
    for _ in range(max_iter):
        new = x.copy()
        for i in range(game.n_players):
            th = project(i, x)
            if th is None:
                return None
            thetas[i] = th
            new[i] = best_response(i, x, th)
        residual = float(np.max(np.abs(new - x)))
        x = new
        if residual < xtol:
            break
    for i in range(game.n_players):
        thetas[i] = project(i, x)
    return {"profile": x.tolist(), "theta": [t.tolist() for t in thetas], "residual": residual}
