"""Continuous-time view of empirical action frequencies.

The velocity at a mixed action sigma is r - sigma with r in the convex hull of
the best replies to beliefs supported on the KL minimizers at sigma. Set-valued
right-hand sides are resolved by named selection rules and integrated with
explicit Euler steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import nnls

from .decision import DEFAULT_OPT_TOL
from .dynamics import PathRecord
from .equilibrium import _simplex_mesh
from .inference import DEFAULT_SET_TOL, min_set_indices
from .model import BerkNashError, MixedAction, Scenario, ValidationError

SELECTIONS = ("max_utility", "min_speed", "index_order")
MESH_CAP = 2000
ZERO_SPEED = 1e-9


class WindowTooLong(BerkNashError):
    pass


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of a vector onto the probability simplex."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, len(v) + 1)
    rho = np.flatnonzero(u - css / k > 0)[-1]
    return np.maximum(v - css[rho] / (rho + 1), 0.0)


def _project_hull(sigma: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Closest point to sigma in the convex hull of the rows of V."""
    if len(V) == 1:
        return V[0].copy()
    pure = np.all((V == 0) | (V == 1), axis=1) & (V.sum(axis=1) == 1)
    if np.all(pure):
        idx = np.argmax(V, axis=1)
        out = np.zeros_like(sigma)
        out[idx] = project_simplex(sigma[idx])
        return out
    w = 1e4
    A = np.vstack([V.T, w * np.ones(len(V))])
    b = np.concatenate([sigma, [w]])
    lam, _ = nnls(A, b)
    lam /= lam.sum()
    return lam @ V


def _cross(x0: float, x1: float, g0: float, g1: float, level: float) -> float:
    """Point where a linear segment from (x0, g0) to (x1, g1) reaches ``level``."""
    if g1 == g0:
        return x0
    return x0 + (level - g0) * (x1 - x0) / (g1 - g0)


def _mesh(k: int, m: int) -> np.ndarray:
    """Simplex mesh over k minimizers, coarsened under the cap; vertices plus barycentre as a floor."""
    if k == 1:
        return np.ones((1, 1))
    while m > 1 and math.comb(m + k - 1, k - 1) > MESH_CAP:
        m //= 2
    if m > 1:
        return _simplex_mesh(k, m)
    return np.vstack([np.eye(k), np.full((1, k), 1.0 / k)])


@dataclass
class VelocitySet:
    sigma: np.ndarray
    minimizers: tuple[int, ...]
    vertices: np.ndarray  # best-reply mixed actions r; velocities are conv(vertices) - sigma
    faces: list
    min_speed: np.ndarray
    max_utility: np.ndarray
    index_order: np.ndarray

    @property
    def velocities(self) -> np.ndarray:
        return self.vertices - self.sigma

    @property
    def contains_zero(self) -> bool:
        return bool(np.max(np.abs(self.min_speed)) <= ZERO_SPEED)

    def select(self, rule: str) -> np.ndarray:
        if rule not in SELECTIONS:
            raise ValidationError(f"unknown selection rule {rule!r}")
        return getattr(self, rule)


class _Field:
    """Velocity evaluator with a vectorized path for two-action scenarios."""

    def __init__(self, scn: Scenario, belief_mesh: int = 8, set_tol: float = DEFAULT_SET_TOL, opt_tol: float = DEFAULT_OPT_TOL):
        self.scn = scn
        self.mesh = belief_mesh
        self.set_tol = set_tol
        self.opt_tol = opt_tol
        self.n = scn.n_actions
        self._cache: dict = {}
        self.binary = self.n == 2 and scn.policy_override is None
        if self.binary:
            self._prepare_binary()

    def _prepare_binary(self) -> None:
        K = self.scn.kl_table
        k0, slope = K[:, 0], K[:, 1] - K[:, 0]
        breaks = [0.0, 1.0]
        # lower envelope by walking from s = 0
        s = 0.0
        cur = int(np.lexsort((slope, k0))[0])
        while True:
            lower = slope < slope[cur]
            if not lower.any():
                break
            with np.errstate(divide="ignore", invalid="ignore"):
                x = (k0 - k0[cur]) / (slope[cur] - slope)
            x = np.where(lower & (x >= s), x, np.inf)
            nxt = float(x.min())
            if nxt > 1.0:
                break
            tied = np.flatnonzero(x <= nxt)
            cur = int(tied[np.argmin(slope[tied])])
            s = nxt
            breaks.append(s)
        pts = np.array(sorted(set(breaks)))
        vals = k0[:, None] + slope[:, None] * pts[None, :]
        gap = vals - vals.min(axis=0, keepdims=True)
        cand = np.flatnonzero(gap.min(axis=1) <= self.set_tol)
        # gap to the envelope is convex in s, so each candidate's tolerance band is one interval
        lo = np.empty(len(cand))
        hi = np.empty(len(cand))
        for k, j in enumerate(cand):
            g = gap[j]
            inside = np.flatnonzero(g <= self.set_tol)
            f, l = inside[0], inside[-1]
            lo[k] = pts[0] if f == 0 else _cross(pts[f - 1], pts[f], g[f - 1], g[f], self.set_tol)
            hi[k] = pts[-1] if l == len(pts) - 1 else _cross(pts[l], pts[l + 1], g[l], g[l + 1], self.set_tol)
        U = self.scn.utility_table
        d = (U[1] - U[0])[cand]
        edges = np.unique(np.concatenate([[0.0, 1.0], lo, hi]))
        mids = np.concatenate([(edges[:-1] + edges[1:]) / 2, [1.0]])
        mask = (lo[None, :] <= mids[:, None]) & (mids[:, None] <= hi[None, :])
        dmax = np.where(mask, d, -np.inf).max(axis=1)
        dmin = np.where(mask, d, np.inf).min(axis=1)
        dbar = np.where(mask, d, 0.0).sum(axis=1) / mask.sum(axis=1)
        self.edges = edges
        self.has1 = dmax >= -self.opt_tol
        self.both = self.has1 & (dmin <= self.opt_tol)
        self.up = dbar > 0

    def binary_velocity(self, s: np.ndarray, rules: np.ndarray) -> np.ndarray:
        """Velocity of sigma(action 1) for each row; rules index into SELECTIONS."""
        c = np.minimum(np.searchsorted(self.edges, s, side="right") - 1, len(self.has1) - 1)
        both = self.both[c]
        toward1 = np.where(both, (rules == 0) & self.up[c], self.has1[c])
        v = np.where(toward1, 1.0 - s, -s)
        return np.where(both & (rules == 1), 0.0, v)

    def velocity_set(self, sigma: np.ndarray) -> VelocitySet:
        scn = self.scn
        values = scn.kl_table @ sigma
        mins = tuple(int(i) for i in min_set_indices(values, self.set_tol))
        V, faces, pref = self._vertices(mins)
        ms = _project_hull(sigma, V) - sigma
        mu = V[pref] - sigma
        io = V[0] - sigma
        return VelocitySet(sigma, mins, V, faces, ms, mu, io)

    def _vertices(self, mins: tuple[int, ...]):
        hit = self._cache.get(mins)
        if hit is not None:
            return hit
        scn = self.scn
        beliefs = _mesh(len(mins), self.mesh)
        idx = np.array(mins)
        faces: list = []
        verts: dict = {}
        for w in beliefs:
            probs = np.zeros(scn.n_theta)
            probs[idx] = w
            if scn.policy_override is not None:
                ref = scn.actions.locate(scn.policy_override.value(probs))
                r = np.zeros(self.n)
                r[ref.lo] += 1 - ref.w
                r[ref.hi] += ref.w
                key = tuple(np.round(r, 15))
                faces.append((float(scn.policy_override.value(probs)),))
            else:
                u = scn.utility_table @ probs
                br = tuple(int(a) for a in np.flatnonzero(u >= u.max() - self.opt_tol))
                faces.append(br)
                for a in br:
                    r = np.zeros(self.n)
                    r[a] = 1.0
                    verts.setdefault((a,), r)
                continue
            verts.setdefault(key, r)
        keys = sorted(verts)
        V = np.array([verts[k] for k in keys])
        bary = np.zeros(scn.n_theta)
        bary[idx] = 1.0 / len(idx)
        ubar = (V @ scn.utility_table) @ bary
        pref = int(np.flatnonzero(ubar >= ubar.max() - self.opt_tol)[0])
        out = (V, sorted(set(faces)), pref)
        self._cache[mins] = out
        return out

    def step_velocity(self, sigma: np.ndarray, rule: str) -> np.ndarray:
        if self.binary:
            v1 = self.binary_velocity(np.array([sigma[1]]), np.array([SELECTIONS.index(rule)]))[0]
            return np.array([-v1, v1])
        return self.velocity_set(sigma).select(rule)


def di_velocity_set(scn: Scenario, sigma: MixedAction | Sequence[float], belief_mesh: int = 8) -> VelocitySet:
    """Candidate velocities r - sigma for best replies r to minimizer-supported beliefs."""
    probs = sigma.probs if isinstance(sigma, MixedAction) else MixedAction.of(sigma).probs
    return _Field(scn, belief_mesh).velocity_set(np.asarray(probs, dtype=float))


@dataclass
class DiTrajectory:
    times: np.ndarray
    sigma: np.ndarray
    selection: str
    velocities: np.ndarray
    max_drift: float = 0.0

    def to_csv(self) -> str:
        n = self.sigma.shape[1]
        lines = [",".join(["t"] + [f"sigma_{a}" for a in range(n)] + ["selection"])]
        for t, row in zip(self.times, self.sigma):
            lines.append(",".join([format(float(t), ".17g")] + [format(float(x), ".17g") for x in row] + [self.selection]))
        return "\n".join(lines) + "\n"


def _renormalize(x: np.ndarray) -> tuple[np.ndarray, float]:
    drift = float(np.max(np.abs(x.sum(axis=-1) - 1.0))) if x.size else 0.0
    neg = float(-min(0.0, x.min())) if x.size else 0.0
    x = np.maximum(x, 0.0)
    return x / x.sum(axis=-1, keepdims=True), max(drift, neg)


def integrate_di(
    scn: Scenario,
    sigma0: MixedAction | Sequence[float],
    T: float,
    dt: float = 1e-3,
    selection: str = "min_speed",
    belief_mesh: int = 8,
    _field: _Field | None = None,
) -> DiTrajectory:
    """Explicit Euler integration of the inclusion under one selection rule."""
    if dt <= 0 or T < dt:
        raise ValidationError("need dt > 0 and T >= dt")
    if selection not in SELECTIONS:
        raise ValidationError(f"unknown selection rule {selection!r}")
    fld = _field or _Field(scn, belief_mesh)
    x = np.asarray(sigma0.probs if isinstance(sigma0, MixedAction) else MixedAction.of(sigma0).probs, dtype=float)
    steps = int(round(T / dt))
    traj = np.empty((steps + 1, len(x)))
    vel = np.empty((steps, len(x)))
    traj[0] = x
    worst = 0.0
    for k in range(steps):
        v = fld.step_velocity(x, selection)
        vel[k] = v
        x, drift = _renormalize(x + dt * v)
        worst = max(worst, drift)
        traj[k + 1] = x
    return DiTrajectory(np.arange(steps + 1) * dt, traj, selection, vel, worst)


@dataclass
class AttractionVerdict:
    verdict: str
    max_entry_time: float
    stayed_inside: bool
    n_trajectories: int
    counterexample: dict | None = None
    entry_times: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {k: v for k, v in self.__dict__.items() if k != "entry_times"}
        out["max_entry_time"] = None if not math.isfinite(self.max_entry_time) else self.max_entry_time
        return out


def start_grid(n_actions: int, points: int = 101) -> np.ndarray:
    """Evenly spaced starts covering the simplex (101 points on the segment for two actions)."""
    if n_actions == 2:
        s = np.linspace(0.0, 1.0, points)
        return np.column_stack([1 - s, s])
    m = 1
    while math.comb(m + 1 + n_actions - 1, n_actions - 1) <= points:
        m += 1
    return _simplex_mesh(n_actions, m)


def probe_global_attraction(
    scn: Scenario,
    candidates: Sequence[Sequence[float]] | None,
    starts: np.ndarray | None = None,
    eps: float = 0.01,
    T: float = 40.0,
    dt: float = 1e-3,
    belief_mesh: int = 8,
) -> AttractionVerdict:
    """Integrate from every start under every selection rule and test entry into the eps-neighbourhood.

    ``candidates=None`` means the whole simplex. Distances use the sup norm.
    """
    n = scn.n_actions
    starts = start_grid(n) if starts is None else np.asarray(starts, dtype=float)
    if candidates is None:
        return AttractionVerdict("consistent with globally attracting", 0.0, True, len(starts) * len(SELECTIONS))
    C = np.atleast_2d(np.asarray(candidates, dtype=float))
    fld = _Field(scn, belief_mesh)
    steps = int(round(T / dt))
    rules = np.repeat(np.arange(len(SELECTIONS)), len(starts))
    X = np.tile(starts, (len(SELECTIONS), 1))
    B = len(X)

    def dist(X):
        return np.min(np.max(np.abs(X[:, None, :] - C[None, :, :]), axis=2), axis=1)

    inside = dist(X) < eps
    entry = np.where(inside, 0.0, np.inf)
    if fld.binary:
        # sup distance on two actions is the distance in the second coordinate
        s, cs = X[:, 1].copy(), C[:, 1]
    for k in range(steps):
        if fld.binary:
            s = np.clip(s + dt * fld.binary_velocity(s, rules), 0.0, 1.0)
            now = np.abs(s[:, None] - cs[None, :]).min(axis=1) < eps
        else:
            V = np.array([fld.velocity_set(x).select(SELECTIONS[r]) for x, r in zip(X, rules)])
            X, _ = _renormalize(X + dt * V)
            now = dist(X) < eps
        t = (k + 1) * dt
        newly = now & ~np.isfinite(entry)
        entry[newly] = t
        # leaving resets the clock, so a finite entry time means it stayed inside through T
        entry[~now] = np.inf
    if fld.binary:
        X = np.column_stack([1 - s, s])
    ok = np.isfinite(entry)
    max_entry = float(entry[ok].max()) if ok.any() else math.inf
    times = {f"{SELECTIONS[r]}:{i % len(starts)}": (float(e) if np.isfinite(e) else None) for i, (r, e) in enumerate(zip(rules, entry))}
    if ok.all():
        return AttractionVerdict("consistent with globally attracting", max_entry, True, B, None, times)
    bad = int(np.flatnonzero(~ok)[0])
    cx = {
        "start": starts[bad % len(starts)].tolist(),
        "selection": SELECTIONS[rules[bad]],
        "final": X[bad].tolist(),
    }
    return AttractionVerdict("not globally attracting", max_entry, False, B, cx, times)


# Shadowing ---------------------------------------------------------------------------------


@dataclass
class ShadowingReport:
    anchors: list
    taus: list
    distances: list
    window: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


def _harmonic(t: np.ndarray) -> np.ndarray:
    return np.cumsum(1.0 / np.arange(1, int(t.max()) + 1))[t - 1]


def shadowing_distance(
    scn: Scenario,
    path: PathRecord,
    window: float,
    dt: float = 0.01,
    anchors: Sequence[int] | None = None,
    start_radius: float = 0.01,
    belief_mesh: int = 8,
) -> ShadowingReport:
    """inf over nearby DI starts of the sup distance to the interpolated frequencies over each window."""
    T = path.horizon
    n = path.n_actions
    ts = np.arange(1, T + 1)
    tau = np.cumsum(1.0 / ts)
    if tau[-1] - tau[0] < 2 * window:
        raise WindowTooLong("path too short for two windows of this slow-time length")
    counts = np.cumsum(np.eye(n)[path.actions], axis=0)
    freq = counts / ts[:, None]
    if anchors is None:
        last = int(np.searchsorted(tau, tau[-1] - window, side="right"))
        anchors = sorted(set(np.unique(np.geomspace(10, max(last, 11), 8).astype(int)).tolist()))
        anchors = [a for a in anchors if a <= last]
    fld = _Field(scn, belief_mesh)
    out_t, out_tau, out_d = [], [], []
    for t0 in anchors:
        if not 1 <= t0 <= T or tau[t0 - 1] + window > tau[-1]:
            raise WindowTooLong(f"anchor {t0} leaves no room for the window")
        start = freq[t0 - 1]
        grid = tau[t0 - 1] + np.arange(0.0, window + dt / 2, dt)
        w = np.column_stack([np.interp(grid, tau, freq[:, a]) for a in range(n)])
        best = math.inf
        for s0 in _ball(start, start_radius):
            for rule in SELECTIONS:
                tr = integrate_di(scn, s0, window, dt, rule, _field=fld)
                m = min(len(tr.sigma), len(w))
                best = min(best, float(np.max(np.abs(tr.sigma[:m] - w[:m]))))
        out_t.append(int(t0))
        out_tau.append(float(tau[t0 - 1]))
        out_d.append(best)
    return ShadowingReport(out_t, out_tau, out_d, window)


def _ball(center: np.ndarray, radius: float) -> list[np.ndarray]:
    pts = [center]
    for a in range(len(center)):
        for r in (radius / 2, radius):
            e = np.zeros_like(center)
            e[a] = 1.0
            pts.append(project_simplex(center + r * (e - center) / max(np.max(np.abs(e - center)), 1e-300)))
    return pts
