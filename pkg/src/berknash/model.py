"""Domain types for single-agent learning problems and their validation.

A scenario bundles a finite parameter grid, an action set, an outcome space,
the true outcome kernel, the agent's subjective kernel family, a payoff and a
prior. Everything is immutable once built; numerical tables are stored as
read-only numpy arrays.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

NORMALIZATION_TOL = 1e-9


class BerkNashError(Exception):
    """Base class for library errors."""


class ValidationError(BerkNashError):
    """Input failed a structural check."""


class NormalizationError(ValidationError):
    pass


class SupportViolation(ValidationError):
    pass


class EmptyGrid(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class AllZero(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


def _frozen(arr: Any, dtype=float) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class ParameterGrid:
    points: np.ndarray
    labels: tuple[str, ...]

    @classmethod
    def from_points(cls, points: Sequence, labels: Sequence[str] | None = None) -> "ParameterGrid":
        pts = np.asarray(points, dtype=float)
        if pts.size == 0:
            raise EmptyGrid("parameter grid has no points")
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2:
            raise DimensionMismatch("grid points must be vectors")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("grid coordinates must be finite")
        if len({tuple(p) for p in pts.tolist()}) != len(pts):
            raise ValidationError("grid points must be distinct")
        if labels is None:
            labels = [_default_label(p) for p in pts]
        if len(labels) != len(pts):
            raise LengthMismatch("one label per grid point required")
        return cls(_frozen(pts), tuple(str(s) for s in labels))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @cached_property
    def product_axes(self) -> tuple[np.ndarray, ...] | None:
        """Per-coordinate values when the grid is a full Cartesian product."""
        axes = tuple(np.unique(self.points[:, j]) for j in range(self.dim))
        if math.prod(len(ax) for ax in axes) != len(self):
            return None
        return axes


def _default_label(p: np.ndarray) -> str:
    vals = [f"{v:.6g}" for v in p]
    return vals[0] if len(vals) == 1 else "(" + ", ".join(vals) + ")"


@dataclass(frozen=True, eq=False)
class ActionRef:
    """A point of the action interval, as a convex combination of two grid actions.

    Kernels and payoffs at such a point are taken as the same combination of the
    grid rows, which is exact whenever they are affine in the action.
    """

    lo: int
    hi: int
    w: float

    @property
    def nearest(self) -> int:
        return self.hi if self.w > 0.5 else self.lo

    def weights(self, n: int) -> np.ndarray:
        out = np.zeros(n)
        out[self.lo] += 1.0 - self.w
        out[self.hi] += self.w
        return out


@dataclass(frozen=True, eq=False)
class ActionSet:
    values: np.ndarray
    provenance: tuple

    @classmethod
    def native(cls, values: Sequence) -> "ActionSet":
        return cls._build(values, ("native-finite",))

    @classmethod
    def interval(cls, lo: float, hi: float, n: int) -> "ActionSet":
        return cls._build(np.linspace(lo, hi, n), ("discretized-interval", float(lo), float(hi), int(n)))

    @classmethod
    def _build(cls, values, provenance) -> "ActionSet":
        vals = np.asarray(values, dtype=float)
        if vals.size == 0:
            raise EmptyGrid("action set is empty")
        if not np.all(np.isfinite(vals)):
            raise ValidationError("actions must be finite")
        keys = [tuple(np.atleast_1d(v).tolist()) for v in vals]
        if len(set(keys)) != len(keys):
            raise ValidationError("actions must be distinct")
        if provenance[0] == "discretized-interval":
            if vals.ndim != 1 or np.any(np.diff(vals) <= 0):
                raise ValidationError("discretized interval actions must be strictly increasing")
        return cls(_frozen(vals), tuple(provenance))

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def is_interval(self) -> bool:
        return self.provenance[0] == "discretized-interval"

    def locate(self, value: float) -> ActionRef:
        """Express a scalar action value through its two neighbouring grid actions."""
        v = self.values
        if v.ndim != 1:
            raise DimensionMismatch("locate needs scalar actions")
        if value <= v[0]:
            return ActionRef(0, 0, 0.0)
        if value >= v[-1]:
            n = len(v) - 1
            return ActionRef(n, n, 0.0)
        hi = int(np.searchsorted(v, value, side="right"))
        lo = hi - 1
        w = (value - v[lo]) / (v[hi] - v[lo])
        if w == 0.0:
            return ActionRef(lo, lo, 0.0)
        return ActionRef(lo, hi, float(w))


@dataclass(frozen=True, eq=False)
class OutcomeSpace:
    kind: str  # "finite" or "gaussian"
    values: tuple[float, ...] = ()

    @classmethod
    def finite(cls, values: Sequence[float]) -> "OutcomeSpace":
        vals = tuple(float(v) for v in values)
        if len(set(vals)) < 2 or len(set(vals)) != len(vals):
            raise ValidationError("finite outcome space needs at least two distinct values")
        return cls("finite", vals)

    @classmethod
    def gaussian(cls) -> "OutcomeSpace":
        return cls("gaussian")

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True, eq=False)
class KernelFamily:
    """Subjective kernels: prob[theta, a, y] or unit-variance means[theta, a]."""

    kind: str  # "categorical" or "gaussian"
    table: np.ndarray


@dataclass(frozen=True, eq=False)
class TrueKernel:
    """True kernel: prob[a, y] or unit-variance means[a]."""

    kind: str
    table: np.ndarray


@dataclass(frozen=True, eq=False)
class Payoff:
    """Either a table pi[a, y] or affine coefficients pi(a, y) = c0[a] + c1[a] * y."""

    kind: str  # "table" or "affine"
    c0: np.ndarray
    c1: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class Belief:
    logw: np.ndarray

    @cached_property
    def log_probs(self) -> np.ndarray:
        out = self.logw - logsumexp(self.logw)
        out.setflags(write=False)
        return out

    @cached_property
    def probs(self) -> np.ndarray:
        x = np.exp(self.logw - np.max(self.logw))
        x = x / x.sum()
        x.setflags(write=False)
        return x

    def __len__(self) -> int:
        return self.logw.shape[0]

    def mass(self, indices: Sequence[int]) -> float:
        return float(self.probs[list(indices)].sum())


def belief_from_weights(weights: Sequence[float], n: int | None = None) -> Belief:
    """Normalized belief in log space from nonnegative weights."""
    w = np.asarray(weights, dtype=float)
    if n is not None and w.shape[0] != n:
        raise LengthMismatch(f"expected {n} weights, got {w.shape[0]}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValidationError("weights must be finite and nonnegative")
    if not np.any(w > 0):
        raise AllZero("at least one weight must be positive")
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    return Belief(_frozen(logw - logsumexp(logw)))


def point_belief(n: int, index: int) -> Belief:
    w = np.zeros(n)
    w[index] = 1.0
    return belief_from_weights(w)


@dataclass(frozen=True, eq=False)
class MixedAction:
    probs: np.ndarray

    @classmethod
    def of(cls, probs: Sequence[float]) -> "MixedAction":
        p = np.asarray(probs, dtype=float)
        if np.any(p < -1e-12) or abs(p.sum() - 1.0) > 1e-9:
            raise ValidationError("mixed action must be a probability vector")
        p = np.clip(p, 0.0, None)
        return cls(_frozen(p / p.sum()))

    @classmethod
    def pure(cls, n: int, index: int) -> "MixedAction":
        p = np.zeros(n)
        p[index] = 1.0
        return cls(_frozen(p))

    @property
    def support(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.probs > 0)]

    def __len__(self) -> int:
        return self.probs.shape[0]


@dataclass(frozen=True, eq=False)
class PolicyOverride:
    """Injected action rule a(mu) = kappa * prod(mu[i] for i in indices).

    The value lives on the scalar action interval and is returned as an ActionRef.
    """

    kind: str
    kappa: float
    indices: tuple[int, ...]

    def value(self, probs: np.ndarray) -> float:
        return float(self.kappa * np.prod(np.asarray(probs)[list(self.indices)]))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "kappa": self.kappa, "indices": list(self.indices)}


@dataclass(frozen=True, eq=False)
class Scenario:
    id: str
    grid: ParameterGrid
    actions: ActionSet
    outcomes: OutcomeSpace
    family: KernelFamily
    true_kernel: TrueKernel
    payoff: Payoff
    prior: Belief
    prior_weights: np.ndarray
    policy_override: PolicyOverride | None = None
    metadata: Mapping[str, Any] = field(default_factory=dict)

    @property
    def n_theta(self) -> int:
        return len(self.grid)

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def is_gaussian(self) -> bool:
        return self.outcomes.kind == "gaussian"

    def action_weights(self, a: int | ActionRef) -> np.ndarray:
        if isinstance(a, ActionRef):
            return a.weights(self.n_actions)
        w = np.zeros(self.n_actions)
        w[int(a)] = 1.0
        return w

    def subjective_at(self, a: int | ActionRef) -> np.ndarray:
        """Subjective kernel at an action: prob[theta, y] or means[theta]."""
        t = self.family.table
        if isinstance(a, ActionRef):
            return (1.0 - a.w) * t[:, a.lo] + a.w * t[:, a.hi]
        return t[:, int(a)]

    def true_at(self, a: int | ActionRef) -> np.ndarray | float:
        t = self.true_kernel.table
        if isinstance(a, ActionRef):
            return (1.0 - a.w) * t[a.lo] + a.w * t[a.hi]
        return t[int(a)]

    @cached_property
    def kl_table(self) -> np.ndarray:
        """K[theta, a] for every grid point and grid action."""
        from .inference import _kl_rows

        out = np.stack([_kl_rows(self, a) for a in range(self.n_actions)], axis=1)
        out.setflags(write=False)
        return out

    @cached_property
    def utility_table(self) -> np.ndarray:
        """U[a, theta]: expected payoff of each action under each parameter."""
        if self.is_gaussian:
            means = self.family.table  # theta x a
            out = self.payoff.c0[:, None] + self.payoff.c1[:, None] * means.T
        else:
            out = np.einsum("tay,ay->at", self.family.table, self.payoff.c0)
        out = np.ascontiguousarray(out)
        out.setflags(write=False)
        return out

    @cached_property
    def true_utility(self) -> np.ndarray:
        if self.is_gaussian:
            out = self.payoff.c0 + self.payoff.c1 * self.true_kernel.table
        else:
            out = np.einsum("ay,ay->a", self.true_kernel.table, self.payoff.c0)
        out.setflags(write=False)
        return out

    def override_ref(self, belief: Belief) -> ActionRef:
        return self.actions.locate(self.policy_override.value(belief.probs))

    def to_spec(self) -> dict:
        return scenario_to_spec(self)


def build_scenario(spec: Mapping[str, Any]) -> Scenario:
    """Validate a scenario description and return an immutable Scenario."""
    for key in ("id", "grid", "actions", "outcomes", "kernel", "true_kernel", "payoff", "prior"):
        if key not in spec:
            raise ValidationError(f"scenario spec is missing '{key}'")
    g = spec["grid"]
    grid = ParameterGrid.from_points(g["points"], g.get("labels"))
    act = spec["actions"]
    prov = act.get("provenance", {"kind": "native-finite"})
    if prov["kind"] == "discretized-interval":
        actions = ActionSet._build(
            act["values"], ("discretized-interval", float(prov["lo"]), float(prov["hi"]), int(prov["n"]))
        )
        if len(actions) != int(prov["n"]):
            raise DimensionMismatch("interval action count does not match provenance")
    else:
        actions = ActionSet._build(act["values"], ("native-finite",))
    oc = spec["outcomes"]
    if oc["kind"] == "finite":
        outcomes = OutcomeSpace.finite(oc["values"])
    elif oc["kind"] == "gaussian":
        outcomes = OutcomeSpace.gaussian()
    else:
        raise ValidationError(f"unknown outcome kind {oc['kind']!r}")

    n_t, n_a = len(grid), len(actions)
    kern, true = spec["kernel"], spec["true_kernel"]
    if outcomes.kind == "finite":
        if kern["kind"] != "categorical" or true["kind"] != "categorical":
            raise ValidationError("finite outcomes need categorical kernels")
        n_y = len(outcomes)
        fam = np.asarray(kern["prob"], dtype=float)
        tru = np.asarray(true["prob"], dtype=float)
        if fam.shape != (n_t, n_a, n_y):
            raise DimensionMismatch(f"kernel table shape {fam.shape} != {(n_t, n_a, n_y)}")
        if tru.shape != (n_a, n_y):
            raise DimensionMismatch(f"true kernel shape {tru.shape} != {(n_a, n_y)}")
        for name, tab in (("kernel", fam), ("true kernel", tru)):
            if not np.all(np.isfinite(tab)) or np.any(tab < 0):
                raise NormalizationError(f"{name} has negative or non-finite entries")
            if np.max(np.abs(tab.sum(axis=-1) - 1.0)) > NORMALIZATION_TOL:
                raise NormalizationError(f"{name} rows must sum to 1")
        bad = (tru[None, :, :] > 0) & (fam <= 0)
        if np.any(bad):
            t, a, y = (int(i) for i in np.argwhere(bad)[0])
            raise SupportViolation(
                f"outcome {outcomes.values[y]} has true mass at action {a} but zero subjective mass under {grid.labels[t]}"
            )
    else:
        if kern["kind"] != "gaussian" or true["kind"] != "gaussian":
            raise ValidationError("gaussian outcomes need gaussian kernels")
        fam = np.asarray(kern["means"], dtype=float)
        tru = np.asarray(true["means"], dtype=float)
        if fam.shape != (n_t, n_a):
            raise DimensionMismatch(f"mean table shape {fam.shape} != {(n_t, n_a)}")
        if tru.shape != (n_a,):
            raise DimensionMismatch(f"true means shape {tru.shape} != {(n_a,)}")
        if not (np.all(np.isfinite(fam)) and np.all(np.isfinite(tru))):
            raise ValidationError("means must be finite")

    pay = spec["payoff"]
    if pay["kind"] == "table":
        if outcomes.kind != "finite":
            raise ValidationError("payoffs on the real line must be affine in the outcome")
        c0 = np.asarray(pay["values"], dtype=float)
        if c0.shape != (n_a, len(outcomes)):
            raise DimensionMismatch(f"payoff table shape {c0.shape} != {(n_a, len(outcomes))}")
        payoff = Payoff("table", _frozen(c0))
    elif pay["kind"] == "affine":
        c0 = np.asarray(pay["c0"], dtype=float)
        c1 = np.asarray(pay["c1"], dtype=float)
        if c0.shape != (n_a,) or c1.shape != (n_a,):
            raise DimensionMismatch("affine payoff coefficients need one entry per action")
        if outcomes.kind == "finite":
            c0 = c0[:, None] + c1[:, None] * np.asarray(outcomes.values)[None, :]
            payoff = Payoff("table", _frozen(c0))
        else:
            payoff = Payoff("affine", _frozen(c0), _frozen(c1))
    else:
        raise ValidationError(f"unknown payoff kind {pay['kind']!r}")
    if not np.all(np.isfinite(payoff.c0)):
        raise ValidationError("payoff must be finite")

    weights = np.asarray(spec["prior"]["weights"], dtype=float)
    if weights.shape != (n_t,):
        raise DimensionMismatch(f"prior has {weights.size} weights for {n_t} grid points")
    if not np.all(np.isfinite(weights)) or np.any(weights < 0):
        raise ValidationError("prior weights must be finite and nonnegative")
    if np.any(weights == 0):
        raise SupportViolation("prior must put positive weight on every grid point")
    prior = belief_from_weights(weights)

    override = None
    po = spec.get("policy_override")
    if po is not None:
        if po.get("kind") != "product":
            raise ValidationError(f"unknown policy_override kind {po.get('kind')!r}")
        idx = tuple(int(i) for i in po["indices"])
        if not idx or any(i < 0 or i >= n_t for i in idx):
            raise DimensionMismatch("policy_override indices out of range")
        if actions.values.ndim != 1 or np.any(np.diff(actions.values) <= 0):
            raise ValidationError("policy_override needs increasing scalar actions")
        k = len(idx)
        top = float(po["kappa"]) * (1.0 / k) ** k
        if not (actions.values[0] <= 0.0 <= actions.values[-1] and top <= actions.values[-1]):
            raise ValidationError("policy_override values must stay inside the action range")
        override = PolicyOverride("product", float(po["kappa"]), idx)

    return Scenario(
        id=str(spec["id"]),
        grid=grid,
        actions=actions,
        outcomes=outcomes,
        family=KernelFamily(kern["kind"], _frozen(fam)),
        true_kernel=TrueKernel(true["kind"], _frozen(tru)),
        payoff=payoff,
        prior=prior,
        prior_weights=_frozen(weights),
        policy_override=override,
        metadata=dict(spec.get("metadata", {})),
    )


def scenario_to_spec(scn: Scenario) -> dict:
    """Inverse of build_scenario, with a fixed key order."""
    acts: dict[str, Any] = {"values": scn.actions.values.tolist()}
    if scn.actions.is_interval:
        _, lo, hi, n = scn.actions.provenance
        acts["provenance"] = {"kind": "discretized-interval", "lo": lo, "hi": hi, "n": n}
    else:
        acts["provenance"] = {"kind": "native-finite"}
    if scn.is_gaussian:
        outcomes = {"kind": "gaussian"}
        kernel = {"kind": "gaussian", "means": scn.family.table.tolist()}
        true = {"kind": "gaussian", "means": scn.true_kernel.table.tolist()}
        payoff = {"kind": "affine", "c0": scn.payoff.c0.tolist(), "c1": scn.payoff.c1.tolist()}
    else:
        outcomes = {"kind": "finite", "values": list(scn.outcomes.values)}
        kernel = {"kind": "categorical", "prob": scn.family.table.tolist()}
        true = {"kind": "categorical", "prob": scn.true_kernel.table.tolist()}
        payoff = {"kind": "table", "values": scn.payoff.c0.tolist()}
    spec: dict[str, Any] = {
        "id": scn.id,
        "grid": {"points": scn.grid.points.tolist(), "labels": list(scn.grid.labels)},
        "actions": acts,
        "outcomes": outcomes,
        "kernel": kernel,
        "true_kernel": true,
        "payoff": payoff,
        "prior": {"weights": scn.prior_weights.tolist()},
    }
    if scn.policy_override is not None:
        spec["policy_override"] = scn.policy_override.to_dict()
    spec["metadata"] = _jsonable(dict(scn.metadata))
    return spec


def dumps_spec(spec: Mapping[str, Any]) -> str:
    return json.dumps(spec, indent=1) + "\n"


def load_scenario(path: str) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return build_scenario(json.load(fh))


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


# Games -----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PlayerModel:
    """One player of a game with unit-variance Gaussian outcomes.

    ``mean(theta_points, joint)`` gives perceived means for every grid point and
    joint action row; ``true_mean(joint)`` the true means; the payoff is
    ``c0(joint) + c1(joint) * y``. All callables are vectorized over joint rows.
    """

    name: str
    grid: ParameterGrid
    actions: ActionSet
    mean: Any
    true_mean: Any
    c0: Any
    c1: Any
    prior: Belief


@dataclass(frozen=True, eq=False)
class GameScenario:
    id: str
    players: tuple[PlayerModel, ...]
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.players) < 1:
            raise EmptyGrid("a game needs players")
        for p in self.players:
            if len(p.prior) != len(p.grid):
                raise DimensionMismatch(f"prior of {p.name} does not match its grid")
            if p.actions.values.ndim != 1:
                raise DimensionMismatch("game actions must be scalar")

    @property
    def n_players(self) -> int:
        return len(self.players)
