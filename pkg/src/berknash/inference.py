"""KL divergences, KL-minimizing parameter sets, Bayes updates and q-moments."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .model import ActionRef, Belief, BerkNashError, MixedAction, Scenario, SupportViolation

DEFAULT_SET_TOL = 1e-9
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class ZeroEvidence(BerkNashError):
    """Every parameter assigns zero likelihood to an observation."""


def _kl_rows(scn: Scenario, a: int | ActionRef) -> np.ndarray:
    """KL(Q(.|a) || Q_theta(.|a)) for every grid point."""
    if scn.is_gaussian:
        return 0.5 * (scn.true_at(a) - scn.subjective_at(a)) ** 2
    p = np.asarray(scn.true_at(a))
    q = scn.subjective_at(a)
    pos = p > 0
    if np.any(q[:, pos] <= 0):
        t = int(np.flatnonzero(np.any(q[:, pos] <= 0, axis=1))[0])
        raise SupportViolation(f"zero subjective probability under {scn.grid.labels[t]} where truth is positive")
    return np.sum(p[pos] * (np.log(p[pos]) - np.log(q[:, pos])), axis=1)


def kl_divergence(scn: Scenario, theta: int, a: int | ActionRef) -> float:
    """KL divergence (nats) of the model at grid point ``theta`` from the truth at action ``a``."""
    if isinstance(a, ActionRef):
        return float(_kl_rows(scn, a)[theta])
    return float(scn.kl_table[theta, a])


def weighted_kl(scn: Scenario, theta: int, sigma: MixedAction | np.ndarray) -> float:
    probs = sigma.probs if isinstance(sigma, MixedAction) else np.asarray(sigma)
    return float(scn.kl_table[theta] @ probs)


@dataclass(frozen=True, eq=False)
class KlReport:
    values: np.ndarray
    min_value: float
    indices: tuple[int, ...]
    tol: float
    labels: tuple[str, ...]

    def to_rows(self) -> list[tuple]:
        members = set(self.indices)
        return [(i, self.labels[i], float(v), i in members) for i, v in enumerate(self.values)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["theta_index", "theta_label", "weighted_kl", "in_min_set"])
        for i, lab, v, m in self.to_rows():
            w.writerow([i, lab, format(v, ".17g"), int(m)])
        return buf.getvalue()


def min_set_indices(values: np.ndarray, tol: float = DEFAULT_SET_TOL) -> np.ndarray:
    return np.flatnonzero(values <= values.min() + tol)


def kl_min_set(scn: Scenario, sigma: MixedAction | np.ndarray, tol: float = DEFAULT_SET_TOL) -> KlReport:
    """Weighted KL for each grid point and the set of minimizers within ``tol``."""
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    probs = sigma.probs if isinstance(sigma, MixedAction) else np.asarray(sigma, dtype=float)
    values = scn.kl_table @ probs
    values.setflags(write=False)
    idx = min_set_indices(values, tol)
    return KlReport(values, float(values.min()), tuple(int(i) for i in idx), tol, scn.grid.labels)


def outcome_index(scn: Scenario, y: float) -> int:
    vals = scn.outcomes.values
    for i, v in enumerate(vals):
        if v == y:
            return i
    raise ValueError(f"{y!r} is not an outcome of this scenario")


def log_likelihood(scn: Scenario, a: int | ActionRef, y: float, *, y_is_index: bool = False) -> np.ndarray:
    """log q_theta(y | a) for every grid point."""
    if scn.is_gaussian:
        m = scn.subjective_at(a)
        return -0.5 * (y - m) ** 2 - _HALF_LOG_2PI
    j = int(y) if y_is_index else outcome_index(scn, y)
    with np.errstate(divide="ignore"):
        return np.log(scn.subjective_at(a)[:, j])


def bayes_update(scn: Scenario, belief: Belief, a: int | ActionRef, y: float, *, y_is_index: bool = False) -> Belief:
    """Posterior after observing outcome ``y`` under action ``a``."""
    ll = log_likelihood(scn, a, y, y_is_index=y_is_index)
    logw = belief.logw + ll
    top = np.max(logw)
    if not np.isfinite(top):
        raise ZeroEvidence("observation has zero likelihood under every parameter")
    logw = logw - top
    logw = logw - math.log(np.exp(logw).sum())
    logw.setflags(write=False)
    return Belief(logw)


def q_moment(scn: Scenario, theta: int, theta_prime: int, a: int | ActionRef, q: float) -> float:
    """E_Q[(q_theta'(y|a) / q_theta(y|a))**q]; a value <= 1 means theta is q-preferred at a."""
    if q <= 0:
        raise ValueError("q must be positive")
    if theta == theta_prime:
        return 1.0
    if scn.is_gaussian:
        means = scn.subjective_at(a)
        m, mp, ms = float(means[theta]), float(means[theta_prime]), float(scn.true_at(a))
        d = mp - m
        return math.exp(q * d * ms - 0.5 * q * (mp * mp - m * m) + 0.5 * q * q * d * d)
    p = np.asarray(scn.true_at(a))
    rows = scn.subjective_at(a)
    pos = p > 0
    qt, qp = rows[theta, pos], rows[theta_prime, pos]
    if np.any(qt <= 0) or np.any(qp <= 0):
        raise SupportViolation("q-moment needs positive subjective probabilities on the true support")
    return float(np.sum(p[pos] * np.exp(q * (np.log(qp) - np.log(qt)))))


def q_moments(scn: Scenario, theta: int, a: int | ActionRef, q: float, reverse: bool = False) -> np.ndarray:
    """q_moment(theta, j, a, q) for every grid point j, or q_moment(j, theta, a, q) when ``reverse``."""
    if q <= 0:
        raise ValueError("q must be positive")
    if scn.is_gaussian:
        means = scn.subjective_at(a)
        ms = float(scn.true_at(a))
        m0 = np.full_like(means, means[theta])
        m, mp = (means, m0) if reverse else (m0, means)
        d = mp - m
        return np.exp(q * d * ms - 0.5 * q * (mp * mp - m * m) + 0.5 * q * q * d * d)
    p = np.asarray(scn.true_at(a))
    pos = p > 0
    rows = scn.subjective_at(a)[:, pos]
    if np.any(rows <= 0):
        raise SupportViolation("q-moment needs positive subjective probabilities on the true support")
    lr = np.log(rows) - np.log(rows[theta])
    if reverse:
        lr = -lr
    return np.exp(q * lr) @ p[pos]
