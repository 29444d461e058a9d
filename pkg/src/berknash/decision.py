"""Expected utility, best replies and logit choice."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import ActionRef, Belief, GameScenario, MixedAction, Scenario

DEFAULT_OPT_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class BestReplySet:
    indices: tuple[int, ...]
    utilities: np.ndarray
    tol: float
    override: ActionRef | None = None

    def to_rows(self) -> list[tuple[int, float, bool]]:
        chosen = set(self.indices)
        return [(i, float(u), i in chosen) for i, u in enumerate(self.utilities)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["action_index", "utility", "optimal_flag"])
        for i, u, f in self.to_rows():
            w.writerow([i, format(u, ".17g"), int(f)])
        return buf.getvalue()


def expected_utility(scn: Scenario, a: int, theta: int) -> float:
    """Expected payoff of action ``a`` when the outcome follows the model at ``theta``."""
    return float(scn.utility_table[a, theta])


def mean_utilities(scn: Scenario, mu: Belief | np.ndarray) -> np.ndarray:
    probs = mu.probs if isinstance(mu, Belief) else np.asarray(mu)
    return scn.utility_table @ probs


def argmax_within(values: np.ndarray, tol: float) -> tuple[int, ...]:
    return tuple(int(i) for i in np.flatnonzero(values >= values.max() - tol))


def best_reply_set(scn: Scenario, mu: Belief, tol: float = DEFAULT_OPT_TOL) -> BestReplySet:
    u = mean_utilities(scn, mu)
    if scn.policy_override is not None:
        ref = scn.override_ref(mu)
        return BestReplySet((ref.nearest,), u, tol, ref)
    return BestReplySet(argmax_within(u, tol), u, tol)


def logit_probs(u: np.ndarray, tau: float) -> np.ndarray:
    if tau <= 0:
        raise ValueError("temperature must be positive")
    z = (u - np.max(u)) / tau
    e = np.exp(z)
    return e / e.sum()


def logit_choice(scn: Scenario, mu: Belief, tau: float) -> MixedAction:
    """Choice probabilities proportional to exp(expected utility / tau)."""
    return MixedAction(logit_probs(mean_utilities(scn, mu), tau))


# Games -----------------------------------------------------------------------


def joint_grid(game: GameScenario, i: int, own: np.ndarray, opp_values: Sequence[np.ndarray]) -> np.ndarray:
    """Joint action rows for every own action crossed with every opponent combination."""
    cols = [None] * game.n_players
    grids = np.meshgrid(own, *opp_values, indexing="ij")
    cols[i] = grids[0].ravel()
    k = 1
    for j in range(game.n_players):
        if j != i:
            cols[j] = grids[k].ravel()
            k += 1
    return np.column_stack(cols)


def game_utilities(
    game: GameScenario, i: int, mu: Belief, opponents: Sequence[MixedAction], support_only: bool = True
) -> np.ndarray:
    """Own-action utilities averaged over the belief and the opponents' product mix."""
    player = game.players[i]
    opp_idx = [j for j in range(game.n_players) if j != i]
    vals, weights = [], []
    for j, mix in zip(opp_idx, opponents):
        sup = np.flatnonzero(mix.probs > 0) if support_only else np.arange(len(mix))
        vals.append(game.players[j].actions.values[sup])
        weights.append(mix.probs[sup])
    joint = joint_grid(game, i, player.actions.values, vals)
    w = np.ones(1)
    for wj in weights:
        w = np.multiply.outer(w, wj).ravel()
    n_own = len(player.actions)
    theta_idx = np.flatnonzero(mu.probs > 0)
    means = player.mean(player.grid.points[theta_idx], joint)  # theta x rows
    mbar = mu.probs[theta_idx] @ means
    u = player.c0(joint) + player.c1(joint) * mbar
    return u.reshape(n_own, -1) @ w


def game_best_reply(
    game: GameScenario, i: int, mu: Belief, opponents: Sequence[MixedAction], tol: float = DEFAULT_OPT_TOL
) -> BestReplySet:
    u = game_utilities(game, i, mu, opponents)
    return BestReplySet(argmax_within(u, tol), u, tol)
