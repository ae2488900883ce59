"""Exact maximum-entropy solver and segment-advantage scoring."""
import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .exceptions import ConsistencyError, ParameterError, SolverError
from .mdp import discount_weights
from .validation import check_policy

DEFAULT_ALPHA = 0.1
DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITERS = 1_000_000


@dataclass(frozen=True, eq=False)
class SoftSolution:
    """Optimal soft values, advantages and policy at temperature ``alpha``."""

    q_star: np.ndarray
    v_star: np.ndarray
    alpha: float
    residual: float
    iterations: int = 0

    @property
    def a_star(self):
        return self.q_star - self.v_star[:, None]

    @property
    def pi_star(self):
        return np.exp(self.a_star / self.alpha)

    @property
    def log_pi_star(self):
        return self.a_star / self.alpha

    def to_dict(self):
        return {
            "alpha": self.alpha,
            "q_star": self.q_star.tolist(),
            "residual": self.residual,
            "v_star": self.v_star.tolist(),
        }

    @classmethod
    def from_dict(cls, doc, tol=1e-6):
        sol = cls(np.asarray(doc["q_star"], dtype=float), np.asarray(doc["v_star"], dtype=float),
                  float(doc["alpha"]), float(doc["residual"]))
        err = verify_consistency(sol.a_star, sol.alpha)
        if np.max(err) > tol:
            raise ConsistencyError(f"loaded solution is not normalized (max error {np.max(err):.3e})")
        return sol


def save_solution(sol, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(sol.to_dict(), fh, sort_keys=True)


def load_solution(path):
    with open(path, encoding="utf-8") as fh:
        return SoftSolution.from_dict(json.load(fh))


def soft_q(mdp, v):
    return mdp.reward + mdp.discount * (mdp.transition @ v)


def soft_bellman_backup(mdp, v, alpha):
    """One application of the soft Bellman optimality operator."""
    return alpha * logsumexp(soft_q(mdp, v) / alpha, axis=1)


def soft_value_iteration(mdp, alpha=DEFAULT_ALPHA, tol=DEFAULT_TOL, max_iters=DEFAULT_MAX_ITERS):
    """Iterate the soft backup to a sup-norm residual of at most ``tol``.

    ``V(s) = alpha * log sum_a exp(Q(s, a) / alpha)`` with
    ``Q = r + gamma * P V``.  The returned advantage is ``Q - V`` computed from
    the final iterate, so the per-state normalization holds up to the residual
    divided by ``alpha``.
    """
    if alpha <= 0:
        raise ParameterError("alpha must be positive")
    if not 0.0 <= mdp.discount < 1.0:
        raise ParameterError("soft value iteration needs discount < 1")
    if tol <= 0:
        raise ParameterError("tol must be positive")

    v = np.zeros(mdp.num_states)
    residual = np.inf
    for it in range(1, max_iters + 1):
        v_next = soft_bellman_backup(mdp, v, alpha)
        residual = float(np.max(np.abs(v_next - v)))
        v = v_next
        if residual <= tol:
            break
    else:
        raise SolverError(f"no convergence in {max_iters} iterations", residual)
    # final backup so that V is exactly the soft maximum of the stored Q
    q = soft_q(mdp, v)
    v = alpha * logsumexp(q / alpha, axis=1)
    return SoftSolution(q, v, float(alpha), residual, it)


def verify_consistency(advantage, alpha):
    """Per-state deviation of ``sum_a exp(A(s, a) / alpha)`` from 1."""
    adv = np.asarray(advantage, dtype=float)
    return np.abs(np.exp(logsumexp(adv / alpha, axis=1)) - 1.0)


def policy_from_advantage(a_star, alpha, tol=1e-4):
    err = verify_consistency(a_star, alpha)
    if np.max(err) > tol:
        bad = np.flatnonzero(err > tol).tolist()
        raise ConsistencyError(f"advantage rows {bad} violate normalization (max error {np.max(err):.3e})")
    pi = np.exp(np.asarray(a_star, dtype=float) / alpha)
    return pi / pi.sum(axis=1, keepdims=True)


def segment_advantage_exact(sol, seg, gamma):
    """Discounted sum of optimal advantages along a segment (negated regret)."""
    s, a = np.asarray(seg.pairs).T
    return float(discount_weights(len(seg), gamma) @ sol.a_star[s, a])


def segment_advantage_telescoped(sol, mdp, seg, gamma, next_state=None):
    """Value-difference form of the segment advantage.

    ``gamma**k V(s_k) - V(s_0) + sum_t gamma**t r(s_t, a_t)`` where ``s_k`` is
    the state reached after the segment.  Equal to the exact score when the
    dynamics are deterministic and ``gamma`` is the MDP discount.  Without a
    recorded successor, one is read off a deterministic last transition.
    """
    s_k = seg.next_state if next_state is None else next_state
    if s_k is None:
        row = mdp.transition[seg.pairs[-1]]
        if row.max() != 1.0:
            raise ParameterError("telescoped scoring needs the segment's successor state")
        s_k = int(np.argmax(row))
    s, a = np.asarray(seg.pairs).T
    k = len(seg)
    rewards = discount_weights(k, gamma) @ mdp.reward[s, a]
    return float(gamma ** k * sol.v_star[s_k] - sol.v_star[s[0]] + rewards)


def policy_return(mdp, policy, alpha=0.0):
    """Expected discounted return from ``initial_dist`` by a linear solve.

    With ``alpha > 0`` the entropy bonus ``-alpha * log pi`` is added to the
    reward, giving the MaxEnt objective value.
    """
    policy = check_policy(policy, (mdp.num_states, mdp.num_actions))
    if not 0.0 <= mdp.discount < 1.0:
        raise ParameterError("policy evaluation needs discount < 1")
    r_pi = np.sum(policy * mdp.reward, axis=1)
    if alpha:
        with np.errstate(divide="ignore", invalid="ignore"):
            plogp = np.where(policy > 0, policy * np.log(policy), 0.0)
        r_pi = r_pi - alpha * plogp.sum(axis=1)
    p_pi = np.einsum("sa,sat->st", policy, mdp.transition)
    v = np.linalg.solve(np.eye(mdp.num_states) - mdp.discount * p_pi, r_pi)
    return float(mdp.initial_dist @ v)
