"""Tabular MDPs, benchmark instances and rollouts."""
import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ParameterError
from .rng import categorical, make_rng
from .validation import check_policy

REWARD_BOUND = 1e6

# up, down, left, right as (dx, dy)
GRID_MOVES = ((0, -1), (0, 1), (-1, 0), (1, 0))


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Finite MDP with state-action rewards.

    ``transition[s, a, s']`` is the probability of moving to ``s'``.  Terminal
    states are absorbing self-loops with zero reward; ``terminal_mask`` only
    records which states those are.
    """

    transition: np.ndarray
    reward: np.ndarray
    discount: float
    initial_dist: np.ndarray
    terminal_mask: np.ndarray = None

    def __post_init__(self):
        trans = np.array(self.transition, dtype=float)
        reward = np.array(self.reward, dtype=float)
        init = np.array(self.initial_dist, dtype=float)
        if trans.ndim != 3 or trans.shape[0] != trans.shape[2]:
            raise ParameterError(f"transition must have shape [S][A][S], got {trans.shape}")
        if reward.shape != trans.shape[:2]:
            raise ParameterError(f"reward shape {reward.shape} does not match transition {trans.shape}")
        if init.shape != (trans.shape[0],):
            raise ParameterError(f"initial_dist shape {init.shape} does not match {trans.shape[0]} states")
        mask = (np.zeros(trans.shape[0], dtype=bool) if self.terminal_mask is None
                else np.array(self.terminal_mask, dtype=bool))
        if mask.shape != (trans.shape[0],):
            raise ParameterError("terminal_mask has the wrong length")
        for arr in (trans, reward, init, mask):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", trans)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "initial_dist", init)
        object.__setattr__(self, "terminal_mask", mask)
        object.__setattr__(self, "discount", float(self.discount))

    @property
    def num_states(self):
        return self.transition.shape[0]

    @property
    def num_actions(self):
        return self.transition.shape[1]

    def with_reward(self, reward):
        return TabularMDP(self.transition, reward, self.discount, self.initial_dist, self.terminal_mask)

    def to_dict(self):
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "discount": self.discount,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "initial_dist": self.initial_dist.tolist(),
            "terminal_mask": self.terminal_mask.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        mdp = cls(doc["transition"], doc["reward"], doc["discount"], doc["initial_dist"],
                  doc.get("terminal_mask"))
        if (mdp.num_states, mdp.num_actions) != (doc["num_states"], doc["num_actions"]):
            raise ParameterError("num_states/num_actions disagree with the arrays")
        return mdp


def save_mdp(mdp, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(mdp.to_dict(), fh, sort_keys=True)


def load_mdp(path):
    with open(path, encoding="utf-8") as fh:
        return TabularMDP.from_dict(json.load(fh))


@dataclass(frozen=True)
class Trajectory:
    states: tuple
    actions: tuple
    rewards: tuple

    def __post_init__(self):
        if len(self.states) != len(self.actions) + 1 or len(self.rewards) != len(self.actions):
            raise ParameterError("trajectory lengths are inconsistent")

    def __len__(self):
        return len(self.actions)


@dataclass(frozen=True)
class Segment:
    """Contiguous window of (state, action) pairs.

    ``next_state`` is the state reached after the last action when the
    segment was cut from a rollout; only the telescoped scorer needs it.
    Equality and ordering look at ``pairs`` alone.
    """

    pairs: tuple
    source_offset: int = field(default=0, compare=False)
    next_state: int = field(default=None, compare=False)

    def __post_init__(self):
        pairs = tuple((int(s), int(a)) for s, a in self.pairs)
        if not pairs:
            raise ParameterError("a segment needs at least one (state, action) pair")
        object.__setattr__(self, "pairs", pairs)

    def __len__(self):
        return len(self.pairs)

    @property
    def states(self):
        return [s for s, _ in self.pairs]

    @property
    def actions(self):
        return [a for _, a in self.pairs]

    def concat(self, other):
        return Segment(self.pairs + other.pairs, self.source_offset, other.next_state)


def build_gridworld(width, height, goal, step_reward=0.0, goal_reward=1.0, slip_prob=0.0, gamma=0.99):
    """Four-action gridworld with an absorbing goal cell.

    Cells are ``(x, y)`` with state index ``y * width + x``.  Actions are
    up/down/left/right; moving into a wall leaves the agent in place.  With
    probability ``slip_prob`` the chosen action is replaced by one drawn
    uniformly from all four.  Entering the goal pays ``goal_reward``; every
    other transition pays ``step_reward``; the goal itself pays nothing.
    The start distribution is uniform over non-goal cells.
    """
    if width < 2 or height < 2:
        raise ParameterError("gridworld needs width, height >= 2")
    if not 0.0 <= slip_prob < 1.0:
        raise ParameterError("slip_prob must lie in [0, 1)")
    if not 0.0 <= gamma < 1.0:
        raise ParameterError("gamma must lie in [0, 1)")
    gx, gy = goal
    if not (0 <= gx < width and 0 <= gy < height):
        raise ParameterError(f"goal {goal} is outside the {width}x{height} grid")

    n = width * height
    g = gy * width + gx
    moves = np.zeros((n, 4, n))
    for y in range(height):
        for x in range(width):
            s = y * width + x
            for a, (dx, dy) in enumerate(GRID_MOVES):
                nx, ny = x + dx, y + dy
                if not (0 <= nx < width and 0 <= ny < height):
                    nx, ny = x, y
                moves[s, a, ny * width + nx] = 1.0
    transition = (1.0 - slip_prob) * moves + slip_prob * moves.mean(axis=1, keepdims=True)
    transition[g] = 0.0
    transition[g, :, g] = 1.0

    p_goal = transition[:, :, g]
    reward = goal_reward * p_goal + step_reward * (1.0 - p_goal)
    reward[g] = 0.0

    init = np.ones(n)
    init[g] = 0.0
    init /= init.sum()
    mask = np.zeros(n, dtype=bool)
    mask[g] = True
    return TabularMDP(transition, reward, gamma, init, mask)


def grid_state(width, cell):
    x, y = cell
    return y * width + x


def build_single_state_bandit(action_rewards, gamma=0.0):
    rewards = np.asarray(action_rewards, dtype=float).ravel()
    if rewards.size < 2:
        raise ParameterError("a bandit needs at least 2 actions")
    if not 0.0 <= gamma < 1.0:
        raise ParameterError("gamma must lie in [0, 1)")
    k = rewards.size
    return TabularMDP(np.ones((1, k, 1)), rewards[None, :], gamma, np.ones(1))


def build_random_mdp(num_states, num_actions, gamma=0.9, seed=0, reward_scale=1.0):
    """Random MDP with Dirichlet transitions and Gaussian rewards."""
    if num_states < 1 or num_actions < 1:
        raise ParameterError("need at least one state and one action")
    rng = make_rng(seed)
    # flat Dirichlet rows: normalized exponential draws
    draws = -np.log1p(-rng.random((num_states, num_actions, num_states)))
    transition = draws / draws.sum(axis=2, keepdims=True)
    u1, u2 = rng.random((2, num_states, num_actions))
    reward = reward_scale * np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
    init = np.full(num_states, 1.0 / num_states)
    return TabularMDP(transition, reward, gamma, init)


def validate(mdp):
    """List every violated invariant of ``mdp``; empty when the MDP is valid."""
    problems = []
    trans = mdp.transition
    if np.any(trans < 0):
        for s, a, sp in zip(*np.nonzero(trans < 0)):
            problems.append(f"negative transition probability at (s={s}, a={a}, s'={sp})")
    sums = trans.sum(axis=2)
    for s, a in zip(*np.nonzero(np.abs(sums - 1.0) > 1e-9)):
        problems.append(f"transition row (s={s}, a={a}) sums to {sums[s, a]:.12g}")
    init = mdp.initial_dist
    if np.any(init < 0):
        problems.append(f"initial_dist has negative entries at {np.flatnonzero(init < 0).tolist()}")
    if abs(init.sum() - 1.0) > 1e-9:
        problems.append(f"initial_dist sums to {init.sum():.12g}")
    if not np.all(np.isfinite(mdp.reward)):
        problems.append("reward table has non-finite entries")
    elif np.any(np.abs(mdp.reward) > REWARD_BOUND):
        problems.append(f"reward magnitude exceeds {REWARD_BOUND:g}")
    if not 0.0 <= mdp.discount < 1.0:
        problems.append(f"discount {mdp.discount} outside [0, 1)")
    return problems


def sample_rollout(mdp, policy, horizon, rng_seed):
    """Sample one trajectory of ``horizon`` steps; deterministic given the seed."""
    policy = check_policy(policy, (mdp.num_states, mdp.num_actions))
    if horizon < 1:
        raise ParameterError("horizon must be >= 1")
    rng = make_rng(rng_seed)
    s = categorical(rng, mdp.initial_dist)
    states, actions, rewards = [s], [], []
    for _ in range(horizon):
        a = categorical(rng, policy[s])
        actions.append(a)
        rewards.append(float(mdp.reward[s, a]))
        s = categorical(rng, mdp.transition[s, a])
        states.append(s)
    return Trajectory(tuple(states), tuple(actions), tuple(rewards))


def discount_weights(k, gamma):
    return float(gamma) ** np.arange(k)


def partial_return(segment, mdp, gamma):
    """Discounted reward sum of a segment, first step weighted by 1."""
    s = np.fromiter((p[0] for p in segment.pairs), dtype=int)
    a = np.fromiter((p[1] for p in segment.pairs), dtype=int)
    return float(discount_weights(len(segment), gamma) @ mdp.reward[s, a])


def trajectory_return(trajectory, gamma):
    return float(discount_weights(len(trajectory), gamma) @ np.asarray(trajectory.rewards))


def segments_from_trajectory(trajectory):
    """The (state, action) pairs of a whole trajectory as one segment."""
    return Segment(tuple(zip(trajectory.states[:-1], trajectory.actions)), 0, trajectory.states[-1])


def state_occupancy(mdp, policy, horizon):
    """Time-averaged state distribution over ``horizon`` steps, by exact propagation."""
    policy = check_policy(policy, (mdp.num_states, mdp.num_actions))
    p_pi = np.einsum("sa,sat->st", policy, mdp.transition)
    d = mdp.initial_dist.copy()
    total = np.zeros_like(d)
    for _ in range(horizon):
        total += d
        d = d @ p_pi
    return total / horizon
