import json

import numpy as np
import pytest

from cpl_lab.mdp import Segment, build_random_mdp
from cpl_lab.oracle import soft_value_iteration
from cpl_lab.preferences import (PreferenceDataset, PreferencePair, RankingGroup, build_dense_dataset,
                                 exhaustive_segments, make_scorer)


def random_segment(rng, num_states, num_actions, k):
    return Segment(tuple((int(rng.integers(num_states)), int(rng.integers(num_actions))) for _ in range(k)))


def random_pair_dataset(rng, num_states, num_actions, n_pairs, k, soft=False):
    pairs = []
    for _ in range(n_pairs):
        a = random_segment(rng, num_states, num_actions, k)
        b = random_segment(rng, num_states, num_actions, k)
        p = float(rng.random()) if soft else 1.0
        pairs.append(PreferencePair(a, b, p, "soft" if soft else "sampled"))
    return PreferenceDataset(pairs, [], {"num_states": num_states, "num_actions": num_actions})


def random_ranking_dataset(rng, num_states, num_actions, n_groups, K, k):
    groups = [RankingGroup(tuple(random_segment(rng, num_states, num_actions, k) for _ in range(K)))
              for _ in range(n_groups)]
    return PreferenceDataset([], groups, {"num_states": num_states, "num_actions": num_actions})


def random_log_policy(rng, num_states, num_actions, scale=1.0):
    logits = scale * rng.standard_normal((num_states, num_actions))
    return logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_random_instance():
    mdp = build_random_mdp(5, 3, gamma=0.9, seed=11)
    return mdp, soft_value_iteration(mdp, alpha=0.1)


def recovery_instance(seed, num_states=5, num_actions=3, gamma=0.9, alpha=0.1):
    """Random MDP, its oracle and the soft dense dataset over every length-1 segment."""
    mdp = build_random_mdp(num_states, num_actions, gamma=gamma, seed=seed)
    sol = soft_value_iteration(mdp, alpha=alpha)
    segs = exhaustive_segments(num_states, num_actions)
    data = build_dense_dataset(segs, make_scorer("regret", sol, mdp), "soft", 0,
                               metadata={"num_states": num_states, "num_actions": num_actions})
    return mdp, sol, data


BANDIT_CONFIG = {
    "env.kind": "bandit",
    "env.action_rewards": [1.0, 0.5, 0.0],
    "env.gamma": 0.0,
    "oracle.alpha": 0.5,
    "data.seed": 7,
    "data.segment_source": "exhaustive",
    "data.label_mode": "soft",
    "method.variant": "vanilla",
    "method.alpha": 0.5,
    "method.label_mode": "soft",
    "optim.steps": 3000,
}

GRID_CONFIG = {
    "env.kind": "gridworld",
    "env.width": 3,
    "env.height": 3,
    "env.goal_x": 2,
    "env.goal_y": 2,
    "data.seed": 1,
    "data.num_rollouts": 6,
    "data.horizon": 10,
    "data.num_segments": 12,
    "data.segment_length": 2,
    "data.density": "sparse",
    "optim.steps": 200,
}


def write_config(path, entries):
    path.write_text("".join(f"{k} = {json.dumps(v)}\n" for k, v in entries.items()))
    return path


ACCEPTANCE = {}


def report(number, title, ok, detail):
    """Record one acceptance line; the terminal summary prints them in order."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
