import itertools
import math

import numpy as np
import pytest
from scipy import stats

from cpl_lab.exceptions import ParameterError, SizeError
from cpl_lab.mdp import Segment, Trajectory, build_gridworld, build_single_state_bandit, grid_state
from cpl_lab.oracle import soft_value_iteration
from cpl_lab.preferences import (LabelMode, PreferenceDataset, PreferencePair, build_dense_dataset,
                                 build_matched_dataset, build_rankings, build_sparse_dataset,
                                 dumps_dataset, exhaustive_segments, label_pair, load_dataset,
                                 loads_dataset, make_scorer, preference_probability, sample_plackett_luce,
                                 sample_segments, save_dataset, score_segment)
from cpl_lab.rng import make_rng


def _trajectory(length, start=0):
    states = tuple(range(start, start + length + 1))
    return Trajectory(states, tuple([0] * length), tuple([0.0] * length))


def test_full_length_window_is_whole_trajectory():
    traj = _trajectory(5)
    (seg,) = sample_segments([traj], 5, 1, 0)
    assert seg.pairs == tuple(zip(traj.states[:-1], traj.actions))
    assert seg.next_state == traj.states[-1]


def test_zero_count_gives_no_segments():
    assert sample_segments([_trajectory(3)], 2, 0, 0) == []


def test_segment_errors():
    with pytest.raises(ParameterError):
        sample_segments([_trajectory(3)], 4, 1, 0)
    with pytest.raises(ParameterError):
        sample_segments([], 1, 1, 0)


def test_segments_reproducible_and_contiguous():
    rolls = [_trajectory(8, 100 * i) for i in range(3)]
    a = sample_segments(rolls, 3, 20, 5)
    assert a == sample_segments(rolls, 3, 20, 5)
    for seg in a:
        assert np.all(np.diff(seg.states) == 1)
        assert seg.states[0] % 100 == seg.source_offset


def test_segment_draws_uniform_over_trajectories():
    rolls = [_trajectory(10, 100 * i) for i in range(10)]
    segs = sample_segments(rolls, 4, 10_000, 17)
    counts = np.bincount([s.states[0] // 100 for s in segs], minlength=10)
    sigma = math.sqrt(10_000 * 0.1 * 0.9)
    assert np.all(np.abs(counts - 1000) < 3 * sigma)


@pytest.fixture(scope="module")
def grid():
    mdp = build_gridworld(3, 3, (2, 2), 0.0, 1.0, 0.0, 0.9)
    return mdp, soft_value_iteration(mdp, alpha=0.1)


def test_regret_score_of_segment_with_itself(grid):
    mdp, sol = grid
    seg = Segment(((0, 3), (1, 1)))
    assert score_segment("regret", seg, sol, mdp) == score_segment("regret", Segment(seg.pairs), sol, mdp)


def test_sparse_goal_counterexample(grid):
    mdp, sol = grid
    toward = Segment(((grid_state(3, (0, 0)), 3), (grid_state(3, (1, 0)), 1)))
    away = Segment(((grid_state(3, (0, 0)), 2), (grid_state(3, (0, 0)), 0)))
    pr = [score_segment("partial_return", s, sol, mdp) for s in (toward, away)]
    rg = [score_segment("regret", s, sol, mdp) for s in (toward, away)]
    assert pr[0] == pr[1] == 0.0
    assert rg[0] - rg[1] > 0.01


def test_regret_additivity_under_concatenation(grid):
    mdp, sol = grid
    a, b = Segment(((0, 3), (1, 3))), Segment(((2, 1),))
    total = score_segment("regret", a.concat(b), sol, mdp, 0.9)
    parts = score_segment("regret", a, sol, mdp, 0.9) + 0.9 ** 2 * score_segment("regret", b, sol, mdp, 0.9)
    assert total == pytest.approx(parts, abs=1e-12)


def test_regret_needs_oracle(grid):
    mdp, _ = grid
    with pytest.raises(ParameterError):
        score_segment("regret", Segment(((0, 0),)), None, mdp)
    with pytest.raises(ParameterError):
        make_scorer("regret")


def test_telescoped_scorer_on_deterministic_grid(grid):
    mdp, sol = grid
    seg = Segment(((0, 3), (1, 1)))
    exact = score_segment("regret", seg, sol, mdp, estimator="exact")
    assert score_segment("regret", seg, sol, mdp, estimator="telescoped") == pytest.approx(exact, abs=1e-8)


def test_preference_probability_examples():
    assert preference_probability(1.3, 1.3) == 0.5
    assert preference_probability(20.0, 0.0) >= 1 - 1e-8
    assert preference_probability(0.3 + 7.0, -1.1 + 7.0) == pytest.approx(preference_probability(0.3, -1.1),
                                                                          abs=1e-12)


def test_label_pair_modes():
    a, b = Segment(((1, 0),)), Segment(((0, 1),))
    rng = make_rng(0)
    for _ in range(20):
        assert label_pair(a, b, 1.0, "sampled", rng).seg_plus == a
    tie = label_pair(a, b, 0.5, "argmax", rng)
    assert tie.seg_plus == b and tie.label_prob == 0.5
    assert label_pair(b, a, 0.5, "argmax", rng).seg_plus == b
    soft = label_pair(a, b, 0.2, "soft", rng)
    assert (soft.seg_plus, soft.label_prob) == (a, 0.2)
    flipped = label_pair(a, b, 0.2, "argmax", rng)
    assert flipped.seg_plus == b and flipped.label_prob == pytest.approx(0.8)
    with pytest.raises(ParameterError):
        label_pair(a, b, 1.5, "soft", rng)


def test_sampled_label_rate():
    a, b = Segment(((1, 0),)), Segment(((0, 1),))
    rng = make_rng(3)
    wins = sum(label_pair(a, b, 0.7, "sampled", rng).seg_plus == a for _ in range(10_000))
    assert abs(wins / 10_000 - 0.7) < 0.015


def _bandit_scorer(rewards, alpha=0.5):
    mdp = build_single_state_bandit(rewards)
    sol = soft_value_iteration(mdp, alpha=alpha)
    return mdp, sol, make_scorer("regret", sol, mdp)


def test_dense_counts_and_identical_segments():
    _, _, scorer = _bandit_scorer([1.0, 0.0, -1.0])
    segs = [Segment(((0, a),)) for a in range(3)]
    data = build_dense_dataset(segs, scorer, "sampled", 0)
    assert len(data.pairs) == 3
    twin = build_dense_dataset([segs[1], segs[1]], scorer, "soft", 0)
    assert twin.pairs[0].label_prob == 0.5
    assert data.metadata["density"] == "dense" and data.metadata["preference_model"] == "regret"


def test_dense_argmax_orientation_is_a_total_order():
    rewards = np.linspace(-1, 1, 50)
    mdp, sol, scorer = _bandit_scorer(rewards)
    segs = [Segment(((0, a),)) for a in range(50)]
    data = build_dense_dataset(segs, scorer, "argmax", 0)
    assert len(data.pairs) == 50 * 49 // 2
    wins = np.zeros(50, dtype=int)
    for p in data.pairs:
        assert scorer(p.seg_plus) > scorer(p.seg_minus)
        wins[p.seg_plus.pairs[0][1]] += 1
    # a total order: win counts are a permutation of 0..n-1 sorted like the scores
    np.testing.assert_array_equal(wins, np.arange(50))


def test_dense_cap():
    _, _, scorer = _bandit_scorer([0.0, 1.0])
    segs = [Segment(((0, 0),))] * 5
    with pytest.raises(SizeError):
        build_dense_dataset(segs, scorer, "sampled", 0, cap=4)
    with pytest.raises(ParameterError):
        build_dense_dataset(segs[:1], scorer, "sampled", 0)


def test_sparse_matching():
    rewards = np.linspace(0, 1, 100)
    _, _, scorer = _bandit_scorer(rewards)
    segs = [Segment(((0, a),)) for a in range(100)]
    data = build_sparse_dataset(segs, scorer, "sampled", 9)
    assert len(data.pairs) == 50
    used = sorted(s.pairs[0][1] for p in data.pairs for s in (p.seg_plus, p.seg_minus))
    assert used == list(range(100))
    assert dumps_dataset(data) == dumps_dataset(build_sparse_dataset(segs, scorer, "sampled", 9))
    assert len(build_sparse_dataset(segs[:2], scorer, "sampled", 0).pairs) == 1
    with pytest.raises(ParameterError):
        build_sparse_dataset(segs[:3], scorer, "sampled", 0)


def test_repeated_matchings_scale_pair_count():
    _, _, scorer = _bandit_scorer([0.0, 1.0, 2.0, 3.0])
    segs = [Segment(((0, a),)) for a in range(4)]
    counts = [len(build_matched_dataset(segs, scorer, "sampled", 0, c).pairs) for c in (1, 2, 3)]
    assert counts == [2, 4, 6]


def test_mixed_lengths_rejected():
    _, _, scorer = _bandit_scorer([0.0, 1.0])
    with pytest.raises(ParameterError):
        build_dense_dataset([Segment(((0, 0),)), Segment(((0, 0), (0, 1)))], scorer, "sampled", 0)


def test_two_way_ranking_matches_pair_model():
    rng = make_rng(11)
    p = preference_probability(0.8, 0.0)
    first = sum(sample_plackett_luce([0.8, 0.0], rng)[0] == 0 for _ in range(20_000))
    assert abs(first / 20_000 - p) < 4 * math.sqrt(p * (1 - p) / 20_000)


def test_equal_scores_rank_uniformly():
    rng = make_rng(2)
    counts = {perm: 0 for perm in itertools.permutations(range(3))}
    for _ in range(10_000):
        counts[tuple(sample_plackett_luce([0.3, 0.3, 0.3], rng))] += 1
    assert stats.chisquare(list(counts.values())).pvalue > 1e-3


def test_argmax_rankings_sort_by_score():
    rewards = [0.3, -0.2, 1.0, 0.5, 0.0, 0.9]
    _, _, scorer = _bandit_scorer(rewards)
    segs = [Segment(((0, a),)) for a in range(6)]
    data = build_rankings(segs, scorer, 3, "argmax", 0)
    assert [[s.pairs[0][1] for s in g.segments] for g in data.rankings] == [[2, 0, 1], [5, 3, 4]]
    with pytest.raises(ParameterError):
        build_rankings(segs, scorer, 4, "argmax", 0)
    with pytest.raises(ParameterError):
        build_rankings(segs, scorer, 3, "soft", 0)
    with pytest.raises(ParameterError):
        build_rankings(segs, scorer, 1, "argmax", 0)


def test_exhaustive_segments():
    segs = exhaustive_segments(2, 3)
    assert [s.pairs for s in segs] == [((s, a),) for s in range(2) for a in range(3)]


def test_serialization_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    pairs = [PreferencePair(Segment(((0, 1), (2, 0))), Segment(((1, 1), (0, 0))), float(p), "soft")
             for p in rng.random(5)]
    data = PreferenceDataset(pairs, [], {"density": "dense", "label_mode": "soft", "seed": 3})
    path = tmp_path / "d.jsonl"
    save_dataset(data, path)
    back = load_dataset(path)
    assert [p.label_prob for p in back.pairs] == [p.label_prob for p in pairs]
    assert back.pairs == data.pairs and back.metadata == data.metadata
    assert dumps_dataset(back) == path.read_text()
    _, _, scorer = _bandit_scorer([0.0, 1.0, 2.0])
    ranked = build_rankings([Segment(((0, a),)) for a in range(3)], scorer, 3, "sampled", 1)
    again = loads_dataset(dumps_dataset(ranked))
    assert again.rankings == ranked.rankings and again.is_ranking


def test_dataset_helpers():
    pair = PreferencePair(Segment(((0, 1),)), Segment(((2, 0),)), 1.0, LabelMode.SAMPLED)
    data = PreferenceDataset([pair], [], {})
    assert data.shape() == (3, 2)
    assert sorted(data.state_actions()) == [(0, 1), (2, 0)]
    with pytest.raises(ParameterError):
        PreferencePair(Segment(((0, 1),)), Segment(((2, 0),)), -0.1, "soft")
