"""Segment sampling, preference scoring/labeling and dataset files."""
import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import expit

from .exceptions import ParameterError, SizeError
from .mdp import Segment, partial_return
from .oracle import segment_advantage_exact, segment_advantage_telescoped
from .rng import categorical, make_rng, permutation, uniform_index

DENSE_CAP = 2000


class LabelMode(str, Enum):
    SAMPLED = "sampled"
    ARGMAX = "argmax"
    SOFT = "soft"


class PreferenceModel(str, Enum):
    REGRET = "regret"
    PARTIAL_RETURN = "partial_return"


@dataclass(frozen=True)
class PreferencePair:
    """``seg_plus`` preferred over ``seg_minus``.

    ``label_prob`` is the generating model's probability of that orientation.
    In soft mode the orientation is fixed and ``label_prob`` is the target.
    """

    seg_plus: Segment
    seg_minus: Segment
    label_prob: float
    label_mode: LabelMode = LabelMode.SAMPLED

    def __post_init__(self):
        if not 0.0 <= self.label_prob <= 1.0:
            raise ParameterError(f"label_prob {self.label_prob} outside [0, 1]")
        object.__setattr__(self, "label_mode", LabelMode(self.label_mode))


@dataclass(frozen=True)
class RankingGroup:
    """Segments ordered best-first."""

    segments: tuple

    def __post_init__(self):
        segs = tuple(self.segments)
        if len(segs) < 2:
            raise ParameterError("a ranking needs at least 2 segments")
        object.__setattr__(self, "segments", segs)

    def __len__(self):
        return len(self.segments)


@dataclass
class PreferenceDataset:
    pairs: list = field(default_factory=list)
    rankings: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.pairs) if self.pairs else len(self.rankings)

    @property
    def is_ranking(self):
        return bool(self.rankings) and not self.pairs

    def segments(self):
        if self.is_ranking:
            return [seg for g in self.rankings for seg in g.segments]
        return [seg for p in self.pairs for seg in (p.seg_plus, p.seg_minus)]

    def state_actions(self):
        """Every (state, action) occurrence in the dataset, in file order."""
        return [sa for seg in self.segments() for sa in seg.pairs]

    def shape(self):
        """(num_states, num_actions) from metadata, else the smallest that fits."""
        if "num_states" in self.metadata and "num_actions" in self.metadata:
            return int(self.metadata["num_states"]), int(self.metadata["num_actions"])
        sa = np.asarray(self.state_actions())
        return int(sa[:, 0].max()) + 1, int(sa[:, 1].max()) + 1

    def subset(self, indices):
        return PreferenceDataset([self.pairs[i] for i in indices], [], dict(self.metadata))


def sample_segments(rollouts, k, count, rng_seed):
    """Draw ``count`` windows of length ``k`` uniformly over (trajectory, offset)."""
    if k < 1:
        raise ParameterError("segment length must be >= 1")
    if count < 0:
        raise ParameterError("count must be non-negative")
    if not rollouts:
        raise ParameterError("no rollouts to sample from")
    if min(len(t) for t in rollouts) < k:
        raise ParameterError(f"segment length {k} exceeds the shortest trajectory")
    rng = make_rng(rng_seed)
    windows = np.array([len(t) - k + 1 for t in rollouts])
    cum = np.cumsum(windows)
    total = int(cum[-1])
    out = []
    for _ in range(count):
        j = uniform_index(rng, total)
        ti = int(np.searchsorted(cum, j, side="right"))
        off = j - (int(cum[ti - 1]) if ti else 0)
        traj = rollouts[ti]
        pairs = tuple(zip(traj.states[off:off + k], traj.actions[off:off + k]))
        out.append(Segment(pairs, off, traj.states[off + k]))
    return out


def exhaustive_segments(num_states, num_actions):
    """Every length-1 segment ``((s, a),)``, state-major."""
    return [Segment(((s, a),)) for s in range(num_states) for a in range(num_actions)]


def score_segment(model, seg, oracle=None, mdp=None, gamma=None, estimator="exact"):
    model = PreferenceModel(model)
    if model is PreferenceModel.REGRET:
        if oracle is None:
            raise ParameterError("the regret model needs an oracle solution")
        if gamma is None:
            gamma = mdp.discount if mdp is not None else 1.0
        if estimator == "exact":
            return segment_advantage_exact(oracle, seg, gamma)
        if estimator == "telescoped":
            if mdp is None:
                raise ParameterError("telescoped scoring needs the MDP")
            return segment_advantage_telescoped(oracle, mdp, seg, gamma)
        raise ParameterError(f"unknown estimator {estimator!r}")
    if mdp is None:
        raise ParameterError("the partial-return model needs the MDP")
    return partial_return(seg, mdp, mdp.discount if gamma is None else gamma)


def make_scorer(model, oracle=None, mdp=None, gamma=None, estimator="exact"):
    """Bind :func:`score_segment` to fixed model arguments."""
    model = PreferenceModel(model)
    if model is PreferenceModel.REGRET and oracle is None:
        raise ParameterError("the regret model needs an oracle solution")

    def scorer(seg):
        return score_segment(model, seg, oracle, mdp, gamma, estimator)

    scorer.model = model
    return scorer


def preference_probability(score_plus, score_minus):
    """Boltzmann probability that the first segment is preferred."""
    return float(expit(score_plus - score_minus))


def label_pair(seg_a, seg_b, prob_a_over_b, mode, rng):
    """Turn an oracle probability into a labeled pair.

    ``sampled`` draws the orientation, ``argmax`` takes the likelier side
    (exact ties go to the lexicographically smaller segment), ``soft`` keeps
    ``seg_a`` first and stores the probability.
    """
    p = float(prob_a_over_b)
    if not 0.0 <= p <= 1.0:
        raise ParameterError(f"probability {p} outside [0, 1]")
    mode = LabelMode(mode)
    if mode is LabelMode.SOFT:
        return PreferencePair(seg_a, seg_b, p, mode)
    if mode is LabelMode.SAMPLED:
        a_wins = rng.random() < p
    elif p != 0.5:
        a_wins = p > 0.5
    else:
        a_wins = seg_a.pairs <= seg_b.pairs
    if a_wins:
        return PreferencePair(seg_a, seg_b, p, mode)
    return PreferencePair(seg_b, seg_a, 1.0 - p, mode)


def _metadata(scorer, mode, segments, density, seed, extra=None):
    meta = {"density": density, "label_mode": LabelMode(mode).value,
            "segment_length": len(segments[0]) if segments else 0, "seed": seed}
    model = getattr(scorer, "model", None)
    if model is not None:
        meta["preference_model"] = PreferenceModel(model).value
    if extra:
        meta.update(extra)
    return meta


def _check_homogeneous(segments):
    if len({len(s) for s in segments}) > 1:
        raise ParameterError("segments must share one length")


def build_dense_dataset(segments, scorer, mode, rng, cap=DENSE_CAP, metadata=None):
    """Label all n(n-1)/2 unordered pairs, in (i, j) index order with i < j."""
    n = len(segments)
    if n < 2:
        raise ParameterError("need at least 2 segments")
    if n > cap:
        raise SizeError(f"{n} segments exceed the dense-labeling cap of {cap}")
    _check_homogeneous(segments)
    rng = make_rng(rng)
    scores = [scorer(s) for s in segments]
    pairs = [label_pair(segments[i], segments[j], preference_probability(scores[i], scores[j]), mode, rng)
             for i in range(n) for j in range(i + 1, n)]
    return PreferenceDataset(pairs, [], _metadata(scorer, mode, segments, "dense", None, metadata))


def build_matched_dataset(segments, scorer, mode, rng, comparisons_per_segment=1, metadata=None):
    """Label ``comparisons_per_segment`` random perfect matchings of the segments."""
    n = len(segments)
    if n % 2:
        raise ParameterError("sparse labeling needs an even number of segments")
    if comparisons_per_segment < 1:
        raise ParameterError("comparisons_per_segment must be >= 1")
    _check_homogeneous(segments)
    rng = make_rng(rng)
    scores = [scorer(s) for s in segments]
    pairs = []
    for _ in range(comparisons_per_segment):
        perm = permutation(rng, n)
        for i in range(0, n, 2):
            a, b = perm[i], perm[i + 1]
            pairs.append(label_pair(segments[a], segments[b], preference_probability(scores[a], scores[b]),
                                    mode, rng))
    extra = {"comparisons_per_segment": comparisons_per_segment}
    if metadata:
        extra.update(metadata)
    return PreferenceDataset(pairs, [], _metadata(scorer, mode, segments, "sparse", None, extra))


def build_sparse_dataset(segments, scorer, mode, rng, metadata=None):
    """One labeled comparison per matched couple of segments."""
    return build_matched_dataset(segments, scorer, mode, rng, 1, metadata)


def sample_plackett_luce(scores, rng):
    """Sequential sampling without replacement with weights ``exp(score)``."""
    remaining = list(range(len(scores)))
    order = []
    while remaining:
        sub = np.array([scores[i] for i in remaining])
        w = np.exp(sub - sub.max())
        order.append(remaining.pop(categorical(rng, w / w.sum())))
    return order


def _sorted_order(segments, scores):
    return sorted(range(len(segments)), key=lambda i: (-scores[i], segments[i].pairs))


def build_rankings(segments, scorer, K, mode, rng, metadata=None):
    """Split segments into consecutive groups of ``K`` and rank each group."""
    if K < 2:
        raise ParameterError("ranking size K must be >= 2")
    if len(segments) % K:
        raise ParameterError(f"{len(segments)} segments are not divisible into groups of {K}")
    _check_homogeneous(segments)
    mode = LabelMode(mode)
    if mode is LabelMode.SOFT:
        raise ParameterError("rankings support sampled or argmax labels only")
    rng = make_rng(rng)
    groups = []
    for start in range(0, len(segments), K):
        segs = segments[start:start + K]
        scores = [scorer(s) for s in segs]
        order = sample_plackett_luce(scores, rng) if mode is LabelMode.SAMPLED else _sorted_order(segs, scores)
        groups.append(RankingGroup(tuple(segs[i] for i in order)))
    extra = {"ranking_size": K}
    if metadata:
        extra.update(metadata)
    return PreferenceDataset([], groups, _metadata(scorer, mode, segments, "ranking", None, extra))


def _seg_json(seg):
    return [list(p) for p in seg.pairs]


def _seg_from_json(rows):
    return Segment(tuple(tuple(r) for r in rows))


def dumps_dataset(dataset):
    """JSON Lines text: a metadata header, then one object per pair or ranking."""
    lines = [json.dumps({"metadata": dataset.metadata}, sort_keys=True)]
    for p in dataset.pairs:
        lines.append(json.dumps({"label_prob": p.label_prob, "minus": _seg_json(p.seg_minus),
                                 "plus": _seg_json(p.seg_plus)}, sort_keys=True))
    for g in dataset.rankings:
        lines.append(json.dumps({"ranked": [_seg_json(s) for s in g.segments]}, sort_keys=True))
    return "\n".join(lines) + "\n"


def loads_dataset(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ParameterError("empty dataset file")
    header = json.loads(lines[0])
    if "metadata" not in header:
        raise ParameterError("dataset file lacks a metadata header")
    meta = header["metadata"]
    mode = meta.get("label_mode", LabelMode.SAMPLED.value)
    pairs, groups = [], []
    for ln in lines[1:]:
        obj = json.loads(ln)
        if "ranked" in obj:
            groups.append(RankingGroup(tuple(_seg_from_json(s) for s in obj["ranked"])))
        else:
            pairs.append(PreferencePair(_seg_from_json(obj["plus"]), _seg_from_json(obj["minus"]),
                                        obj["label_prob"], mode))
    return PreferenceDataset(pairs, groups, meta)


def save_dataset(dataset, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_dataset(dataset))


def load_dataset(path):
    with open(path, encoding="utf-8") as fh:
        return loads_dataset(fh.read())
