"""Contrastive preference losses with analytic gradients.

Every loss scores a segment by ``alpha * sum_t gamma**t log pi(a_t | s_t)``
and differentiates through the row log-softmax, so ``LossOutput.grad`` is the
gradient with respect to the policy logits.  Losses are averaged over
comparisons unless ``LossConfig.reduction == "sum"``.
"""
import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .exceptions import ContractError, ParameterError, SizeError
from .preferences import PreferenceDataset, RankingGroup
from .validation import check_log_policy

HESSIAN_MAX_DIM = 200


class Variant(str, Enum):
    VANILLA = "vanilla"
    BIASED = "biased"
    BC_REG = "bc_reg"
    KL_BIASED = "kl_biased"
    RANKING = "ranking"
    DENSE_BATCH = "dense_batch"


@dataclass
class LossConfig:
    variant: Variant = Variant.BIASED
    alpha: float = 0.1
    lam: float = 0.5
    beta: float = 0.0
    gamma_train: float = 1.0
    reference_log_policy: np.ndarray = None
    label_mode: str = "hard"
    reduction: str = "mean"

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if self.alpha <= 0:
            raise ParameterError("alpha must be positive")
        if not 0.0 < self.gamma_train <= 1.0:
            raise ParameterError("gamma_train must lie in (0, 1]")
        if self.label_mode not in ("hard", "soft"):
            raise ParameterError(f"label_mode must be 'hard' or 'soft', got {self.label_mode!r}")
        if self.reduction not in ("mean", "sum"):
            raise ParameterError(f"reduction must be 'mean' or 'sum', got {self.reduction!r}")
        if self.beta < 0:
            raise ParameterError("beta must be non-negative")
        if self.variant is Variant.BC_REG and self.beta <= 0:
            raise ParameterError("the bc_reg variant needs beta > 0")
        if self.variant is Variant.KL_BIASED and self.reference_log_policy is None:
            raise ParameterError("the kl_biased variant needs reference_log_policy")

    def replace(self, **changes):
        fields = dict(self.__dict__)
        fields.update(changes)
        return LossConfig(**fields)


@dataclass
class LossOutput:
    loss: float
    grad: np.ndarray
    accuracy: float


def _check_lambda(lam):
    if not 0.0 < lam <= 1.0:
        raise ParameterError(f"lambda must lie in (0, 1], got {lam}")
    return float(lam)


def log_softmax(logits):
    logits = np.asarray(logits, dtype=float)
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def logits_grad(log_policy, grad_log_policy):
    """Pull a gradient w.r.t. log-probabilities back to the logits."""
    pi = np.exp(log_policy)
    return grad_log_policy - pi * grad_log_policy.sum(axis=1, keepdims=True)


def segment_features(segments, shape, gamma):
    """Sparse rows with ``gamma**t`` accumulated at each visited flat (s, a)."""
    num_states, num_actions = shape
    rows, cols, vals = [], [], []
    for i, seg in enumerate(segments):
        for t, (s, a) in enumerate(seg.pairs):
            if not (0 <= s < num_states and 0 <= a < num_actions):
                raise ParameterError(f"segment entry {(s, a)} outside a {num_states}x{num_actions} table")
            rows.append(i)
            cols.append(s * num_actions + a)
            vals.append(gamma ** t)
    # duplicate (row, col) entries are summed on conversion
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(segments), num_states * num_actions))


def segment_log_prob_score(log_policy, seg, alpha, gamma):
    """``alpha * sum_t gamma**t log pi(a_t | s_t)`` for one segment."""
    log_policy = check_log_policy(log_policy)
    total = 0.0
    for t, (s, a) in enumerate(seg.pairs):
        total += gamma ** t * log_policy[s, a]
    return alpha * total


def _softplus(x):
    return np.logaddexp(0.0, x)


def _pair_terms(values, plus, minus, lam, targets, scale, reduction):
    """Loss and gradient of the (biased) logistic pair loss w.r.t. ``values``.

    ``values`` is a flat score table; segment score = ``scale * row @ values``.
    """
    s_plus = scale * (plus @ values)
    s_minus = scale * (minus @ values)
    z = s_plus - lam * s_minus
    if targets is None:
        losses = _softplus(-z)
        dz = expit(z) - 1.0
        correct = s_plus > s_minus
    else:
        losses = targets * _softplus(-z) + (1.0 - targets) * _softplus(z)
        dz = expit(z) - targets
        correct = (s_plus > s_minus) == (targets > 0.5)
    weight = 1.0 / len(z) if reduction == "mean" else 1.0
    dz = dz * weight
    grad = scale * (plus.T @ dz - lam * (minus.T @ dz))
    return weight * float(np.sum(losses)), grad, float(np.mean(correct))


def _ranking_terms(values, feats, group_size, scale, reduction):
    """Plackett-Luce negative log-likelihood for best-first groups."""
    scores = (scale * (feats @ values)).reshape(-1, group_size)
    # lse[:, k] = log sum_{j >= k} exp(scores[:, j])
    lse = np.logaddexp.accumulate(scores[:, ::-1], axis=1)[:, ::-1]
    losses = np.sum(lse - scores, axis=1)
    # d loss / d score_j = -1 + sum_{k <= j} exp(score_j - lse_k)
    cum = np.logaddexp.accumulate(-lse, axis=1)
    dscore = np.exp(scores + cum) - 1.0
    weight = 1.0 / scores.shape[0] if reduction == "mean" else 1.0
    grad = scale * (feats.T @ (weight * dscore).ravel())
    iu = np.triu_indices(group_size, 1)
    correct = scores[:, iu[0]] > scores[:, iu[1]]
    return weight * float(np.sum(losses)), grad, float(np.mean(correct))


def _as_rankings(data):
    if isinstance(data, PreferenceDataset):
        return data.rankings
    return list(data)


class PreferenceObjective:
    """A loss bound to one dataset, with precomputed comparison matrices.

    Call it with a log-policy table to get a :class:`LossOutput` whose
    gradient is taken with respect to the logits.
    """

    def __init__(self, data, config, shape=None, bc_data=None):
        self.config = config
        variant = config.variant
        self.lam = 1.0 if variant in (Variant.VANILLA, Variant.BC_REG) else _check_lambda(config.lam)
        if shape is None:
            if isinstance(data, PreferenceDataset):
                shape = data.shape()
            else:
                raise ParameterError("shape is required when data is not a PreferenceDataset")
        self.shape = tuple(shape)
        gamma = config.gamma_train

        if variant in (Variant.RANKING, Variant.DENSE_BATCH):
            groups = _as_rankings(data)
            if not groups:
                raise ParameterError(f"the {variant.value} variant needs ranking groups")
            sizes = {len(g) for g in groups}
            if len(sizes) != 1:
                raise ParameterError("all ranking groups must have the same size")
            self.group_size = sizes.pop()
            segs = [s for g in groups for s in g.segments]
            feats = segment_features(segs, self.shape, gamma)
            if variant is Variant.RANKING:
                self.feats = feats
            else:
                k = self.group_size
                i_idx, j_idx = np.triu_indices(k, 1)
                offsets = np.arange(len(groups))[:, None] * k
                self.plus = feats[(offsets + i_idx).ravel()]
                self.minus = feats[(offsets + j_idx).ravel()]
                self.targets = None
        else:
            pairs = data.pairs if isinstance(data, PreferenceDataset) else list(data)
            if not pairs:
                raise ParameterError("the preference dataset is empty")
            self.plus = segment_features([p.seg_plus for p in pairs], self.shape, gamma)
            self.minus = segment_features([p.seg_minus for p in pairs], self.shape, gamma)
            self.targets = (np.array([p.label_prob for p in pairs]) if config.label_mode == "soft" else None)

        self.bc_counts = None
        if variant is Variant.BC_REG or (config.beta > 0 and bc_data is not None):
            if not bc_data:
                raise ParameterError("BC regularization needs non-empty bc_data")
            counts = np.zeros(self.shape)
            for s, a in bc_data:
                counts[s, a] += 1.0
            self.bc_counts = counts / len(bc_data)

        self.reference = None
        if variant is Variant.KL_BIASED:
            self.reference = check_log_policy(config.reference_log_policy, self.shape)

    def raw(self, values, scale=None):
        """Preference loss on an arbitrary flat score table (no softmax chain).

        Returns ``(loss, grad_values, accuracy)``.
        """
        scale = self.config.alpha if scale is None else scale
        reduction = self.config.reduction
        if self.config.variant is Variant.RANKING:
            return _ranking_terms(values, self.feats, self.group_size, scale, reduction)
        return _pair_terms(values, self.plus, self.minus, self.lam, self.targets, scale, reduction)

    def __call__(self, log_policy):
        log_policy = check_log_policy(log_policy, self.shape)
        scored = log_policy if self.reference is None else log_policy - self.reference
        loss, grad_flat, acc = self.raw(scored.ravel())
        grad_lp = grad_flat.reshape(self.shape)
        if self.bc_counts is not None:
            beta = self.config.beta
            loss -= beta * float(np.sum(self.bc_counts * log_policy))
            grad_lp = grad_lp - beta * self.bc_counts
        return LossOutput(loss, logits_grad(log_policy, grad_lp), acc)


def _with_variant(config, variant, **changes):
    return config.replace(variant=variant, **changes)


def cpl_loss(log_policy, dataset, config):
    """Unbiased contrastive loss (lambda fixed to 1)."""
    lp = np.asarray(log_policy, dtype=float)
    return PreferenceObjective(dataset, _with_variant(config, Variant.VANILLA), lp.shape)(lp)


def cpl_lambda_loss(log_policy, dataset, config):
    """Loss with the negative segment's score scaled by ``config.lam``."""
    _check_lambda(config.lam)
    lp = np.asarray(log_policy, dtype=float)
    return PreferenceObjective(dataset, _with_variant(config, Variant.BIASED), lp.shape)(lp)


def cpl_bc_loss(log_policy, dataset, config, bc_data):
    """Unbiased loss minus ``beta`` times the mean BC log-likelihood."""
    if config.beta < 0:
        raise ParameterError("beta must be non-negative")
    lp = np.asarray(log_policy, dtype=float)
    if config.beta == 0:
        return cpl_loss(lp, dataset, config)
    return PreferenceObjective(dataset, _with_variant(config, Variant.BC_REG), lp.shape, bc_data)(lp)


def cpl_kl_loss(log_policy, dataset, config):
    """Biased loss on ``log(pi / mu)`` scores against ``config.reference_log_policy``."""
    if config.reference_log_policy is None:
        raise ParameterError("cpl_kl_loss needs reference_log_policy")
    lp = np.asarray(log_policy, dtype=float)
    return PreferenceObjective(dataset, _with_variant(config, Variant.KL_BIASED), lp.shape)(lp)


def cpl_ranking_loss(log_policy, rankings, config):
    """Plackett-Luce loss over best-first groups."""
    lp = np.asarray(log_policy, dtype=float)
    return PreferenceObjective(rankings, _with_variant(config, Variant.RANKING), lp.shape)(lp)


def dense_batch_loss(log_policy, segments, scores, config):
    """Biased pair loss over every ordered pair implied by ``scores``.

    The batch is sorted by descending score; exact ties go to the
    lexicographically smaller segment.
    """
    order = sorted(range(len(segments)), key=lambda i: (-scores[i], segments[i].pairs))
    group = RankingGroup(tuple(segments[i] for i in order))
    lp = np.asarray(log_policy, dtype=float)
    return PreferenceObjective([group], _with_variant(config, Variant.DENSE_BATCH), lp.shape)(lp)


def compute_loss(log_policy, data, config, bc_data=None):
    lp = np.asarray(log_policy, dtype=float)
    return PreferenceObjective(data, config, lp.shape, bc_data)(lp)


@dataclass
class ComparisonMatrix:
    """Signed comparison rows over the flattened (state, action) index.

    ``support`` marks the (s, a) entries that occur in any segment, which can
    differ from the nonzero columns when occurrences cancel.
    """

    matrix: sp.csr_matrix
    shape: tuple
    support: np.ndarray
    soft_labels: np.ndarray = None

    @property
    def num_rows(self):
        return self.matrix.shape[0]

    def dense(self):
        return self.matrix.toarray()

    def logits(self, log_policy, alpha):
        return alpha * (self.matrix @ np.asarray(log_policy, dtype=float).ravel())

    def loss(self, log_policy, alpha, reduction="sum"):
        """``-sum_i log sigmoid(alpha * x_i . log pi)`` (or its mean)."""
        z = self.logits(log_policy, alpha)
        if self.soft_labels is None:
            losses = _softplus(-z)
        else:
            p = self.soft_labels
            losses = p * _softplus(-z) + (1.0 - p) * _softplus(z)
        total = float(np.sum(losses))
        return total / len(z) if reduction == "mean" else total

    def hessian(self, log_policy, alpha):
        """Hessian of :meth:`loss` (sum) w.r.t. the flat log-policy."""
        z = self.logits(log_policy, alpha)
        sig = expit(z)
        x = self.dense()
        return alpha ** 2 * (x.T * (sig * (1.0 - sig))) @ x

    def to_triplets(self):
        coo = self.matrix.tocoo()
        doc = {"cols": coo.col.tolist(), "num_actions": self.shape[1], "num_rows": self.num_rows,
               "num_states": self.shape[0], "rows": coo.row.tolist(), "values": coo.data.tolist()}
        if self.soft_labels is not None:
            doc["soft_labels"] = self.soft_labels.tolist()
        return json.dumps(doc, sort_keys=True)


def comparison_matrix(dataset, gamma_train=1.0, shape=None, soft=False):
    shape = dataset.shape() if shape is None else tuple(shape)
    pairs = dataset.pairs
    plus = segment_features([p.seg_plus for p in pairs], shape, gamma_train)
    minus = segment_features([p.seg_minus for p in pairs], shape, gamma_train)
    x = (plus - minus).tocsr()
    support = np.zeros(shape[0] * shape[1], dtype=bool)
    support[plus.indices] = True
    support[minus.indices] = True
    labels = np.array([p.label_prob for p in pairs]) if soft else None
    return ComparisonMatrix(x, shape, support.reshape(shape), labels)


def hessian_psd_check(matrix, log_policy, alpha):
    """Smallest eigenvalue of the loss Hessian in log-policy coordinates."""
    dim = matrix.shape[0] * matrix.shape[1]
    if dim > HESSIAN_MAX_DIM:
        raise SizeError(f"S*A = {dim} exceeds {HESSIAN_MAX_DIM} for a dense Hessian")
    return float(np.linalg.eigvalsh(matrix.hessian(log_policy, alpha))[0])


@dataclass
class NullSpaceReport:
    loss_before: float
    loss_after: float
    row_sums: np.ndarray = field(repr=False)
    normalized: bool

    @property
    def loss_change(self):
        return abs(self.loss_after - self.loss_before)


def null_space_shift(matrix, log_policy, u, alpha, tol=1e-8):
    """Shift log-scores by a null-space vector and report what changes."""
    lp = np.asarray(log_policy, dtype=float)
    u = np.asarray(u, dtype=float).reshape(lp.shape)
    residual = float(np.linalg.norm(matrix.matrix @ u.ravel()))
    if residual > tol:
        raise ContractError(f"u is not in the null space of X (||Xu|| = {residual:.3e})")
    shifted = lp + u
    row_sums = np.exp(shifted).sum(axis=1)
    return NullSpaceReport(matrix.loss(lp, alpha), matrix.loss(shifted, alpha), row_sums,
                           bool(np.all(np.abs(row_sums - 1.0) <= tol)))


def ood_renormalizer(log_policy, u, ood_actions):
    """Null-space correction that restores row normalization after a shift ``u``.

    ``ood_actions`` maps each state to an action outside the data support.
    At that entry the correction is ``log(1 - sum_{a != ood} pi e^u) - log pi(ood) - u(ood)``;
    the last term is zero whenever ``u`` already vanishes off the support.
    """
    lp = np.asarray(log_policy, dtype=float)
    u = np.asarray(u, dtype=float).reshape(lp.shape)
    v = np.zeros_like(lp)
    for s, a_ood in ood_actions.items():
        others = np.delete(np.arange(lp.shape[1]), a_ood)
        mass = float(np.sum(np.exp(lp[s, others] + u[s, others])))
        if mass >= 1.0:
            raise ParameterError(f"state {s}: shifted in-support mass {mass:.6g} leaves nothing to renormalize with")
        v[s, a_ood] = np.log1p(-mass) - lp[s, a_ood] - u[s, a_ood]
    return v
