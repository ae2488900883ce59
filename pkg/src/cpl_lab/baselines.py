"""Reference methods: supervised fine-tuning, top-fraction BC, naive advantage MLE."""
import math

import numpy as np

from .exceptions import ParameterError
from .mdp import trajectory_return
from .objectives import PreferenceObjective, Variant
from .trainer import TrainTrace, minimize, bc_pretrain


def sft(dataset, config, shape=None):
    """BC on every segment, then BC on the preferred segments only.

    The first stage runs ``config.pretrain_steps`` steps, the second
    ``config.steps``.  Returns ``(logits, trace)``.
    """
    if not dataset.pairs:
        raise ParameterError("SFT needs a non-empty pair dataset")
    shape = dataset.shape() if shape is None else tuple(shape)
    logits = np.zeros(shape)
    trace = TrainTrace()
    if config.pretrain_steps > 0:
        logits, pre = bc_pretrain(logits, dataset.state_actions(), config, config.pretrain_steps)
        trace.extend(pre)
    preferred = [sa for p in dataset.pairs for sa in p.seg_plus.pairs]
    logits, fine = bc_pretrain(logits, preferred, config, config.steps)
    trace.extend(fine)
    trace.stop_reason = fine.stop_reason
    return logits, trace


def select_top_trajectories(rollouts, fraction, gamma):
    """Indices of the best ``ceil(fraction * N)`` rollouts by discounted return.

    Equal returns keep the lower index first.
    """
    if not 0.0 < fraction <= 1.0:
        raise ParameterError(f"fraction must lie in (0, 1], got {fraction}")
    if not rollouts:
        raise ParameterError("no rollouts given")
    returns = [trajectory_return(t, gamma) for t in rollouts]
    order = sorted(range(len(rollouts)), key=lambda i: (-returns[i], i))
    return order[:math.ceil(fraction * len(rollouts))]


def percent_bc(rollouts, fraction, mdp, gamma, config):
    """Behavior cloning on the top fraction of rollouts ranked by true return."""
    keep = select_top_trajectories(rollouts, fraction, gamma)
    data = [(s, a) for i in keep for s, a in zip(rollouts[i].states[:-1], rollouts[i].actions)]
    logits = np.zeros((mdp.num_states, mdp.num_actions))
    return bc_pretrain(logits, data, config, config.steps)


def naive_advantage_mle(dataset, loss_config, opt_config, shape=None):
    """Fit an unconstrained advantage table by the Boltzmann pair likelihood.

    Segment scores are discounted sums of the table itself, so nothing ties
    ``sum_a exp(A(s, a) / alpha)`` to one.  The distilled policy is the row
    softmax of ``A / alpha``.  Returns ``(advantage, logits, trace)``.
    """
    shape = dataset.shape() if shape is None else tuple(shape)
    config = loss_config.replace(variant=Variant.VANILLA)
    objective = PreferenceObjective(dataset, config, shape)

    def value_and_grad(values):
        loss, grad, acc = objective.raw(values.ravel(), scale=1.0)
        return loss, grad.reshape(shape), acc

    advantage, trace = minimize(value_and_grad, np.zeros(shape), opt_config, opt_config.steps)
    return advantage, advantage / loss_config.alpha, trace


def naive_loss(advantage, dataset, loss_config):
    """Pair likelihood loss of a raw advantage table."""
    adv = np.asarray(advantage, dtype=float)
    objective = PreferenceObjective(dataset, loss_config.replace(variant=Variant.VANILLA), adv.shape)
    return objective.raw(adv.ravel(), scale=1.0)[0]

