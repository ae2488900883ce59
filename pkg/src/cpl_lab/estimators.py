"""scikit-learn style estimators over tabular policies.

Each estimator keeps its hyperparameters as constructor arguments (so
``get_params``/``set_params``/``clone`` work) and exposes the fitted policy
through ``predict``, ``predict_proba`` and ``predict_log_proba`` on arrays of
state indices.
"""
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .baselines import naive_advantage_mle, percent_bc, sft
from .objectives import LossConfig, PreferenceObjective, Variant, log_softmax
from .oracle import verify_consistency
from .preferences import PreferenceDataset
from .trainer import OptimizerConfig, bc_pretrain, train
from .validation import check_states


class TabularPolicyMixin:
    """Prediction methods for estimators that store ``logits_``."""

    def predict_log_proba(self, states):
        check_is_fitted(self, "logits_")
        idx = check_states(states, self.logits_.shape[0])
        return log_softmax(self.logits_)[idx]

    def predict_proba(self, states):
        return np.exp(self.predict_log_proba(states))

    def predict(self, states):
        """Most likely action per state (lowest index on ties)."""
        return np.argmax(self.predict_log_proba(states), axis=1)

    @property
    def policy_(self):
        check_is_fitted(self, "logits_")
        return np.exp(log_softmax(self.logits_))

    def _opt_config(self):
        return OptimizerConfig(method=self.method, learning_rate=self.learning_rate, steps=self.max_steps,
                               pretrain_steps=getattr(self, "pretrain_steps", 0), seed=self.random_state,
                               convergence_tol=self.tol)


def _shape(X, n_states, n_actions):
    if n_states is not None and n_actions is not None:
        return int(n_states), int(n_actions)
    if isinstance(X, PreferenceDataset):
        return X.shape()
    sa = np.asarray(list(X))
    return int(sa[:, 0].max()) + 1, int(sa[:, 1].max()) + 1


class CPLPolicy(TabularPolicyMixin, BaseEstimator):
    """Contrastive preference learner over a softmax logit table.

    ``fit`` takes a :class:`PreferenceDataset` (pairs, or rankings for the
    ``ranking``/``dense_batch`` variants).  ``score`` reports the fraction of
    comparisons the fitted policy orders like the labels.
    """

    def __init__(self, variant="biased", alpha=0.1, lam=0.5, beta=0.0, gamma=1.0, label_mode="hard",
                 reduction="mean", reference_log_policy=None, method="adaptive_moment", learning_rate=1e-2,
                 max_steps=5000, pretrain_steps=0, tol=1e-8, batch_size=0, random_state=0,
                 n_states=None, n_actions=None):
        self.variant = variant
        self.alpha = alpha
        self.lam = lam
        self.beta = beta
        self.gamma = gamma
        self.label_mode = label_mode
        self.reduction = reduction
        self.reference_log_policy = reference_log_policy
        self.method = method
        self.learning_rate = learning_rate
        self.max_steps = max_steps
        self.pretrain_steps = pretrain_steps
        self.tol = tol
        self.batch_size = batch_size
        self.random_state = random_state
        self.n_states = n_states
        self.n_actions = n_actions

    def loss_config(self):
        return LossConfig(variant=self.variant, alpha=self.alpha, lam=self.lam, beta=self.beta,
                          gamma_train=self.gamma, reference_log_policy=self.reference_log_policy,
                          label_mode=self.label_mode, reduction=self.reduction)

    def fit(self, X, y=None, bc_data=None, oracle=None, mdp=None):
        shape = _shape(X, self.n_states, self.n_actions)
        config = self.loss_config()
        if config.variant is Variant.BC_REG and bc_data is None:
            bc_data = X.state_actions()
        opt = self._opt_config()
        opt.batch_size = self.batch_size
        self.logits_, self.trace_ = train(np.zeros(shape), X, config, opt, oracle=oracle, mdp=mdp,
                                          bc_data=bc_data)
        self.n_states_, self.n_actions_ = shape
        return self

    def score(self, X, y=None):
        """Fraction of comparisons in ``X`` that the fitted scores order like the labels."""
        check_is_fitted(self, "logits_")
        config = self.loss_config()
        if config.variant is Variant.BC_REG:
            config = config.replace(variant=Variant.VANILLA, beta=0.0)
        objective = PreferenceObjective(X, config, self.logits_.shape)
        return objective(log_softmax(self.logits_)).accuracy

    def consistency_error(self):
        """Largest per-state normalization error of the implied advantage ``alpha * log pi``."""
        check_is_fitted(self, "logits_")
        return float(np.max(verify_consistency(self.alpha * log_softmax(self.logits_), self.alpha)))


class BehaviorCloning(TabularPolicyMixin, BaseEstimator):
    """Maximum-likelihood cloning of (state, action) pairs."""

    def __init__(self, method="adaptive_moment", learning_rate=1e-2, max_steps=5000, tol=1e-8,
                 random_state=0, n_states=None, n_actions=None):
        self.method = method
        self.learning_rate = learning_rate
        self.max_steps = max_steps
        self.tol = tol
        self.random_state = random_state
        self.n_states = n_states
        self.n_actions = n_actions

    def fit(self, X, y=None):
        data = X.state_actions() if isinstance(X, PreferenceDataset) else list(X)
        shape = _shape(data, self.n_states, self.n_actions)
        self.logits_, self.trace_ = bc_pretrain(np.zeros(shape), data, self._opt_config(), self.max_steps)
        return self


class SupervisedFineTuning(TabularPolicyMixin, BaseEstimator):
    """BC on all segments, then on preferred segments only."""

    def __init__(self, method="adaptive_moment", learning_rate=1e-2, max_steps=5000, pretrain_steps=5000,
                 tol=1e-8, random_state=0, n_states=None, n_actions=None):
        self.method = method
        self.learning_rate = learning_rate
        self.max_steps = max_steps
        self.pretrain_steps = pretrain_steps
        self.tol = tol
        self.random_state = random_state
        self.n_states = n_states
        self.n_actions = n_actions

    def fit(self, X, y=None):
        shape = _shape(X, self.n_states, self.n_actions)
        self.logits_, self.trace_ = sft(X, self._opt_config(), shape)
        return self


class PercentBC(TabularPolicyMixin, BaseEstimator):
    """BC on the top ``fraction`` of rollouts by true discounted return.

    ``fit(rollouts, mdp=...)`` needs the MDP for its reward table and shape.
    """

    def __init__(self, fraction=0.1, gamma=None, method="adaptive_moment", learning_rate=1e-2,
                 max_steps=5000, tol=1e-8, random_state=0):
        self.fraction = fraction
        self.gamma = gamma
        self.method = method
        self.learning_rate = learning_rate
        self.max_steps = max_steps
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None, mdp=None):
        if mdp is None:
            raise TypeError("PercentBC.fit needs the mdp keyword")
        gamma = mdp.discount if self.gamma is None else self.gamma
        self.logits_, self.trace_ = percent_bc(list(X), self.fraction, mdp, gamma, self._opt_config())
        return self


class NaiveAdvantageMLE(TabularPolicyMixin, BaseEstimator):
    """Unconstrained advantage table fit by preference likelihood, distilled by softmax."""

    def __init__(self, alpha=0.1, gamma=1.0, label_mode="hard", reduction="mean", method="adaptive_moment",
                 learning_rate=1e-2, max_steps=5000, tol=1e-8, random_state=0, n_states=None, n_actions=None):
        self.alpha = alpha
        self.gamma = gamma
        self.label_mode = label_mode
        self.reduction = reduction
        self.method = method
        self.learning_rate = learning_rate
        self.max_steps = max_steps
        self.tol = tol
        self.random_state = random_state
        self.n_states = n_states
        self.n_actions = n_actions

    def fit(self, X, y=None):
        shape = _shape(X, self.n_states, self.n_actions)
        config = LossConfig(variant=Variant.VANILLA, alpha=self.alpha, gamma_train=self.gamma,
                            label_mode=self.label_mode, reduction=self.reduction)
        self.advantage_, self.logits_, self.trace_ = naive_advantage_mle(X, config, self._opt_config(), shape)
        return self

    def consistency_error(self):
        check_is_fitted(self, "advantage_")
        return float(np.max(verify_consistency(self.advantage_, self.alpha)))
