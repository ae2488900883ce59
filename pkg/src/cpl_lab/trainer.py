"""Tabular softmax policies: BC pretraining and first-order CPL training."""
import csv
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .exceptions import DivergenceError, ParameterError
from .objectives import PreferenceObjective, log_softmax
from .oracle import policy_return
from .rng import derive_rng, uniform_index


def log_policy(logits):
    """Row log-softmax of a logit table."""
    return log_softmax(logits)


class Method(str, Enum):
    GRADIENT_DESCENT = "gradient_descent"
    MOMENTUM = "momentum"
    ADAPTIVE_MOMENT = "adaptive_moment"


@dataclass
class OptimizerConfig:
    method: Method = Method.ADAPTIVE_MOMENT
    learning_rate: float = 1e-2
    steps: int = 5000
    pretrain_steps: int = 0
    seed: int = 0
    convergence_tol: float = 1e-8
    batch_size: int = 0
    eval_every: int = 0

    def __post_init__(self):
        self.method = Method(self.method)
        if self.learning_rate <= 0:
            raise ParameterError("learning_rate must be positive")
        if self.steps < 0 or self.pretrain_steps < 0 or self.batch_size < 0 or self.eval_every < 0:
            raise ParameterError("step counts must be non-negative")


class _Optimizer:
    def __init__(self, method, lr, momentum=0.9, beta1=0.9, beta2=0.999, eps=1e-8):
        self.method = Method(method)
        self.lr = lr
        self.momentum = momentum
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grad):
        self.t += 1
        if self.method is Method.GRADIENT_DESCENT:
            return params - self.lr * grad
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        if self.method is Method.MOMENTUM:
            self.m = self.momentum * self.m + grad
            return params - self.lr * self.m
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainTrace:
    step: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    evaluations: dict = field(default_factory=dict)
    stop_reason: str = ""

    def record(self, step, loss, grad_norm, accuracy):
        self.step.append(step)
        self.loss.append(loss)
        self.grad_norm.append(grad_norm)
        self.accuracy.append(accuracy)

    def extend(self, other):
        offset = (self.step[-1] + 1) if self.step else 0
        for i in range(len(other.step)):
            self.record(other.step[i] + offset, other.loss[i], other.grad_norm[i], other.accuracy[i])
        for k, v in other.evaluations.items():
            self.evaluations[k + offset] = v

    def rows(self):
        for i, step in enumerate(self.step):
            ev = self.evaluations.get(step, {})
            yield [step, repr(self.loss[i]), repr(self.grad_norm[i]), repr(self.accuracy[i]),
                   _fmt(ev.get("kl_to_optimal")), _fmt(ev.get("policy_return"))]

    def to_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "loss", "grad_norm", "accuracy", "kl_to_optimal", "policy_return"])
            writer.writerows(self.rows())


def _fmt(value):
    return "" if value is None else repr(float(value))


def kl_to_optimal(pi_star, log_pi_hat):
    """State-averaged ``KL(pi*(.|s) || pi_hat(.|s))``."""
    pi_star = np.asarray(pi_star, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pi_star > 0, pi_star * (np.log(pi_star) - log_pi_hat), 0.0)
    return float(np.mean(terms.sum(axis=1)))


def _snapshot(logits, oracle, mdp):
    lp = log_softmax(logits)
    ev = {}
    if oracle is not None:
        ev["kl_to_optimal"] = kl_to_optimal(oracle.pi_star, lp)
    if mdp is not None:
        ev["policy_return"] = policy_return(mdp, np.exp(lp))
    return ev


def minimize(value_and_grad, logits, opt_config, steps, oracle=None, mdp=None, sampler=None):
    theta = np.array(logits, dtype=float, copy=True)
    opt = _Optimizer(opt_config.method, opt_config.learning_rate)
    trace = TrainTrace()
    every = opt_config.eval_every
    trace.stop_reason = "step_budget"
    for step in range(steps):
        loss, grad, acc = value_and_grad(theta) if sampler is None else sampler(theta)
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise DivergenceError(f"non-finite loss at step {step} (loss={loss}, "
                                  f"max |logit|={np.max(np.abs(theta)):.3e}); lower the learning rate")
        gnorm = float(np.max(np.abs(grad)))
        trace.record(step, float(loss), gnorm, acc)
        if every and step % every == 0 and (oracle is not None or mdp is not None):
            trace.evaluations[step] = _snapshot(theta, oracle, mdp)
        if gnorm < opt_config.convergence_tol:
            trace.stop_reason = "converged"
            break
        theta = opt.step(theta, grad)
    if trace.step and (oracle is not None or mdp is not None):
        trace.evaluations[trace.step[-1]] = _snapshot(theta, oracle, mdp)
    return theta, trace


def bc_value_and_grad(counts):
    """Negative mean log-likelihood of normalized (s, a) ``counts`` and its logit gradient."""
    def fn(theta):
        lp = log_softmax(theta)
        loss = -float(np.sum(counts * lp))
        grad = -(counts - np.exp(lp) * counts.sum(axis=1, keepdims=True))
        acc = float(np.sum(counts[np.arange(len(lp)), np.argmax(lp, axis=1)]))
        return loss, grad, acc
    return fn


def bc_counts(data, shape):
    if len(data) == 0:
        raise ParameterError("behavior cloning needs at least one (state, action) pair")
    counts = np.zeros(shape)
    for s, a in data:
        counts[s, a] += 1.0
    return counts / len(data)


def bc_pretrain(logits, data, config, steps=None):
    """Maximize the mean log-likelihood of ``data`` by first-order steps.

    Returns the updated logits and the trace.
    """
    logits = np.asarray(logits, dtype=float)
    steps = config.pretrain_steps if steps is None else steps
    return minimize(bc_value_and_grad(bc_counts(data, logits.shape)), logits, config, steps)


def _objective_fn(objective):
    def fn(theta):
        out = objective(log_softmax(theta))
        return out.loss, out.grad, out.accuracy
    return fn


def _minibatch_sampler(dataset, loss_config, shape, bc_data, batch_size, seed):
    n = len(dataset.pairs)
    if n == 0:
        raise ParameterError("minibatching is supported for pair datasets only")
    rng = derive_rng(seed, "train")

    def sample(theta):
        idx = [uniform_index(rng, n) for _ in range(batch_size)]
        obj = PreferenceObjective(dataset.subset(idx), loss_config, shape, bc_data)
        return _objective_fn(obj)(theta)
    return sample


def train(logits, dataset, loss_config, opt_config, oracle=None, mdp=None, bc_data=None):
    """Optimize logits on a CPL-family objective.

    Runs BC pretraining on the dataset's (s, a) pairs first when
    ``opt_config.pretrain_steps > 0``.  Stops on the step budget or when the
    gradient sup-norm drops below ``convergence_tol``.  With an oracle the
    trace's evaluation snapshots carry the KL to the optimal policy.
    """
    theta = np.array(logits, dtype=float, copy=True)
    trace = TrainTrace()
    if opt_config.pretrain_steps > 0:
        theta, pre = bc_pretrain(theta, dataset.state_actions(), opt_config)
        trace.extend(pre)
    objective = PreferenceObjective(dataset, loss_config, theta.shape, bc_data)
    sampler = None
    if opt_config.batch_size:
        sampler = _minibatch_sampler(dataset, loss_config, theta.shape, bc_data,
                                     opt_config.batch_size, opt_config.seed)
    theta, main = minimize(_objective_fn(objective), theta, opt_config, opt_config.steps,
                            oracle, mdp, sampler)
    trace.extend(main)
    trace.stop_reason = main.stop_reason
    return theta, trace


def gradient_check(logits, dataset, loss_config, h=1e-5, bc_data=None):
    """Largest relative gap between the analytic gradient and central differences."""
    theta = np.asarray(logits, dtype=float)
    objective = PreferenceObjective(dataset, loss_config, theta.shape, bc_data)
    analytic = objective(log_softmax(theta)).grad
    numeric = np.zeros_like(theta)
    for idx in np.ndindex(theta.shape):
        up = theta.copy()
        down = theta.copy()
        up[idx] += h
        down[idx] -= h
        numeric[idx] = (objective(log_softmax(up)).loss - objective(log_softmax(down)).loss) / (2 * h)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))


def estimate_smoothness(objective, logits, iters=50, eps=1e-5, seed=0):
    """Power-iteration estimate of the largest Hessian eigenvalue at ``logits``."""
    theta = np.asarray(logits, dtype=float)
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(theta.shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        g_up = objective(log_softmax(theta + eps * v)).grad
        g_down = objective(log_softmax(theta - eps * v)).grad
        hv = (g_up - g_down) / (2 * eps)
        lam = float(np.linalg.norm(hv))
        if lam == 0.0:
            break
        v = hv / lam
    return lam
