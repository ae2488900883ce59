"""End-to-end pipeline: environment, oracle, rollouts, labels, training, evaluation.

Every random draw comes from named streams derived from ``data.seed``
(``rollout``, ``segments``, ``labels``, ``train``), so a config fully
determines the dataset bytes and the final metrics.  Random MDP instances
use their own ``env.seed``.
"""
import csv
import hashlib
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from . import config as cfgmod
from .baselines import naive_advantage_mle, percent_bc, sft
from .exceptions import ParameterError, StageError
from .mdp import build_gridworld, build_random_mdp, build_single_state_bandit, load_mdp, sample_rollout
from .objectives import LossConfig, PreferenceObjective, Variant, log_softmax
from .oracle import policy_return, soft_value_iteration
from .preferences import (build_dense_dataset, build_matched_dataset, build_rankings, dumps_dataset,
                          exhaustive_segments, make_scorer, sample_segments)
from .rng import derive_rng
from .trainer import OptimizerConfig, bc_pretrain, kl_to_optimal, train
from .validation import check_policy

STAGES = ("config", "env", "oracle", "rollout", "segments", "labels", "train", "eval", "output")


@contextmanager
def stage(name):
    """Re-raise any failure inside the block as a :class:`StageError` tagged ``name``."""
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


@dataclass
class ResultRecord:
    config_hash: str
    dataset_hash: str
    metrics: dict
    wall_time: float
    trace_path: str
    num_comparisons: int
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def config_hash(cfg):
    """SHA-256 of the canonical config, ignoring where outputs are written."""
    return cfgmod.config_hash({k: v for k, v in cfg.items() if k != "output.dir"})


def blob_hash(data):
    """Git blob object id of ``data`` (bytes)."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def build_env(cfg):
    kind = cfg["env.kind"]
    if kind == "gridworld":
        return build_gridworld(cfg["env.width"], cfg["env.height"], (cfg["env.goal_x"], cfg["env.goal_y"]),
                               cfg["env.step_reward"], cfg["env.goal_reward"], cfg["env.slip_prob"],
                               cfg["env.gamma"])
    if kind == "bandit":
        return build_single_state_bandit(cfg["env.action_rewards"], cfg["env.gamma"])
    if kind == "random":
        return build_random_mdp(cfg["env.num_states"], cfg["env.num_actions"], cfg["env.gamma"],
                                seed=cfg["env.seed"])
    return load_mdp(cfg["env.path"])


def solve_oracle(cfg, mdp):
    return soft_value_iteration(mdp, cfg["oracle.alpha"], cfg["oracle.tol"], cfg["oracle.max_iters"])


def rollout_policy(cfg, mdp, oracle):
    kind = cfg["data.rollout_policy"]
    uniform = np.full((mdp.num_states, mdp.num_actions), 1.0 / mdp.num_actions)
    if kind == "uniform":
        return uniform
    if kind == "file":
        with open(cfg["data.policy_path"], encoding="utf-8") as fh:
            table = json.load(fh)
        return check_policy(table, (mdp.num_states, mdp.num_actions))
    eps = cfg["data.epsilon"]
    if not 0.0 <= eps <= 1.0:
        raise ParameterError(f"data.epsilon must lie in [0, 1], got {eps}")
    return (1.0 - eps) * oracle.pi_star + eps * uniform


def generate_rollouts(cfg, mdp, oracle, seed=None):
    seed = cfg["data.seed"] if seed is None else seed
    policy = rollout_policy(cfg, mdp, oracle)
    rng = derive_rng(seed, "rollout")
    return [sample_rollout(mdp, policy, cfg["data.horizon"], rng) for _ in range(cfg["data.num_rollouts"])]


def _needs_rollouts(cfg):
    return cfg["data.segment_source"] == "rollouts" or cfg["method.name"] == "percent_bc"


def generate_data(cfg, mdp, oracle, seed=None):
    """Build the labeled dataset; returns ``(dataset, rollouts)``.

    ``seed`` overrides ``data.seed`` (the CLI's ``--seed``).
    """
    seed = cfg["data.seed"] if seed is None else seed
    rollouts = []
    if _needs_rollouts(cfg):
        with stage("rollout"):
            rollouts = generate_rollouts(cfg, mdp, oracle, seed)
    with stage("segments"):
        if cfg["data.segment_source"] == "exhaustive":
            segments = exhaustive_segments(mdp.num_states, mdp.num_actions)
        else:
            segments = sample_segments(rollouts, cfg["data.segment_length"], cfg["data.num_segments"],
                                       derive_rng(seed, "segments"))
    with stage("labels"):
        gamma = mdp.discount if cfg["data.label_gamma"] is None else cfg["data.label_gamma"]
        scorer = make_scorer(cfg["data.preference_model"], oracle, mdp, gamma, cfg["oracle.estimator"])
        rng = derive_rng(seed, "labels")
        meta = {"num_states": mdp.num_states, "num_actions": mdp.num_actions}
        density, mode = cfg["data.density"], cfg["data.label_mode"]
        if density == "dense":
            data = build_dense_dataset(segments, scorer, mode, rng, metadata=meta)
        elif density == "sparse":
            data = build_matched_dataset(segments, scorer, mode, rng, cfg["data.comparisons_per_segment"], meta)
        else:
            data = build_rankings(segments, scorer, cfg["data.ranking_size"], mode, rng, meta)
        data.metadata["seed"] = seed
    return data, rollouts


def num_comparisons(dataset):
    return len(dataset.pairs) + sum(math.comb(len(g), 2) for g in dataset.rankings)


def loss_config(cfg, reference_log_policy=None):
    return LossConfig(variant=cfg["method.variant"], alpha=cfg["method.alpha"], lam=cfg["method.lam"],
                      beta=cfg["method.beta"], gamma_train=cfg["method.gamma"],
                      reference_log_policy=reference_log_policy, label_mode=cfg["method.label_mode"],
                      reduction=cfg["method.reduction"])


def optimizer_config(cfg, seed=None):
    return OptimizerConfig(method=cfg["optim.method"], learning_rate=cfg["optim.learning_rate"],
                           steps=cfg["optim.steps"], pretrain_steps=cfg["optim.pretrain_steps"],
                           seed=cfg["data.seed"] if seed is None else seed,
                           convergence_tol=cfg["optim.convergence_tol"], batch_size=cfg["optim.batch_size"],
                           eval_every=cfg["eval.eval_every"])


def fit_method(cfg, dataset, mdp, oracle=None, rollouts=None, seed=None):
    """Train the configured method; returns ``(logits, trace)``."""
    shape = (mdp.num_states, mdp.num_actions)
    opt = optimizer_config(cfg, seed)
    name = cfg["method.name"]
    if name == "sft":
        return sft(dataset, opt, shape)
    if name == "bc":
        return bc_pretrain(np.zeros(shape), dataset.state_actions(), opt, opt.steps)
    if name == "percent_bc":
        if not rollouts:
            raise ParameterError("percent_bc needs rollouts")
        return percent_bc(rollouts, cfg["method.fraction"], mdp, mdp.discount, opt)
    if name == "naive":
        _, logits, trace = naive_advantage_mle(dataset, loss_config(cfg), opt, shape)
        return logits, trace
    reference = None
    bc_data = None
    if cfg["method.variant"] == Variant.KL_BIASED.value:
        ref_logits, _ = bc_pretrain(np.zeros(shape), dataset.state_actions(), opt, opt.steps)
        reference = log_softmax(ref_logits)
    if cfg["method.variant"] == Variant.BC_REG.value:
        bc_data = dataset.state_actions()
    return train(np.zeros(shape), dataset, loss_config(cfg, reference), opt, oracle, mdp, bc_data)


def evaluate(policy, mdp, oracle):
    """Exact metrics of a probability table against the soft-optimal policy.

    ``kl_to_optimal`` is the uniform-over-states mean of ``KL(pi* || pi)``;
    ``argmax_agreement`` the fraction of states whose argmax (lowest index on
    ties) matches that of ``pi*``.
    """
    policy = check_policy(policy, (mdp.num_states, mdp.num_actions))
    with np.errstate(divide="ignore"):
        log_pi = np.log(policy)
    return {
        "policy_return": policy_return(mdp, policy),
        "oracle_return": policy_return(mdp, oracle.pi_star),
        "kl_to_optimal": kl_to_optimal(oracle.pi_star, log_pi),
        "argmax_agreement": float(np.mean(np.argmax(policy, axis=1) == np.argmax(oracle.pi_star, axis=1))),
    }


def training_fit(cfg, dataset, logits, trace):
    """Final loss and comparison accuracy of the trained policy on its dataset."""
    if cfg["method.name"] == "cpl" and cfg["method.variant"] not in ("bc_reg", "kl_biased"):
        out = PreferenceObjective(dataset, loss_config(cfg), logits.shape)(log_softmax(logits))
        return out.loss, out.accuracy
    return (trace.loss[-1], trace.accuracy[-1]) if trace.loss else (float("nan"), float("nan"))


def write_metrics_csv(metrics, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["metric", "value"])
        for key in sorted(metrics):
            writer.writerow([key, repr(float(metrics[key]))])


def save_policy(logits, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"logits": np.asarray(logits).tolist()}, fh, sort_keys=True)
        fh.write("\n")


def load_policy(path):
    with open(path, encoding="utf-8") as fh:
        return np.asarray(json.load(fh)["logits"], dtype=float)


def resolve_config(config, overrides=None):
    """Accept a path, a raw entry dict or an already resolved config."""
    with stage("config"):
        if isinstance(config, (str, os.PathLike)):
            return cfgmod.load(config, overrides)
        return cfgmod.resolve(config, overrides)


def run(config, overrides=None, out_dir=None):
    """Execute the whole pipeline and write its artifacts.

    Writes ``config.copy``, ``dataset.jsonl``, ``trace.csv``, ``metrics.csv``,
    ``policy.json`` and ``result.json`` under the output directory, which is
    ``out_dir`` or the config's ``output.dir``.
    """
    start = time.perf_counter()
    cfg = resolve_config(config, overrides)
    if out_dir is not None:
        cfg["output.dir"] = str(out_dir)
    out = cfg["output.dir"]
    with stage("output"):
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "config.copy"), "w", encoding="utf-8") as fh:
            fh.write(cfgmod.dumps(cfg))
    with stage("env"):
        mdp = build_env(cfg)
    with stage("oracle"):
        oracle = solve_oracle(cfg, mdp)
    dataset, rollouts = generate_data(cfg, mdp, oracle)
    text = dumps_dataset(dataset).encode("utf-8")
    with stage("output"):
        with open(os.path.join(out, "dataset.jsonl"), "wb") as fh:
            fh.write(text)
    with stage("train"):
        logits, trace = fit_method(cfg, dataset, mdp, oracle, rollouts)
    with stage("eval"):
        scores = evaluate(np.exp(log_softmax(logits)), mdp, oracle)
        metrics = {k: scores[k] for k in cfg["eval.metrics"]}
        metrics["loss"], metrics["accuracy"] = training_fit(cfg, dataset, logits, trace)
        bad = [k for k, v in metrics.items() if not np.isfinite(v)]
        if bad:
            raise ParameterError(f"non-finite metrics: {', '.join(bad)}")
    trace_path = os.path.join(out, "trace.csv")
    with stage("output"):
        trace.to_csv(trace_path)
        write_metrics_csv(metrics, os.path.join(out, "metrics.csv"))
        save_policy(logits, os.path.join(out, "policy.json"))
        record = ResultRecord(config_hash(cfg), blob_hash(text), {k: float(v) for k, v in metrics.items()},
                              time.perf_counter() - start, trace_path, num_comparisons(dataset),
                              {"stop_reason": trace.stop_reason, "steps": len(trace.step)})
        with open(os.path.join(out, "result.json"), "w", encoding="utf-8") as fh:
            json.dump(record.to_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")
    return record


def _run_one(args):
    cfg, out_dir = args
    return run(cfg, out_dir=out_dir)


def sweep(config, axis, values, overrides=None, out_dir=None, jobs=1):
    """One :func:`run` per value of the scalar field ``axis``.

    Runs share the base config (and so the root seed) and go to
    ``<out>/<axis>=<value>``; ``sweep.csv`` collects one row per run.  With
    ``jobs > 1`` runs execute in separate processes.
    """
    cfg = resolve_config(config, overrides)
    with stage("config"):
        if axis not in cfgmod.SCHEMA:
            raise ParameterError(f"unknown sweep axis {axis!r}")
        if not cfgmod.SCHEMA[axis].scalar:
            raise ParameterError(f"sweep axis {axis!r} is not a scalar field")
        if axis == "output.dir":
            raise ParameterError("cannot sweep the output directory")
        values = [cfgmod.parse_value(axis, v) if isinstance(v, str) else cfgmod.coerce(axis, v)
                  for v in values]
        if not values:
            raise ParameterError("sweep needs at least one value")
        base = out_dir if out_dir is not None else cfg["output.dir"]
        jobs_list = []
        for v in values:
            run_cfg = dict(cfg)
            run_cfg[axis] = v
            run_cfg = cfgmod.resolve(run_cfg)
            jobs_list.append((run_cfg, os.path.join(base, f"{axis}={v}")))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_run_one, jobs_list))
    else:
        records = [_run_one(j) for j in jobs_list]
    with stage("output"):
        os.makedirs(base, exist_ok=True)
        metric_keys = sorted({k for r in records for k in r.metrics})
        with open(os.path.join(base, "sweep.csv"), "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([axis, "config_hash", "dataset_hash", "num_comparisons"] + metric_keys)
            for v, r in zip(values, records):
                writer.writerow([json.dumps(v), r.config_hash, r.dataset_hash, r.num_comparisons]
                                + [repr(r.metrics.get(k, float("nan"))) for k in metric_keys])
    return records
