"""Flat, typed experiment configuration.

A config file holds one ``section.key = value`` entry per line; values are
JSON literals (``0.1``, ``"dense"``, ``true``, ``[1.0, 0.0]``, ``null``) and
``#`` starts a comment.  Every key must appear in :data:`SCHEMA`; unknown
keys and ill-typed values are rejected.  Keys left out take the defaults
listed in :func:`template`, and the fully resolved config is what gets
hashed and copied next to the results.
"""
import hashlib
import json
from dataclasses import dataclass

from .exceptions import ConfigError

REQUIRED = object()


@dataclass(frozen=True)
class Field:
    kind: type
    default: object
    choices: tuple = ()
    nullable: bool = False
    help: str = ""

    @property
    def scalar(self):
        return self.kind in (int, float, str, bool)


SCHEMA = {
    "env.kind": Field(str, "gridworld", ("gridworld", "bandit", "random", "file")),
    "env.width": Field(int, 5),
    "env.height": Field(int, 5),
    "env.goal_x": Field(int, 4),
    "env.goal_y": Field(int, 4),
    "env.step_reward": Field(float, 0.0),
    "env.goal_reward": Field(float, 1.0),
    "env.slip_prob": Field(float, 0.0),
    "env.gamma": Field(float, 0.9),
    "env.action_rewards": Field(list, [1.0, 0.0, -1.0]),
    "env.num_states": Field(int, 5),
    "env.num_actions": Field(int, 3),
    "env.seed": Field(int, 0, help="seed of the random MDP instance"),
    "env.path": Field(str, "", help="MDP JSON file for env.kind = file"),
    "oracle.alpha": Field(float, 0.1),
    "oracle.tol": Field(float, 1e-10),
    "oracle.max_iters": Field(int, 1_000_000),
    "oracle.estimator": Field(str, "exact", ("exact", "telescoped")),
    "data.seed": Field(int, REQUIRED, help="root seed; streams rollout/segments/labels/train derive from it"),
    "data.segment_source": Field(str, "rollouts", ("rollouts", "exhaustive")),
    "data.num_rollouts": Field(int, 20),
    "data.horizon": Field(int, 50),
    "data.rollout_policy": Field(str, "epsilon_oracle", ("epsilon_oracle", "uniform", "file")),
    "data.policy_path": Field(str, "", help="JSON [S][A] policy table for rollout_policy = file"),
    "data.epsilon": Field(float, 0.3),
    "data.segment_length": Field(int, 4),
    "data.num_segments": Field(int, 100),
    "data.density": Field(str, "dense", ("dense", "sparse", "ranking")),
    "data.comparisons_per_segment": Field(int, 1),
    "data.ranking_size": Field(int, 3),
    "data.label_mode": Field(str, "sampled", ("sampled", "argmax", "soft")),
    "data.preference_model": Field(str, "regret", ("regret", "partial_return")),
    "data.label_gamma": Field(float, None, nullable=True, help="segment discount for labels; null = MDP discount"),
    "method.name": Field(str, "cpl", ("cpl", "sft", "percent_bc", "naive", "bc")),
    "method.variant": Field(str, "biased",
                            ("vanilla", "biased", "bc_reg", "kl_biased", "ranking", "dense_batch")),
    "method.alpha": Field(float, 0.1),
    "method.lam": Field(float, 0.5),
    "method.beta": Field(float, 0.0),
    "method.gamma": Field(float, 1.0),
    "method.label_mode": Field(str, "hard", ("hard", "soft")),
    "method.reduction": Field(str, "mean", ("mean", "sum")),
    "method.fraction": Field(float, 0.1, help="top fraction kept by percent_bc"),
    "optim.method": Field(str, "adaptive_moment", ("gradient_descent", "momentum", "adaptive_moment")),
    "optim.learning_rate": Field(float, 1e-2),
    "optim.steps": Field(int, 5000),
    "optim.pretrain_steps": Field(int, 0),
    "optim.convergence_tol": Field(float, 1e-8),
    "optim.batch_size": Field(int, 0, help="0 = full batch"),
    "eval.eval_every": Field(int, 0),
    "eval.metrics": Field(list, ["kl_to_optimal", "policy_return", "oracle_return", "argmax_agreement"]),
    "output.dir": Field(str, "out"),
}

METRICS = ("kl_to_optimal", "policy_return", "oracle_return", "argmax_agreement")


def coerce(key, value):
    """Check ``value`` against the schema entry for ``key`` and normalize it."""
    if key not in SCHEMA:
        raise ConfigError(key, "unknown key")
    entry = SCHEMA[key]
    if value is None:
        if entry.nullable:
            return None
        raise ConfigError(key, "may not be null")
    if entry.kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if entry.kind is int and isinstance(value, float) and value.is_integer():
        value = int(value)
    if not isinstance(value, entry.kind) or (entry.kind is not bool and isinstance(value, bool)):
        raise ConfigError(key, f"expected {entry.kind.__name__}, got {value!r}")
    if entry.choices and value not in entry.choices:
        raise ConfigError(key, f"{value!r} is not one of {', '.join(entry.choices)}")
    if key == "eval.metrics":
        for m in value:
            if m not in METRICS:
                raise ConfigError(key, f"unknown metric {m!r}")
    return value


def parse_value(key, text):
    """Parse a command-line or file value; bare words are taken as strings."""
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    if key in SCHEMA and SCHEMA[key].kind is str and not isinstance(value, str) and value is not None:
        value = text
    return coerce(key, value)


def _split_value(text):
    """Separate a JSON value from a trailing ``# comment``."""
    try:
        _, end = json.JSONDecoder().raw_decode(text)
    except json.JSONDecodeError:
        return text.split("#", 1)[0].strip()
    rest = text[end:].strip()
    if rest and not rest.startswith("#"):
        return text.split("#", 1)[0].strip()
    return text[:end]


def loads(text):
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in entries:
            raise ConfigError(key, "given twice")
        entries[key] = parse_value(key, _split_value(value))
    return entries


def resolve(entries, overrides=None):
    """Fill defaults, apply overrides and cross-check the result."""
    cfg = {}
    merged = dict(entries)
    for key, value in (overrides or {}).items():
        merged[key] = coerce(key, value)
    for key, entry in SCHEMA.items():
        if key in merged:
            cfg[key] = coerce(key, merged[key])
        elif entry.default is REQUIRED:
            raise ConfigError(key, "is required")
        else:
            cfg[key] = entry.default
    for key in merged:
        coerce(key, merged[key])
    _cross_check(cfg)
    return cfg


def _cross_check(cfg):
    if cfg["data.label_mode"] == "soft" and cfg["method.name"] == "cpl" and cfg["method.label_mode"] != "soft":
        raise ConfigError("method.label_mode", "soft data labels need soft training labels")
    if cfg["data.density"] == "ranking" and cfg["data.label_mode"] == "soft":
        raise ConfigError("data.label_mode", "rankings support sampled or argmax labels")
    grouped = cfg["method.variant"] in ("ranking", "dense_batch")
    if cfg["method.name"] == "cpl" and grouped != (cfg["data.density"] == "ranking"):
        raise ConfigError("method.variant", "ranking and dense_batch variants go with data.density = ranking")
    if cfg["method.name"] in ("sft", "naive") and cfg["data.density"] == "ranking":
        raise ConfigError("method.name", f"{cfg['method.name']} needs pair data")
    if cfg["method.name"] == "percent_bc" and cfg["data.segment_source"] != "rollouts":
        raise ConfigError("data.segment_source", "percent_bc needs rollouts")
    if cfg["env.kind"] == "file" and not cfg["env.path"]:
        raise ConfigError("env.path", "required for env.kind = file")
    if cfg["data.rollout_policy"] == "file" and not cfg["data.policy_path"]:
        raise ConfigError("data.policy_path", "required for rollout_policy = file")


def load(path, overrides=None):
    with open(path, encoding="utf-8") as fh:
        return resolve(loads(fh.read()), overrides)


def dumps(cfg):
    """Canonical text form: sorted keys, JSON values."""
    return "".join(f"{key} = {json.dumps(cfg[key])}\n" for key in sorted(cfg))


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()


def template():
    """The full schema as a commented config file."""
    lines = ["# cpl-lab experiment config: one `section.key = <JSON value>` per line"]
    section = None
    for key, entry in SCHEMA.items():
        head = key.split(".", 1)[0]
        if head != section:
            lines.append("")
            section = head
        note = []
        if entry.choices:
            note.append("one of: " + ", ".join(entry.choices))
        if entry.help:
            note.append(entry.help)
        comment = f"  # {'; '.join(note)}" if note else ""
        if entry.default is REQUIRED:
            lines.append(f"# {key} = <required {entry.kind.__name__}>{comment}")
        else:
            lines.append(f"{key} = {json.dumps(entry.default)}{comment}")
    return "\n".join(lines) + "\n"
