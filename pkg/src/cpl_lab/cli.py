"""``cpl-lab`` command line.

Every subcommand except ``template`` takes a config file and accepts
``--section.key value`` overrides for any schema field, for example::

    cpl-lab run exp.cfg --method.lam 0.75 --optim.steps 2000
    cpl-lab gen-data exp.cfg --seed 3 --out data.jsonl
    cpl-lab sweep exp.cfg --axis method.lam --values 0.25 0.5 1.0

Failures exit with status 1 (2 for usage errors) and a message naming the
stage that failed.
"""
import argparse
import json
import sys

import numpy as np

from . import config as cfgmod
from . import experiment as ex
from .exceptions import ConfigError, StageError
from .mdp import save_mdp
from .objectives import log_softmax
from .oracle import save_solution
from .preferences import load_dataset, save_dataset


def _overrides(extra):
    """Turn leftover ``--key value`` tokens into typed config entries."""
    out = {}
    i = 0
    while i < len(extra):
        token = extra[i]
        if not token.startswith("--") or "." not in token:
            raise ConfigError(token, "expected a --section.key override")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(key, "override is missing its value")
            value = extra[i + 1]
            i += 2
        out[key] = cfgmod.parse_value(key, value)
    return out


def _config(args, extra):
    overrides = _overrides(extra)
    if getattr(args, "seed", None) is not None:
        overrides["data.seed"] = args.seed
    return ex.resolve_config(args.config, overrides)


def _emit(obj):
    print(json.dumps(obj, sort_keys=True, indent=2))


def cmd_template(args, extra):
    text = cfgmod.template()
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_solve(args, extra):
    cfg = _config(args, extra)
    with ex.stage("env"):
        mdp = ex.build_env(cfg)
    with ex.stage("oracle"):
        sol = ex.solve_oracle(cfg, mdp)
    with ex.stage("output"):
        save_solution(sol, args.out)
        if args.mdp_out:
            save_mdp(mdp, args.mdp_out)
    _emit({"iterations": sol.iterations, "residual": sol.residual, "solution": args.out})


def cmd_gen_data(args, extra):
    cfg = _config(args, extra)
    with ex.stage("env"):
        mdp = ex.build_env(cfg)
    with ex.stage("oracle"):
        sol = ex.solve_oracle(cfg, mdp)
    dataset, _ = ex.generate_data(cfg, mdp, sol)
    with ex.stage("output"):
        save_dataset(dataset, args.out)
        with open(args.out, "rb") as fh:
            digest = ex.blob_hash(fh.read())
    _emit({"dataset": args.out, "dataset_hash": digest, "num_comparisons": ex.num_comparisons(dataset)})


def cmd_train(args, extra):
    cfg = _config(args, extra)
    with ex.stage("env"):
        mdp = ex.build_env(cfg)
    with ex.stage("oracle"):
        sol = ex.solve_oracle(cfg, mdp)
    with ex.stage("labels"):
        dataset = load_dataset(args.data)
    rollouts = None
    if cfg["method.name"] == "percent_bc":
        with ex.stage("rollout"):
            rollouts = ex.generate_rollouts(cfg, mdp, sol)
    with ex.stage("train"):
        logits, trace = ex.fit_method(cfg, dataset, mdp, sol, rollouts)
    with ex.stage("output"):
        ex.save_policy(logits, args.out)
        if args.trace:
            trace.to_csv(args.trace)
    _emit({"policy": args.out, "steps": len(trace.step), "stop_reason": trace.stop_reason,
           "final_loss": trace.loss[-1] if trace.loss else None})


def cmd_eval(args, extra):
    cfg = _config(args, extra)
    with ex.stage("env"):
        mdp = ex.build_env(cfg)
    with ex.stage("oracle"):
        sol = ex.solve_oracle(cfg, mdp)
    with ex.stage("eval"):
        policy = np.exp(log_softmax(ex.load_policy(args.policy)))
        _emit(ex.evaluate(policy, mdp, sol))


def cmd_run(args, extra):
    record = ex.run(_config(args, extra), out_dir=args.out)
    _emit(record.to_dict())


def cmd_sweep(args, extra):
    records = ex.sweep(_config(args, extra), args.axis, args.values, out_dir=args.out, jobs=args.jobs)
    _emit([r.to_dict() for r in records])


def build_parser():
    parser = argparse.ArgumentParser(prog="cpl-lab", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("template", help="print the full config schema with defaults")
    p.add_argument("--out", help="write to a file instead of stdout")
    p.set_defaults(func=cmd_template)

    def with_config(name, help_text, seed_required=False, seed=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="config file")
        if seed:
            p.add_argument("--seed", type=int, required=seed_required,
                           help="root seed (overrides data.seed)")
        return p

    p = with_config("solve", "solve the soft-optimal policy of the configured MDP", seed=False)
    p.add_argument("--out", required=True, help="SoftSolution JSON path")
    p.add_argument("--mdp-out", help="also write the MDP as JSON")
    p.set_defaults(func=cmd_solve)

    p = with_config("gen-data", "generate a labeled preference dataset", seed_required=True)
    p.add_argument("--out", required=True, help="dataset JSONL path")
    p.set_defaults(func=cmd_gen_data)

    p = with_config("train", "train the configured method on a dataset file")
    p.add_argument("--data", required=True, help="dataset JSONL path")
    p.add_argument("--out", required=True, help="policy JSON path")
    p.add_argument("--trace", help="training trace CSV path")
    p.set_defaults(func=cmd_train)

    p = with_config("eval", "evaluate a policy file against the oracle", seed=False)
    p.add_argument("--policy", required=True, help="policy JSON path")
    p.set_defaults(func=cmd_eval)

    p = with_config("run", "run the full pipeline")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    p.set_defaults(func=cmd_run)

    p = with_config("sweep", "run the pipeline once per value of one field")
    p.add_argument("--axis", required=True, help="scalar config field to vary")
    p.add_argument("--values", required=True, nargs="+", help="values for the axis")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--out", help="sweep output directory")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    if args.command == "template" and extra:
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    try:
        args.func(args, extra)
    except StageError as exc:
        print(f"cpl-lab {args.command}: error {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"cpl-lab {args.command}: error [config] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
