"""Command-line entry point: ``cplearn <command> [options]``.

Exit status is 0 on success, 1 for usage or configuration errors and 2 for
runtime failures such as divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import prefdata
from . import value_model as vm
from .env import load_problems, make_env, save_problems
from .exceptions import CPLError, ConfigurationError, ParseError
from .mcts import PlanTree, run_search, search_many
from .pipeline import (ExperimentConfig, evaluate_policy, make_problem_sets, run_experiment,
                       write_manifest)
from .policy import PolicyParams, PolicySnapshot, load_checkpoint, save_checkpoint
from .train import apo_fit, dpo_fit, sft_fit

log = logging.getLogger("cplearn")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
OBJECTIVES = ("step-apo", "step-dpo", "dpo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _strategy_file(strategy):
    return f"pairs_{prefdata.PairStrategy.parse(strategy).value}.jsonl"


# -- helpers --------------------------------------------------------------------------

def _config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _need(path, what):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _policy(path, dim):
    return load_checkpoint(_need(path, "policy checkpoint"), "policy") if path \
        else PolicyParams.zeros(dim)


def _value(path, dim):
    return load_checkpoint(_need(path, "value checkpoint"), "value") if path \
        else vm.ValueParams.zeros(dim)


def _problems(args, cfg, split="train"):
    if getattr(args, "problems", None):
        return load_problems(_need(args.problems, "problem file"))
    train, heldout = make_problem_sets(cfg)
    return train if split == "train" else heldout


def _emit(obj):
    print(json.dumps(obj, indent=1, sort_keys=True))


# -- commands -------------------------------------------------------------------------

def cmd_gen(args, cfg, out):
    problems = _problems(args, cfg)
    if args.n is not None:
        problems = problems[: args.n]
    search = cfg.search_for(args.round)
    if args.sims is not None:
        search = replace(search, n_simulations=args.sims)
    policy = _policy(args.policy, cfg.feature_dim)
    value = _value(args.value, cfg.feature_dim)
    if args.generator_url:
        from .genadapter import AdapterConfig, RemoteProposer
        proposer = RemoteProposer(AdapterConfig.from_env(
            args.generator_url, max_in_flight=args.max_in_flight))
        env = make_env(cfg.env, max_depth=search.max_depth)
        trees = [run_search(p, policy, value, search, env=env, proposer=proposer)
                 for p in problems]
    else:
        trees = search_many(problems, policy, value, search, n_jobs=cfg.n_jobs)
    seed = cfg.seed * 1000 + args.round
    save_problems(problems, out / "problems.jsonl")
    with (out / "trees.jsonl").open("w") as fh:
        for t in trees:
            fh.write(t.dumps() + "\n")
    sft = prefdata.extract_sft(trees, cfg.max_per_problem, seed=seed)
    prefdata.save_sft(sft, out / "sft.jsonl")
    for s in prefdata.PairStrategy:
        pairs = prefdata.extract_all_pairs(trees, s, seed=seed)
        prefdata.save_pairs(pairs, out / _strategy_file(s))
    pairs = prefdata.extract_all_pairs(trees, cfg.pair_strategy, seed=seed)
    prefdata.save_pairs(pairs, out / "pairs.jsonl")
    prefdata.save_instance_pairs(
        prefdata.extract_instance_pairs(trees, cfg.max_per_problem, seed=seed),
        out / "instance_pairs.jsonl")
    vm.save_labels([lab for t in trees for lab in t.value_labels()], out / "value_labels.jsonl")
    stats = prefdata.compute_stats(trees, pairs)
    (out / "data_statistics.md").write_text(
        prefdata.render_stats_table([(args.round, stats)]) + "\n")
    _emit({"problems": len(problems), "sft_trajectories": len(sft), "pairs": len(pairs),
           "stats": stats.to_dict()})


def cmd_sft(args, cfg, out):
    data = prefdata.load_sft(_need(args.data or out / "sft.jsonl", "SFT data"))
    init = _policy(args.init, cfg.feature_dim)
    params, report = sft_fit(init, data, cfg.sft, return_report=True)
    save_checkpoint(params, out / "policy_sft.json", kind="policy")
    report.to_csv(out / "sft_loss.csv")
    _emit({"trajectories": len(data), "final_loss": report.final_loss})


def cmd_apo(args, cfg, out):
    init = _policy(args.init, cfg.feature_dim)
    ref = PolicySnapshot.of(_policy(args.ref, cfg.feature_dim) if args.ref else init)
    data_dir = Path(args.data_dir) if args.data_dir else out
    if args.objective == "dpo":
        data = prefdata.load_instance_pairs(
            _need(args.pairs or data_dir / "instance_pairs.jsonl", "instance pairs"))
        params, report = dpo_fit(init, ref, data, cfg.apo)
    else:
        default = data_dir / _strategy_file(args.pair_strategy or cfg.pair_strategy)
        data = prefdata.load_pairs(_need(args.pairs or default, "pair data"))
        params, report = apo_fit(init, ref, data, cfg.apo, args.objective)
    name = args.objective.replace("-", "_")
    save_checkpoint(params, out / f"policy_{name}.json", kind="policy")
    report.to_csv(out / f"{name}_loss.csv")
    _emit({"objective": args.objective, "pairs": len(data), "final_loss": report.final_loss})


def cmd_value_fit(args, cfg, out):
    labels = vm.load_labels(_need(args.labels or out / "value_labels.jsonl", "value labels"))
    init = _value(args.init, cfg.feature_dim)
    params, history = vm.fit(init, labels, cfg.value.epochs, cfg.value.lr)
    save_checkpoint(params, out / "value.json", kind="value")
    _emit({"labels": len(labels), "initial_loss": history[0], "final_loss": history[-1]})


def cmd_eval(args, cfg, out):
    policy = _policy(args.policy, cfg.feature_dim)
    problems = _problems(args, cfg, split="heldout")
    acc = evaluate_policy(policy, problems)
    result = {"policy": str(args.policy or "<base>"), "problems": len(problems),
              "accuracy": acc}
    (out / "eval.json").write_text(json.dumps(result, indent=1, sort_keys=True))
    _emit(result)


def cmd_pipeline(args, cfg, out):
    report = run_experiment(cfg, out)
    print(report.render_table())
    print()
    print(report.stats_table())


def _load_trees(path):
    trees = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                try:
                    trees.append(PlanTree.from_dump(json.loads(line)))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise ParseError(str(exc), line=lineno) from exc
    return trees


def cmd_stats(args, cfg, out):
    data_dir = Path(args.data_dir) if args.data_dir else out
    trees = _load_trees(_need(data_dir / "trees.jsonl", "tree dump"))
    pairs = prefdata.load_pairs(_need(args.pairs or data_dir / "pairs.jsonl", "pair data"))
    stats = prefdata.compute_stats(trees, pairs)
    table = prefdata.render_stats_table([(args.round, stats)])
    (out / "data_statistics.md").write_text(table + "\n")
    print(table)


def cmd_dump_tree(args, cfg, out):
    if not args.problems and (out / "problems.jsonl").exists():
        args.problems = str(out / "problems.jsonl")
    problems = _problems(args, cfg)
    match = [p for p in problems if p.id == args.problem]
    if not match:
        raise UsageError(f"unknown problem id {args.problem!r}")
    search = cfg.search_for(args.round)
    tree = run_search(match[0], _policy(args.policy, cfg.feature_dim),
                      _value(args.value, cfg.feature_dim), search)
    text = json.dumps(tree.dump(), indent=1, sort_keys=True)
    (out / f"tree_{args.problem}.json").write_text(text + "\n")
    print(text)


# -- parser ---------------------------------------------------------------------------

def _common(suppress):
    # global flags are accepted before or after the subcommand
    parser = _Parser(add_help=False)
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--config", help="YAML or JSON experiment config", **kw)
    parser.add_argument("--seed", type=int, help="override the config seed", **kw)
    parser.add_argument("--out-dir", help="artifact directory",
                        **(kw or {"default": "cplearn_out"}))
    parser.add_argument("-v", "--verbose", action="store_true", **kw)
    return parser


def build_parser():
    p = _Parser(prog="cplearn", description=__doc__.splitlines()[0], parents=[_common(False)])
    common = _common(True)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="problems -> trees -> datasets")
    g.add_argument("--problems", help="problem JSONL (default: generate from config)")
    g.add_argument("--n", type=int, help="use only the first N problems")
    g.add_argument("--round", type=int, default=1)
    g.add_argument("--sims", type=int, help="override simulations per problem")
    g.add_argument("--policy", help="policy checkpoint for expansion priors")
    g.add_argument("--value", help="value checkpoint for leaf evaluation")
    g.add_argument("--generator-url", help="remote step generator endpoint")
    g.add_argument("--max-in-flight", type=int, help="cap on concurrent generator requests")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("sft", parents=[common], help="supervised fine-tuning")
    s.add_argument("--data", help="SFT JSONL (default: out-dir/sft.jsonl)")
    s.add_argument("--init", help="initial policy checkpoint (default: base)")
    s.set_defaults(func=cmd_sft)

    a = sub.add_parser("apo", parents=[common], help="preference optimization")
    a.add_argument("--objective", choices=OBJECTIVES, default="step-apo")
    a.add_argument("--pair-strategy", choices=[x.value for x in prefdata.PairStrategy])
    a.add_argument("--pairs", help="explicit pair file")
    a.add_argument("--data-dir", help="directory written by gen (default: out-dir)")
    a.add_argument("--init", help="initial policy checkpoint (default: base)")
    a.add_argument("--ref", help="reference policy checkpoint (default: --init)")
    a.set_defaults(func=cmd_apo)

    v = sub.add_parser("value-fit", parents=[common], help="fit the value model")
    v.add_argument("--labels", help="value-label JSONL")
    v.add_argument("--init", help="initial value checkpoint (default: zeros)")
    v.set_defaults(func=cmd_value_fit)

    e = sub.add_parser("eval", parents=[common], help="greedy held-out accuracy")
    e.add_argument("--policy", help="policy checkpoint (default: base)")
    e.add_argument("--problems", help="problem JSONL (default: held-out split)")
    e.set_defaults(func=cmd_eval)

    pl = sub.add_parser("pipeline", parents=[common], help="full multi-round run")
    pl.set_defaults(func=cmd_pipeline)

    st = sub.add_parser("stats", parents=[common], help="dataset statistics table")
    st.add_argument("--data-dir", help="directory written by gen (default: out-dir)")
    st.add_argument("--pairs", help="explicit pair file")
    st.add_argument("--round", type=int, default=1)
    st.set_defaults(func=cmd_stats)

    d = sub.add_parser("dump-tree", parents=[common], help="search one problem, print tree")
    d.add_argument("--problem", required=True, help="problem id")
    d.add_argument("--problems", help="problem JSONL (default: generate from config)")
    d.add_argument("--round", type=int, default=1)
    d.add_argument("--policy")
    d.add_argument("--value")
    d.set_defaults(func=cmd_dump_tree)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _config(args)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        args.func(args, cfg, out)
        files = [p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"]
        write_manifest(out, files)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, ParseError) as exc:
        print(f"cplearn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CPLError, ArithmeticError, OSError) as exc:
        print(f"cplearn: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
