"""Iterative generate -> SFT -> Step-APO -> value-fit loop and greedy evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import prefdata
from . import value_model as vm
from ._validation import check_interval, check_positive
from .env import make_env
from .exceptions import CPLError, ConfigurationError, DegenerateRoundError, PreconditionError
from .mcts import SearchConfig, search_many
from .policy import FEATURE_DIM, PolicyParams, PolicySnapshot, greedy_action, save_checkpoint
from .train import TrainConfig, apo_fit, dpo_fit, sft_fit

log = logging.getLogger(__name__)

VARIANTS = ("step-dpo", "instance-dpo")


@dataclass
class ValueFitConfig:
    epochs: int = 300
    lr: float = 0.2

    def __post_init__(self):
        check_positive("epochs", self.epochs, integer=True)
        check_positive("lr", self.lr)


def _default_search():
    # round 1 runs twice the simulations of later rounds
    return [SearchConfig(n_simulations=400, inner_children=2),
            SearchConfig(n_simulations=200, inner_children=2)]


@dataclass
class ExperimentConfig:
    env: str = "arith"
    difficulty: str = "mixed"
    n_train: int = 200
    n_heldout: int = 100
    rounds: int = 2
    round1_fraction: float = 0.5
    search: list = field(default_factory=_default_search)
    sft: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.05, epochs=2))
    apo: TrainConfig = field(default_factory=lambda: TrainConfig(lr=0.05, epochs=3))
    value: ValueFitConfig = field(default_factory=ValueFitConfig)
    pair_strategy: str = "AllPlans_OneSolution"
    variants: list = field(default_factory=list)
    strategies: list = field(default_factory=list)
    max_per_problem: int = 4
    feature_dim: int = FEATURE_DIM
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        check_positive("rounds", self.rounds, integer=True)
        check_positive("n_train", self.n_train, integer=True)
        check_positive("n_heldout", self.n_heldout, integer=True)
        check_interval("round1_fraction", self.round1_fraction, 0.0, 1.0, closed_low=False)
        self.search = [s if isinstance(s, SearchConfig) else SearchConfig(**s)
                       for s in self.search]
        if not self.search:
            raise ConfigurationError("at least one SearchConfig is required")
        for name in ("sft", "apo"):
            v = getattr(self, name)
            if isinstance(v, dict):
                setattr(self, name, TrainConfig(**v))
        if isinstance(self.value, dict):
            self.value = ValueFitConfig(**self.value)
        prefdata.PairStrategy.parse(self.pair_strategy)
        for s in self.strategies:
            prefdata.PairStrategy.parse(s)
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigurationError(f"unknown variant {v!r}; expected one of {VARIANTS}")

    def search_for(self, round_idx):
        cfg = self.search[min(round_idx, len(self.search)) - 1]
        return SearchConfig(**{**asdict(cfg), "rng_seed": self.seed * 1000 + cfg.rng_seed
                               + round_idx})

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        text = Path(path).read_text()
        try:
            doc = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigurationError(f"{path} must hold a mapping")
        return cls.from_dict(doc)


@dataclass
class RoundReport:
    round: int
    n_problems: int
    stats: prefdata.DatasetStats
    sft_report: dict
    apo_report: dict
    accuracy: dict
    strategy_accuracy: dict = field(default_factory=dict)
    strategy_stats: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        d["stats"] = self.stats.to_dict()
        return d


@dataclass
class RoundResult:
    policies: dict
    value: vm.ValueParams
    report: RoundReport
    trees: list
    pairs: list
    sft: list


@dataclass
class ExperimentReport:
    config: dict
    rounds: list
    artifacts: dict = field(default_factory=dict)

    def accuracy_table(self):
        """Rows ``(variant, [accuracy per round or None])``."""
        names = []
        for r in self.rounds:
            for k in r.accuracy:
                if k not in names:
                    names.append(k)
        return [(k, [r.accuracy.get(k) for r in self.rounds]) for k in names]

    def render_table(self):
        head = "| Variant | " + " | ".join(f"Round {r.round}" for r in self.rounds) + " |"
        lines = [head, "|---|" + "---|" * len(self.rounds)]
        for name, accs in self.accuracy_table():
            cells = ["-" if a is None else f"{100 * a:.1f}" for a in accs]
            lines.append(f"| {name} | " + " | ".join(cells) + " |")
        return "\n".join(lines)

    def stats_table(self):
        return prefdata.render_stats_table([(r.round, r.stats) for r in self.rounds])

    def to_dict(self):
        return {"config": self.config, "rounds": [r.to_dict() for r in self.rounds],
                "artifacts": self.artifacts}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def evaluate_policy(policy, problems, env=None):
    """Greedy accuracy: follow argmax candidates from the empty state to a terminal."""
    if not problems:
        raise PreconditionError("evaluate_policy needs at least one problem")
    correct = 0
    for problem in problems:
        e = env or make_env(problem.env)
        state = e.initial_state(problem)
        while not e.is_terminal(state):
            state = e.apply(state, greedy_action(policy, state, e.candidate_actions(state)))
        correct += e.verify(problem, state).correct
    return correct / len(problems)


def make_problem_sets(cfg):
    env = make_env(cfg.env, max_depth=cfg.search[0].max_depth)
    train = env.generate_problems(cfg.seed * 2 + 1, cfg.n_train, cfg.difficulty)
    heldout = env.generate_problems(cfg.seed * 2 + 2, cfg.n_heldout, cfg.difficulty)
    return train, heldout


def round_problems(cfg, train, round_idx):
    if round_idx == 1 and cfg.rounds > 1:
        return train[: max(1, math.ceil(cfg.round1_fraction * len(train)))]
    return train


def run_round(cfg, round_idx, base_policy, value, heldout, train, search_policy=None):
    """One generation + training round.

    Trees are grown with ``search_policy`` (the previous round's final policy,
    ``base_policy`` in round 1). SFT always starts from ``base_policy``;
    Step-APO starts from the SFT result and uses it as the frozen reference.
    """
    if round_idx < 1:
        raise PreconditionError("round_idx must be >= 1")
    search_policy = search_policy if search_policy is not None else base_policy
    problems = round_problems(cfg, train, round_idx)
    search_cfg = cfg.search_for(round_idx)
    log.info("round %d: searching %d problems x %d simulations", round_idx, len(problems),
             search_cfg.n_simulations)
    trees = search_many(problems, search_policy, value, search_cfg, n_jobs=cfg.n_jobs)

    seed = cfg.seed * 1000 + round_idx
    sft_data = prefdata.extract_sft(trees, cfg.max_per_problem, seed=seed)
    if not sft_data:
        raise DegenerateRoundError(
            f"round {round_idx}: no correct path in any tree; use an easier difficulty "
            f"or more simulations")
    pairs = prefdata.extract_all_pairs(trees, cfg.pair_strategy, seed=seed)
    stats = prefdata.compute_stats(trees, pairs)

    sft_params, sft_report = sft_fit(base_policy, sft_data, cfg.sft, return_report=True)
    ref = PolicySnapshot.of(sft_params)
    policies = {"base": base_policy, "sft": sft_params}
    apo_report = {}
    if pairs:
        policies["step-apo"], rep = apo_fit(sft_params, ref, pairs, cfg.apo, "step-apo")
        apo_report = rep.to_dict()
    else:
        policies["step-apo"] = sft_params

    strategy_accuracy, strategy_stats = {}, {}
    if round_idx == 1:
        if "step-dpo" in cfg.variants and pairs:
            policies["step-dpo"], _ = apo_fit(sft_params, ref, pairs, cfg.apo, "step-dpo")
        if "instance-dpo" in cfg.variants:
            traj_pairs = prefdata.extract_instance_pairs(trees, cfg.max_per_problem, seed=seed)
            if traj_pairs:
                policies["instance-dpo"], _ = dpo_fit(sft_params, ref, traj_pairs, cfg.apo)
        for name in cfg.strategies:
            spairs = prefdata.extract_all_pairs(trees, name, seed=seed)
            strategy_stats[name] = prefdata.compute_stats(trees, spairs).to_dict()
            sp = apo_fit(sft_params, ref, spairs, cfg.apo, "step-apo")[0] if spairs \
                else sft_params
            strategy_accuracy[name] = evaluate_policy(sp, heldout)

    labels = [lab for t in trees for lab in t.value_labels()]
    new_value, _ = vm.fit(vm.ValueParams.zeros(cfg.feature_dim), labels, cfg.value.epochs,
                          cfg.value.lr)
    new_value.round = round_idx

    accuracy = {name: evaluate_policy(p, heldout) for name, p in policies.items()}
    report = RoundReport(round_idx, len(problems), stats, sft_report.to_dict(), apo_report,
                         accuracy, strategy_accuracy, strategy_stats)
    return RoundResult(policies, new_value, report, trees, pairs, sft_data)


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, paths):
    out_dir = Path(out_dir)
    entries = {str(Path(p).relative_to(out_dir)): _sha256(p) for p in sorted(map(str, paths))}
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps({"artifacts": entries}, sort_keys=True, indent=1))
    return manifest


def run_experiment(cfg, out_dir=None):
    """Run every round; optionally persist artifacts under ``out_dir``."""
    train, heldout = make_problem_sets(cfg)
    train_ids = {p.id for p in train}
    if train_ids & {p.id for p in heldout}:
        raise ConfigurationError("held-out problems overlap the training set")
    base = PolicyParams.zeros(cfg.feature_dim)
    value = vm.ValueParams.zeros(cfg.feature_dim)
    search_policy = base
    reports, written = [], []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        from .env import save_problems
        out.mkdir(parents=True, exist_ok=True)
        save_problems(train, out / "train_problems.jsonl")
        save_problems(heldout, out / "heldout_problems.jsonl")
        written += [out / "train_problems.jsonl", out / "heldout_problems.jsonl"]
    for r in range(1, cfg.rounds + 1):
        try:
            result = run_round(cfg, r, base, value, heldout, train, search_policy)
        except CPLError as exc:
            raise type(exc)(f"round {r}: {exc}") from exc
        reports.append(result.report)
        search_policy = result.policies["step-apo"]
        value = result.value
        if out is not None:
            written += _write_round(out, r, result)
    report = ExperimentReport(cfg.to_dict(), reports)
    if out is not None:
        report.artifacts = {str(Path(p).relative_to(out)): _sha256(p) for p in written}
        (out / "report.json").write_text(report.to_json())
        (out / "accuracy_table.md").write_text(report.render_table() + "\n")
        (out / "data_statistics.md").write_text(report.stats_table() + "\n")
        written += [out / "report.json", out / "accuracy_table.md", out / "data_statistics.md"]
        write_manifest(out, written)
    return report


def _write_round(out, r, result):
    d = out / f"round{r}"
    d.mkdir(exist_ok=True)
    files = []
    with (d / "trees.jsonl").open("w") as fh:
        for t in result.trees:
            fh.write(t.dumps() + "\n")
    files.append(d / "trees.jsonl")
    prefdata.save_pairs(result.pairs, d / "pairs.jsonl")
    prefdata.save_sft(result.sft, d / "sft.jsonl")
    vm.save_labels([lab for t in result.trees for lab in t.value_labels()],
                   d / "value_labels.jsonl")
    files += [d / "pairs.jsonl", d / "sft.jsonl", d / "value_labels.jsonl"]
    for name, params in result.policies.items():
        path = d / f"policy_{name}.json"
        save_checkpoint(params, path, kind="policy")
        files.append(path)
    save_checkpoint(result.value, d / "value.json", kind="value")
    files.append(d / "value.json")
    return files
