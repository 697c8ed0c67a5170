"""Turn finished plan trees into SFT trajectories, step preference pairs and stats.

Pairs are formed between visited siblings. Plan steps are preferred when the
child's value is positive and dispreferred when it is negative; solution steps
are labelled by their terminal verdict.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from itertools import product
from pathlib import Path

import numpy as np

from .env import ActionKind
from .exceptions import ConfigurationError, ParseError, PreconditionError

FORMAT_VERSION = 1


class PairStrategy(str, Enum):
    ALL_PLANS_ONE_SOLUTION = "AllPlans_OneSolution"
    ONE_PLAN_ONE_SOLUTION = "OnePlan_OneSolution"
    ALL_PLANS_ALL_SOLUTIONS = "AllPlans_AllSolutions"
    ONE_PLAN_ALL_SOLUTIONS = "OnePlan_AllSolutions"

    @property
    def all_plans(self):
        return self.value.startswith("AllPlans")

    @property
    def all_solutions(self):
        return self.value.endswith("AllSolutions")

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        for s in cls:
            if value in (s.value, s.name, s.value.lower()):
                return s
        raise ConfigurationError(
            f"unknown pair strategy {value!r}; expected one of {[s.value for s in cls]}")


@dataclass(frozen=True)
class Step:
    """A decision point: the state's context, the candidate universe and a choice.

    ``candidate_tags`` and ``context`` carry what the featurizer needs so a
    persisted step can be trained on without rebuilding the environment.
    """

    state_key: str
    context: tuple
    candidates: tuple
    candidate_tags: tuple
    chosen_idx: int

    def candidate_tokens(self):
        return [(d,) + tuple(t) for d, t in zip(self.candidates, self.candidate_tags)]


@dataclass(frozen=True)
class PreferencePair:
    problem_id: str
    state_key: str
    context: tuple
    candidates: tuple
    candidate_tags: tuple
    chosen_idx: int
    rejected_idx: int
    v_chosen: float
    v_rejected: float
    kind: str

    def __post_init__(self):
        if self.chosen_idx == self.rejected_idx:
            raise PreconditionError("chosen and rejected must differ")
        n = len(self.candidates)
        if not (0 <= self.chosen_idx < n and 0 <= self.rejected_idx < n):
            raise PreconditionError("pair indices out of range")

    def candidate_tokens(self):
        return [(d,) + tuple(t) for d, t in zip(self.candidates, self.candidate_tags)]

    def to_dict(self):
        d = asdict(self)
        d["context"] = list(self.context)
        d["candidates"] = list(self.candidates)
        d["candidate_tags"] = [list(t) for t in self.candidate_tags]
        d["format_version"] = FORMAT_VERSION
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(problem_id=str(d["problem_id"]), state_key=str(d["state_key"]),
                   context=tuple(d.get("context", ())),
                   candidates=tuple(str(c) for c in d["candidates"]),
                   candidate_tags=tuple(tuple(t) for t in
                                        d.get("candidate_tags", [()] * len(d["candidates"]))),
                   chosen_idx=int(d["chosen_idx"]), rejected_idx=int(d["rejected_idx"]),
                   v_chosen=float(d["v_chosen"]), v_rejected=float(d["v_rejected"]),
                   kind=str(d["kind"]))


@dataclass(frozen=True)
class SftTrajectory:
    problem_id: str
    steps: tuple
    correct: bool = True

    def to_dict(self):
        return {"format_version": FORMAT_VERSION, "problem_id": self.problem_id,
                "correct": self.correct,
                "steps": [{"state_key": s.state_key, "context": list(s.context),
                           "candidates": list(s.candidates),
                           "candidate_tags": [list(t) for t in s.candidate_tags],
                           "chosen_idx": s.chosen_idx} for s in self.steps]}

    @classmethod
    def from_dict(cls, d):
        steps = tuple(Step(str(s["state_key"]), tuple(s.get("context", ())),
                           tuple(s["candidates"]),
                           tuple(tuple(t) for t in
                                 s.get("candidate_tags", [()] * len(s["candidates"]))),
                           int(s["chosen_idx"])) for s in d["steps"])
        return cls(str(d["problem_id"]), steps, bool(d.get("correct", True)))


@dataclass
class DatasetStats:
    avg_depth: float
    pos_count: int
    neg_count: int
    plan_pair_count: int
    solution_pair_count: int

    @property
    def pos_neg_ratio(self):
        return self.pos_count / self.neg_count if self.neg_count else float("inf")

    def ratio_label(self):
        if self.pos_count == 0:
            return "0:1"
        return f"1:{self.neg_count / self.pos_count:.2f}"

    def to_dict(self):
        d = asdict(self)
        d["pos_neg_ratio"] = self.pos_neg_ratio
        return d


STATS_HEADER = ("Round Num", "Avg Depths", "Pos:Neg", "Plan Pairs Count",
                "Solution Pairs Count")


def render_stats_table(rows):
    """Markdown table of ``(round, DatasetStats)`` rows."""
    lines = ["| " + " | ".join(STATS_HEADER) + " |",
             "|" + "|".join("---" for _ in STATS_HEADER) + "|"]
    for rnd, st in rows:
        lines.append(f"| Round {rnd} | {st.avg_depth:.2f} | {st.ratio_label()} | "
                     f"{st.plan_pair_count} | {st.solution_pair_count} |")
    return "\n".join(lines)


# -- extraction ---------------------------------------------------------------------

def _step_at(node, chosen):
    cands = node.candidates
    displays = tuple(a.display for a in cands)
    return Step(node.state.key(), tuple(node.state.context), displays,
                tuple(tuple(a.tags) for a in cands), displays.index(chosen.display))


def trajectory_of(leaf, problem_id):
    path = leaf.path_from_root()
    steps = tuple(_step_at(node, child.incoming_action) for node, child in zip(path, path[1:]))
    correct = leaf.terminal_verdict is not None and leaf.terminal_verdict.correct
    return SftTrajectory(problem_id, steps, correct)


def extract_trajectories(tree, correct=True, max_per_problem=4, rng=None):
    """Up to ``max_per_problem`` distinct visited root-to-terminal paths."""
    leaves = [n for n in tree.terminals()
              if n.terminal_verdict is not None and n.terminal_verdict.correct == correct]
    if rng is None:
        rng = np.random.default_rng(0)
    if len(leaves) > max_per_problem:
        picks = sorted(rng.choice(len(leaves), size=max_per_problem, replace=False))
        leaves = [leaves[i] for i in picks]
    return [trajectory_of(leaf, tree.problem.id) for leaf in leaves]


def extract_sft(trees, max_per_problem=4, seed=0):
    if max_per_problem < 1:
        raise PreconditionError("max_per_problem must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for tree in trees:
        out.extend(extract_trajectories(tree, True, max_per_problem, rng))
    return out


def _pair(node, problem_id, w, l, kind):
    cands = node.candidates
    displays = tuple(a.display for a in cands)
    return PreferencePair(problem_id, node.state.key(), tuple(node.state.context), displays,
                          tuple(tuple(a.tags) for a in cands),
                          displays.index(w.incoming_action.display),
                          displays.index(l.incoming_action.display),
                          float(w.V), float(l.V), kind)


def sibling_pairs(children, strategy, rng):
    """(winner, loser, kind) child triples for one sibling group."""
    strategy = PairStrategy.parse(strategy)
    visited = [c for c in children if c.N >= 1]
    plans = [c for c in visited if c.incoming_action.kind == ActionKind.PLAN]
    sols = [c for c in visited if c.incoming_action.kind == ActionKind.SOLUTION
            and c.terminal_verdict is not None]
    out = []
    pos = [c for c in plans if c.V > 0]
    neg = [c for c in plans if c.V < 0]
    if pos and neg:
        if strategy.all_plans:
            out.extend((w, l, "plan") for w, l in product(pos, neg))
        else:
            w = max(pos, key=lambda c: c.V)
            l = min(neg, key=lambda c: c.V)
            out.append((w, l, "plan"))
    good = [c for c in sols if c.terminal_verdict.correct]
    bad = [c for c in sols if not c.terminal_verdict.correct]
    if good and bad:
        if strategy.all_solutions:
            out.extend((w, l, "solution") for w, l in product(good, bad))
        else:
            out.append((good[int(rng.integers(len(good)))],
                        bad[int(rng.integers(len(bad)))], "solution"))
    return out


def extract_pairs(tree, strategy=PairStrategy.ALL_PLANS_ONE_SOLUTION, rng=None, seed=0):
    strategy = PairStrategy.parse(strategy)
    if rng is None:
        rng = np.random.default_rng(seed)
    out = []
    for node in tree.root.iter_preorder():
        if not node.expanded:
            continue
        for w, l, kind in sibling_pairs(node.children, strategy, rng):
            out.append(_pair(node, tree.problem.id, w, l, kind))
    return out


def extract_all_pairs(trees, strategy=PairStrategy.ALL_PLANS_ONE_SOLUTION, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for tree in trees:
        out.extend(extract_pairs(tree, strategy, rng=rng))
    return out


def extract_instance_pairs(trees, max_per_problem=4, seed=0):
    """(correct, incorrect) full-trajectory pairs for response-level DPO."""
    rng = np.random.default_rng(seed)
    out = []
    for tree in trees:
        good = extract_trajectories(tree, True, max_per_problem, rng)
        bad = extract_trajectories(tree, False, max_per_problem, rng)
        out.extend(zip(good, bad))
    return out


# -- persistence ----------------------------------------------------------------------

def _save_jsonl(records, path):
    with Path(path).open("w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    return len(records)


def _load_jsonl(path, cls):
    out = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(cls.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(str(exc), line=lineno) from exc
    return out


def save_pairs(pairs, path):
    return _save_jsonl(pairs, path)


def load_pairs(path):
    return _load_jsonl(path, PreferencePair)


def save_sft(trajs, path):
    return _save_jsonl(trajs, path)


def load_sft(path):
    return _load_jsonl(path, SftTrajectory)


def save_instance_pairs(traj_pairs, path):
    with Path(path).open("w") as fh:
        for w, l in traj_pairs:
            fh.write(json.dumps({"format_version": FORMAT_VERSION, "chosen": w.to_dict(),
                                 "rejected": l.to_dict()}, sort_keys=True) + "\n")
    return len(traj_pairs)


class _InstancePair:
    @staticmethod
    def from_dict(d):
        return (SftTrajectory.from_dict(d["chosen"]), SftTrajectory.from_dict(d["rejected"]))


def load_instance_pairs(path):
    return _load_jsonl(path, _InstancePair)


# -- statistics -----------------------------------------------------------------------

def compute_stats(trees, pairs):
    depths, pos, neg = [], 0, 0
    for tree in trees:
        for leaf in tree.terminals():
            depths.append(leaf.depth)
            verdict = leaf.terminal_verdict
            if verdict is not None and verdict.correct:
                pos += 1
            else:
                neg += 1
    return DatasetStats(
        avg_depth=float(np.mean(depths)) if depths else 0.0,
        pos_count=pos, neg_count=neg,
        plan_pair_count=sum(1 for p in pairs if p.kind == "plan"),
        solution_pair_count=sum(1 for p in pairs if p.kind == "solution"))
