"""Acceptance suite: one test per primary criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the lines are also
collected into the terminal summary of a normal run.
"""

import math
import time
from collections import Counter

import numpy as np
import pytest

from cplearn import prefdata as pd
from cplearn import train as tr
from cplearn.env import ArithChain
from cplearn.genadapter import AdapterConfig, MockGenServer, RemoteProposer
from cplearn.mcts import SearchConfig
from cplearn.pipeline import ExperimentConfig, run_experiment
from cplearn.policy import PolicyParams, _combine

from conftest import ACCEPTANCE_LINES
from oracles import (brute_force_pairs, check_search, fd_check, hand_tree, random_pair,
                     random_params, random_search_case, random_trajectory)

DIM = 2 ** 12
TREND_SEEDS = range(10)
STRATEGIES = [s.value for s in pd.PairStrategy]


def verdict(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def _with(params, w):
    return PolicyParams(w, params.feature_dim)


# -- 1 ---------------------------------------------------------------------------------

def test_criterion_1_gradient_oracles():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = {}

    def record(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for _ in range(100):
        theta, ref = random_params(rng, DIM), random_params(rng, DIM).snapshot()
        pair = random_pair(rng)
        record("step-apo", fd_check(lambda w: tr.step_apo_loss(pair, _with(theta, w), ref),
                                    tr.step_apo_grad(pair, theta, ref), theta.weights, rng))
        record("step-dpo", fd_check(lambda w: tr.step_dpo_loss(pair, _with(theta, w), ref),
                                    tr.step_dpo_grad(pair, theta, ref), theta.weights, rng))
        tw, tl = random_trajectory(rng), random_trajectory(rng, correct=False)
        record("dpo", fd_check(lambda w: tr.dpo_loss(tw, tl, _with(theta, w), ref),
                               tr.dpo_grad(tw, tl, theta, ref), theta.weights, rng))
        trajs = [random_trajectory(rng) for _ in range(2)]
        dense = tr.nll_grad(theta, trajs)
        idx = np.flatnonzero(dense)
        record("sft-nll", fd_check(lambda w: tr.nll_loss(_with(theta, w), trajs),
                                   _combine(idx, dense[idx], DIM), theta.weights, rng))
    elapsed = time.perf_counter() - start
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 30
    detail = ", ".join(f"{k} max rel {v:.1e}" for k, v in worst.items())
    verdict(1, ok, f"{detail}; {elapsed:.1f}s")


# -- 2 ---------------------------------------------------------------------------------

def test_criterion_2_reduction_identity():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        theta, ref = random_params(rng, DIM), random_params(rng, DIM).snapshot()
        pair = random_pair(rng, v_equal=True)
        cfg = tr.TrainConfig(beta=float(rng.uniform(0.05, 2.0)),
                             solution_scale=float(rng.uniform(0.01, 1.0)))
        worst = max(worst, abs(tr.step_apo_loss(pair, theta, ref, cfg)
                               - tr.step_dpo_loss(pair, theta, ref, cfg.beta)))
    verdict(2, worst < 1e-12, f"max |step-apo - step-dpo| = {worst:.1e} over 1000 pairs")


# -- 3 ---------------------------------------------------------------------------------

def test_criterion_3_closed_form_values():
    theta = random_params(np.random.default_rng(3), DIM)
    ref = theta.snapshot()
    base = random_pair(np.random.default_rng(4), kind="plan")
    equal = pd.PreferencePair(**{**base.__dict__, "v_chosen": 0.3, "v_rejected": 0.3})
    sol = pd.PreferencePair(**{**base.__dict__, "kind": "solution", "v_chosen": 1.0,
                               "v_rejected": -1.0})
    a = tr.step_apo_loss(equal, theta, ref)
    b = tr.step_apo_loss(sol, theta, ref, tr.TrainConfig(solution_scale=0.3))
    want = -math.log(1.0 / (1.0 + math.exp(0.6)))
    ok = abs(a - math.log(2)) < 1e-12 and abs(b - want) < 1e-9
    verdict(3, ok, f"equal values {a:.12f} (ln2 {math.log(2):.12f}); "
                   f"solution gap 2 {b:.9f} (want {want:.9f})")


# -- 4 ---------------------------------------------------------------------------------

def test_criterion_4_mcts_invariants():
    rng = np.random.default_rng(0)
    problems = ArithChain().generate_problems(0, 50, "mixed")
    start = time.perf_counter()
    counts = Counter()
    for _ in range(1000):
        problem, cfg, policy = random_search_case(rng, problems, dim=DIM)
        _, hook, bad, same = check_search(problem, cfg, policy)
        counts["searches"] += 1
        counts["decisions"] += hook.decisions
        counts["violations"] += len(bad)
        counts["puct_mismatch"] += hook.mismatches
        counts["nondeterministic"] += not same
    elapsed = time.perf_counter() - start
    ok = (counts["violations"] == counts["puct_mismatch"] == counts["nondeterministic"] == 0
          and elapsed < 120)
    verdict(4, ok, f"{counts['searches']} searches, {counts['decisions']} PUCT decisions, "
                   f"{counts['violations']} invariant violations, "
                   f"{counts['puct_mismatch']} argmax mismatches, "
                   f"{counts['nondeterministic']} non-reproducible; {elapsed:.1f}s")


# -- 5 ---------------------------------------------------------------------------------

def random_hand_tree(rng):
    n_plans = int(rng.integers(2, 8))
    values = []
    for _ in range(n_plans):
        r = rng.random()
        values.append(None if r < 0.15 else 0.0 if r < 0.3 else
                      float(np.round(rng.uniform(-1, 1), 3)) or 0.5)
    verdicts = [True] * int(rng.integers(0, 2)) + [False] * int(rng.integers(0, 3))
    rng.shuffle(verdicts)
    return hand_tree(values, tuple(verdicts), seed=int(rng.integers(1000)))


def test_criterion_5_pair_extraction():
    rng = np.random.default_rng(5)
    problems = 0
    for _ in range(300):
        tree = random_hand_tree(rng)
        for strategy in STRATEGIES:
            got = pd.extract_pairs(tree, strategy, seed=int(rng.integers(100)))
            got_t = {(p.state_key, p.candidates[p.chosen_idx], p.candidates[p.rejected_idx],
                      p.kind) for p in got}
            exact, choice = brute_force_pairs(tree, strategy)
            picked = got_t - exact
            if not (exact <= got_t and len(got_t) == len(got) and len(picked) == len(choice)
                    and all(len(picked & c) == 1 for c in choice)):
                problems += 1
            excluded = {(n.state.key(), c.incoming_action.display) for n in tree.nodes()
                        for c in n.children if c.N == 0 or c.V == 0}
            if any((p.state_key, p.candidates[i]) in excluded
                   for p in got for i in (p.chosen_idx, p.rejected_idx)):
                problems += 1
            per_parent = Counter(p.state_key for p in got if p.kind == "solution")
            if strategy.endswith("OneSolution") and any(v > 1 for v in per_parent.values()):
                problems += 1
            if strategy.startswith("AllPlans"):
                for node in tree.nodes():
                    vals = [c.V for c in node.children if c.N >= 1
                            and c.incoming_action.kind.value == "plan"]
                    want = sum(v > 0 for v in vals) * sum(v < 0 for v in vals)
                    have = sum(1 for p in got if p.kind == "plan"
                               and p.state_key == node.state.key())
                    problems += want != have
    verdict(5, problems == 0, f"300 hand-valued trees x 4 strategies, {problems} mismatches "
                              f"against the brute-force enumerator")


# -- 6, 7, 8 -------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trend_runs():
    start = time.perf_counter()
    reports = []
    for seed in TREND_SEEDS:
        cfg = ExperimentConfig(seed=seed, variants=["step-dpo", "instance-dpo"],
                               strategies=STRATEGIES)
        reports.append(run_experiment(cfg))
    return reports, time.perf_counter() - start


def _mean(values):
    return float(np.mean(values))


def test_criterion_6_end_to_end_trend(trend_runs):
    reports, elapsed = trend_runs
    acc = {k: _mean([r.rounds[0].accuracy[k] for r in reports])
           for k in ("sft", "step-apo", "step-dpo", "instance-dpo")}
    apo2 = _mean([r.rounds[1].accuracy["step-apo"] for r in reports])
    gain = acc["step-apo"] - acc["sft"]
    checks = {"a": gain >= 0.05, "b": acc["step-apo"] >= acc["step-dpo"],
              "c": apo2 >= acc["step-apo"], "time": elapsed < 15 * 60}
    verdict(6, all(checks.values()),
            f"R1 sft {acc['sft']:.3f}, step-apo {acc['step-apo']:.3f} "
            f"(+{100 * gain:.1f}pp), step-dpo {acc['step-dpo']:.3f}, "
            f"instance-dpo {acc['instance-dpo']:.3f}; R2 step-apo {apo2:.3f}; "
            f"checks {checks}; {elapsed:.0f}s for {len(reports)} seeds")


def test_criterion_7_strategy_ablation(trend_runs):
    reports, _ = trend_runs
    table = {s: _mean([r.rounds[0].strategy_accuracy[s] for r in reports]) for s in STRATEGIES}
    print("| Strategy | Mean accuracy |")
    print("|---|---|")
    for s, a in table.items():
        print(f"| {s} | {100 * a:.1f} |")
    ok = table["AllPlans_OneSolution"] >= table["OnePlan_OneSolution"]
    verdict(7, ok, ", ".join(f"{s} {a:.3f}" for s, a in table.items()))


def test_criterion_8_dataset_statistics(trend_runs):
    reports, _ = trend_runs
    table = reports[0].stats_table()
    header = [c.strip() for c in table.splitlines()[0].strip("|").split("|")]
    shape_ok = header == ["Round Num", "Avg Depths", "Pos:Neg", "Plan Pairs Count",
                          "Solution Pairs Count"] and len(table.splitlines()) == 4
    print(table)

    def ratio(r):
        pos = sum(rep.rounds[r].stats.pos_count for rep in reports)
        neg = sum(rep.rounds[r].stats.neg_count for rep in reports)
        return pos / max(neg, 1)

    r1, r2 = ratio(0), ratio(1)
    verdict(8, shape_ok and r2 > r1,
            f"table shape {'ok' if shape_ok else 'wrong'}; pos:neg R1 {r1:.3f} -> R2 {r2:.3f}")


# -- 9 ---------------------------------------------------------------------------------

def test_criterion_9_adapter_conformance():
    rng = np.random.default_rng(9)
    problems = ArithChain().generate_problems(9, 20, "mixed")
    counts = Counter()
    with MockGenServer() as srv:
        proposer = RemoteProposer(AdapterConfig(srv.url))
        for _ in range(40):
            problem, cfg, policy = random_search_case(rng, problems, dim=DIM)
            cfg = SearchConfig(**{**cfg.__dict__, "n_simulations": min(cfg.n_simulations, 60)})
            _, hook, bad, same = check_search(problem, cfg, policy, proposer=proposer)
            counts["searches"] += 1
            counts["violations"] += len(bad)
            counts["puct_mismatch"] += hook.mismatches
            counts["nondeterministic"] += not same
        counts["requests"] = len(srv.requests)
    ok = counts["requests"] > 0 and counts["violations"] == counts["puct_mismatch"] == \
        counts["nondeterministic"] == 0
    verdict(9, ok, f"{counts['searches']} searches through the mock generator "
                   f"({counts['requests']} requests), {counts['violations']} violations, "
                   f"{counts['puct_mismatch']} argmax mismatches, "
                   f"{counts['nondeterministic']} non-reproducible")
