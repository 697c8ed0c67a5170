"""Independent reference computations shared by unit and acceptance tests."""

import math

import numpy as np

from cplearn.env import ActionKind, ArithChain
from cplearn.mcts import PlanTree, SearchConfig, TreeNode, run_search
from cplearn.policy import PolicyParams


def brute_puct(node, c_puct, priors):
    best, best_score = None, -math.inf
    for i, (child, p) in enumerate(zip(node.children, priors)):
        q = child.Q_edge if child.N > 0 else 0.0
        score = q + c_puct * p * math.sqrt(node.N) / (1 + child.N)
        if score > best_score:
            best, best_score = i, score
    return best


class DecisionRecorder:
    """Search hook that checks every selection against the brute-force argmax."""

    def __init__(self, c_puct):
        self.c_puct = c_puct
        self.decisions = 0
        self.mismatches = 0

    def __call__(self, node, priors, idx):
        self.decisions += 1
        self.mismatches += brute_puct(node, self.c_puct, priors) != idx


def invariant_violations(tree, tol=1e-9):
    """Messages for every broken tree invariant (empty list when the tree is sound)."""
    bad = []
    for node in tree.root.iter_preorder():
        for x, name in ((node.V, "V"), (node.Q_edge, "Q_edge")):
            if not -1.0 - 1e-12 <= x <= 1.0 + 1e-12:
                bad.append(f"{name}={x} out of range")
        visited = [c for c in node.children if c.N > 0]
        if node.expanded and visited:
            mean = sum(c.N * c.Q_edge for c in visited) / sum(c.N for c in visited)
            if abs(mean - node.V) > tol:
                bad.append(f"V={node.V} but weighted child mean {mean}")
        elif node.expanded and node.N != 1:
            bad.append(f"expanded node with no visited child has N={node.N}")
        for c in visited:
            if abs(c.Q_edge - c.V) > tol:
                bad.append(f"Q_edge {c.Q_edge} != child V {c.V}")
        if node.N != node.leaf_visits + sum(c.N for c in node.children):
            bad.append("visit counts do not add up")
        if node.terminal and node.N and node.V not in (-1.0, 1.0):
            bad.append(f"terminal V={node.V}")
    return bad


def bottom_up_values(dump):
    """Recompute every node's V from a tree dump without the search code."""
    nodes = {rec["id"]: dict(rec, kids=[]) for rec in dump["nodes"]}
    for rec in nodes.values():
        if rec["parent_id"] is not None:
            nodes[rec["parent_id"]]["kids"].append(rec["id"])
    out = {}

    def visit(i):
        rec = nodes[i]
        for k in rec["kids"]:
            visit(k)
        kids = [nodes[k] for k in rec["kids"] if nodes[k]["N"] > 0]
        if rec["terminal"] and rec["N"] > 0:
            out[i] = 1.0 if rec.get("correct") else -1.0
        elif kids:
            out[i] = sum(k["N"] * out[k["id"]] for k in kids) / sum(k["N"] for k in kids)
        else:
            out[i] = rec["V"]

    visit(0)
    return out


def random_search_case(rng, problems, env=None, dim=2 ** 12):
    problem = problems[int(rng.integers(len(problems)))]
    cfg = SearchConfig(c_puct=float(rng.uniform(0.2, 3.0)),
                       n_simulations=int(rng.integers(1, 40)),
                       root_children=int(rng.integers(1, 6)),
                       inner_children=int(rng.integers(1, 4)),
                       temperature=float(rng.uniform(0.3, 1.5)),
                       rng_seed=int(rng.integers(1 << 30)))
    policy = PolicyParams(rng.normal(scale=float(rng.uniform(0, 2)), size=dim), dim)
    return problem, cfg, policy


def check_search(problem, cfg, policy, value=None, env=None, proposer=None):
    """Run one search twice; return (tree, hook, violations, identical_dumps)."""
    hook = DecisionRecorder(cfg.c_puct)
    tree = run_search(problem, policy, value, cfg, env=env, proposer=proposer, hook=hook)
    again = run_search(problem, policy, value, cfg, env=env, proposer=proposer)
    return tree, hook, invariant_violations(tree), tree.dumps() == again.dumps()


def brute_force_pairs(tree, strategy):
    """Enumerate expected (parent_key, chosen_display, rejected_display, kind) tuples.

    For the "one" variants the result is the set of admissible pairs per parent,
    returned as ``{parent_key: set_of_pairs}`` together with the required count.
    """
    all_plans = strategy.startswith("AllPlans")
    all_sols = strategy.endswith("AllSolutions")
    exact, choice = set(), []
    for node in tree.root.iter_preorder():
        kids = [c for c in node.children if c.N >= 1]
        key = node.state.key() if node.state is not None else None
        plan = [(c.incoming_action.display, c.V) for c in kids
                if c.incoming_action.kind.value == "plan"]
        sols = [(c.incoming_action.display, c.terminal_verdict.correct) for c in kids
                if c.incoming_action.kind.value == "solution" and c.terminal_verdict]
        plan_pairs = {(key, a, b, "plan") for a, va in plan for b, vb in plan
                      if va > 0 and vb < 0}
        if all_plans:
            exact |= plan_pairs
        elif plan_pairs:
            top = max(v for _, v in plan if v > 0)
            low = min(v for _, v in plan if v < 0)
            exact |= {(key, a, b, "plan") for a, va in plan for b, vb in plan
                      if va == top and vb == low}
        sol_pairs = {(key, a, b, "solution") for a, ca in sols for b, cb in sols
                     if ca and not cb}
        if all_sols:
            exact |= sol_pairs
        elif sol_pairs:
            choice.append(sol_pairs)
    return exact, choice


# -- random training instances -------------------------------------------------------

def random_step(rng, tag_pool=("target", "feeder", "loose")):
    from cplearn.prefdata import Step
    k = int(rng.integers(2, 6))
    names = rng.choice(40, size=k, replace=False)
    ctx = (f"depth={int(rng.integers(6))}", f"left={int(rng.integers(5))}")
    return Step(state_key=f"s{int(rng.integers(1 << 30))}", context=ctx,
                candidates=tuple(f"compute q{n} next" for n in names),
                candidate_tags=tuple((str(rng.choice(tag_pool)),) for _ in range(k)),
                chosen_idx=int(rng.integers(k)))


def random_pair(rng, kind=None, v_equal=False):
    from cplearn.prefdata import PreferencePair
    step = random_step(rng)
    k = len(step.candidates)
    c, r = (int(i) for i in rng.choice(k, size=2, replace=False))
    vw = float(rng.uniform(0.01, 1))
    vl = vw if v_equal else float(rng.uniform(-1, -0.01))
    return PreferencePair(problem_id="p", state_key=step.state_key, context=step.context,
                          candidates=step.candidates, candidate_tags=step.candidate_tags,
                          chosen_idx=c, rejected_idx=r, v_chosen=vw, v_rejected=vl,
                          kind=kind or str(rng.choice(["plan", "solution"])))


def random_trajectory(rng, problem_id="p", n_steps=None, correct=True):
    from cplearn.prefdata import SftTrajectory
    n = n_steps or int(rng.integers(1, 5))
    return SftTrajectory(problem_id, tuple(random_step(rng) for _ in range(n)), correct)


def random_params(rng, dim, scale=0.5):
    from cplearn.policy import PolicyParams
    return PolicyParams(rng.normal(scale=scale, size=dim), dim)


def fd_check(loss_of_weights, sparse_grad, weights, rng, n_extra=5, h=1e-5):
    """Relative error between a sparse analytic gradient and central differences.

    Checks every index the gradient touches plus a few random untouched ones,
    which must have zero derivative.
    """
    import numpy as np
    idx = list(sparse_grad.indices)
    extra = [int(i) for i in rng.integers(0, len(weights), size=n_extra) if i not in idx]
    coords = idx + extra
    fd = np.zeros(len(coords))
    for j, i in enumerate(coords):
        wp, wm = weights.copy(), weights.copy()
        wp[i] += h
        wm[i] -= h
        fd[j] = (loss_of_weights(wp) - loss_of_weights(wm)) / (2 * h)
    dense = sparse_grad.to_dense()
    an = dense[coords]
    return float(np.linalg.norm(an - fd) / max(np.linalg.norm(an), np.linalg.norm(fd), 1e-12))


def hand_tree(plan_values, sol_verdicts=(), problem_level="expert", seed=0):
    """Root with plan children carrying ``plan_values`` (None = unvisited).

    When ``sol_verdicts`` is given, a solvable state is attached under the
    first child with one solution child per verdict.
    """
    env = ArithChain()
    (p,) = env.generate_problems(seed, 1, problem_level)
    root = TreeNode(env.initial_state(p), expanded=True, N=10)
    root.candidates = env.candidate_actions(root.state)
    plans = [a for a in root.candidates if a.kind == ActionKind.PLAN]
    for a, v in zip(plans, plan_values):
        child = TreeNode(env.apply(root.state, a), parent=root, incoming_action=a, depth=1)
        if v is not None:
            child.N, child.V, child.Q_edge = 2, v, v
        root.children.append(child)
    if sol_verdicts:
        s, last = env.initial_state(p), None
        while not env.solvable(s):
            last = env.reference_action(s)
            s = env.apply(s, last)
        holder = TreeNode(s, parent=root.children[0], incoming_action=last, expanded=True,
                          N=3, depth=s.depth)
        holder.candidates = env.candidate_actions(s)
        root.children[0].children.append(holder)
        good = [a for a in holder.candidates
                if a.kind == ActionKind.SOLUTION and a.payload == p.ground_truth]
        bad = [a for a in holder.candidates
               if a.kind == ActionKind.SOLUTION and a.payload != p.ground_truth]
        for ok in sol_verdicts:
            a = good.pop() if ok else bad.pop()
            leaf = TreeNode(env.apply(s, a), parent=holder, incoming_action=a, N=1,
                            terminal=True, depth=s.depth + 1)
            leaf.terminal_verdict = env.verify(p, leaf.state)
            leaf.V = leaf.Q_edge = leaf.terminal_verdict.reward
            holder.children.append(leaf)
    return PlanTree(root, p, SearchConfig(), env)
