"""Plan-tree Monte Carlo Tree Search.

One simulation descends from the root with PUCT, expands the first
unexpanded non-terminal node by sampling distinct candidates from the policy,
evaluates it (terminal verdict, otherwise the value model) and backs the value
up the path:

    Q(s, a) <- r(s, a) + V(s')          r = 0 for every transition
    V(s)    <- sum_c N(c) Q(s, c) / sum_c N(c)   over visited children
    N(s)    <- N(s) + 1
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import policy as pol
from ._validation import check_positive
from .env import ActionKind, Verdict, make_env
from .exceptions import CPLError, PreconditionError, SearchError
from .value_model import ValueLabel, ValueParams, predict


@dataclass
class SearchConfig:
    c_puct: float = 1.5
    n_simulations: int = 32
    root_children: int = 5
    inner_children: int = 3
    max_depth: int = 6
    temperature: float = 0.7
    rng_seed: int = 0

    def __post_init__(self):
        check_positive("c_puct", self.c_puct)
        check_positive("temperature", self.temperature)
        for name in ("n_simulations", "root_children", "inner_children", "max_depth"):
            check_positive(name, getattr(self, name), integer=True)


@dataclass(eq=False)
class TreeNode:
    state: object
    parent: "TreeNode | None" = None
    incoming_action: object = None
    children: list = field(default_factory=list)
    N: int = 0
    V: float = 0.0
    Q_edge: float = 0.0
    expanded: bool = False
    terminal: bool = False
    terminal_verdict: Verdict | None = None
    candidates: list | None = None
    priors: np.ndarray | None = None
    leaf_visits: int = 0
    depth: int = 0

    def __repr__(self):
        label = self.incoming_action.display if self.incoming_action else "<root>"
        return f"TreeNode({label!r}, N={self.N}, V={self.V:.3f}, Q={self.Q_edge:.3f})"

    def iter_preorder(self):
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def path_from_root(self):
        path, node = [], self
        while node is not None:
            path.append(node)
            node = node.parent
        return path[::-1]


@dataclass(eq=False)
class PlanTree:
    root: TreeNode
    problem: object
    config: SearchConfig
    env: object = None
    rng: np.random.Generator | None = field(default=None, repr=False)

    def nodes(self):
        return list(self.root.iter_preorder())

    def terminals(self, visited_only=True):
        return [n for n in self.root.iter_preorder()
                if n.terminal and (n.N >= 1 or not visited_only)]

    def value_labels(self):
        """One label per visited node with a real state."""
        return [ValueLabel.from_state(n.state, float(np.clip(n.V, -1.0, 1.0)))
                for n in self.root.iter_preorder() if n.N >= 1 and n.state is not None]

    def dump(self):
        nodes = self.nodes()
        ids = {id(n): i for i, n in enumerate(nodes)}
        out = []
        for i, n in enumerate(nodes):
            rec = {
                "id": i,
                "parent_id": ids[id(n.parent)] if n.parent is not None else None,
                "action_display": n.incoming_action.display if n.incoming_action else None,
                "action_kind": n.incoming_action.kind.value if n.incoming_action else None,
                "N": n.N, "V": n.V, "Q_edge": n.Q_edge, "terminal": n.terminal,
            }
            if n.terminal_verdict is not None:
                rec["correct"] = n.terminal_verdict.correct
            out.append(rec)
        return {"format_version": 1, "problem_id": self.problem.id,
                "config": asdict(self.config), "nodes": out}

    def dumps(self):
        return json.dumps(self.dump(), sort_keys=True)

    @classmethod
    def from_dump(cls, doc, problem=None):
        """Rebuild the statistics skeleton of a dumped tree (states are not restored)."""
        nodes = {}
        root = None
        for rec in doc["nodes"]:
            parent = nodes.get(rec["parent_id"])
            action = None
            if rec["action_display"] is not None:
                action = pol_action_stub(rec["action_display"], rec["action_kind"])
            node = TreeNode(state=None, parent=parent, incoming_action=action, N=rec["N"],
                            V=rec["V"], Q_edge=rec["Q_edge"], terminal=rec["terminal"],
                            depth=0 if parent is None else parent.depth + 1)
            if "correct" in rec:
                node.terminal_verdict = Verdict(bool(rec["correct"]))
            if parent is None:
                root = node
            else:
                parent.children.append(node)
                parent.expanded = True
            nodes[rec["id"]] = node
        if problem is None:
            from .env import Problem
            problem = Problem(doc["problem_id"], "unknown", {}, 0)
        return cls(root=root, problem=problem, config=SearchConfig(**doc["config"]))


def pol_action_stub(display, kind):
    from .env import StepAction
    return StepAction(ActionKind(kind), None, display, ())


# -- expansion sources -----------------------------------------------------------

class PolicyProposer:
    """Expansion source backed by the hashed softmax policy."""

    def __init__(self, params):
        self.params = params

    def propose(self, env, state, k, temperature, rng):
        cands = env.candidate_actions(state)
        chosen = pol.sample_distinct_indices(self.params, state, cands, k, temperature, rng)
        lp = pol.log_probs(self.params, state, cands)[chosen]
        priors = np.exp(lp - lp.max())
        return cands, [cands[i] for i in chosen], priors / priors.sum()


# -- the four operations -------------------------------------------------------------

def puct_scores(node, c_puct, priors):
    sqrt_n = math.sqrt(node.N)
    return np.array([(ch.Q_edge if ch.N > 0 else 0.0) + c_puct * p * sqrt_n / (1 + ch.N)
                     for ch, p in zip(node.children, priors)])


def select_child(node, c_puct, priors):
    """Index of the PUCT-maximizing child; ties go to the lowest index."""
    if not node.expanded or not node.children:
        raise PreconditionError("select_child needs an expanded node with children")
    if len(priors) != len(node.children):
        raise PreconditionError("one prior per child required")
    return int(np.argmax(puct_scores(node, c_puct, priors)))


def expand(tree, node, proposer):
    if node.expanded:
        raise PreconditionError("node already expanded")
    if node.terminal:
        raise PreconditionError("cannot expand a terminal node")
    if isinstance(proposer, (pol.PolicyParams, pol.PolicySnapshot)):
        proposer = PolicyProposer(proposer)
    cfg = tree.config
    k = cfg.root_children if node.parent is None else cfg.inner_children
    cands, actions, priors = proposer.propose(tree.env, node.state, k, cfg.temperature, tree.rng)
    node.candidates = list(cands)
    node.priors = np.asarray(priors, dtype=np.float64)
    for a in actions:
        if a in cands:
            child_state = tree.env.apply(node.state, a)
        else:
            child_state = tree.env.apply_external(node.state, a)
        node.children.append(TreeNode(state=child_state, parent=node, incoming_action=a,
                                      terminal=tree.env.is_terminal(child_state),
                                      depth=node.depth + 1))
    node.expanded = True


def evaluate(node, problem, value, env):
    if node.terminal:
        if node.terminal_verdict is None:
            node.terminal_verdict = env.verify(problem, node.state)
        return node.terminal_verdict.reward
    return predict(value, node.state)


def backup(path, leaf_value):
    if not path:
        raise PreconditionError("backup needs a non-empty path")
    if not -1.0 <= leaf_value <= 1.0:
        raise PreconditionError(f"leaf value {leaf_value} outside [-1, 1]")
    leaf = path[-1]
    leaf.N += 1
    leaf.leaf_visits += 1
    if leaf.terminal or not any(c.N for c in leaf.children):
        leaf.V = float(leaf_value)
    for child, node in zip(reversed(path[1:]), reversed(path[:-1])):
        child.Q_edge = 0.0 + child.V
        total = 0
        acc = 0.0
        for c in node.children:
            if c.N > 0:
                total += c.N
                acc += c.N * c.Q_edge
        node.V = acc / total
        node.N += 1


def _rng_for(problem, config):
    return np.random.default_rng([config.rng_seed, zlib.crc32(problem.id.encode())])


def run_search(problem, policy, value, config, env=None, proposer=None, hook=None):
    """Run ``config.n_simulations`` simulations and return the tree.

    ``hook(node, priors, index)`` is called after every selection decision.
    """
    env = env or make_env(problem.env, max_depth=config.max_depth)
    if value is None:
        value = ValueParams.zeros(getattr(policy, "feature_dim", pol.FEATURE_DIM))
    proposer = proposer or PolicyProposer(policy)
    root_state = env.initial_state(problem)
    tree = PlanTree(root=TreeNode(root_state, terminal=env.is_terminal(root_state)),
                    problem=problem, config=config, env=env, rng=_rng_for(problem, config))
    for sim in range(config.n_simulations):
        try:
            node = tree.root
            path = [node]
            while node.expanded and not node.terminal:
                idx = select_child(node, config.c_puct, node.priors)
                if hook is not None:
                    hook(node, node.priors, idx)
                node = node.children[idx]
                path.append(node)
            if not node.terminal:
                expand(tree, node, proposer)
            backup(path, evaluate(node, problem, value, env))
        except CPLError as exc:
            raise SearchError(str(exc), sim) from exc
    return tree


class PlanTreeSearch(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``transform(problems)`` returns one PlanTree per problem."""

    def __init__(self, c_puct=1.5, n_simulations=32, root_children=5, inner_children=3,
                 max_depth=6, temperature=0.7, random_state=0, policy=None, value=None,
                 n_jobs=1):
        self.c_puct = c_puct
        self.n_simulations = n_simulations
        self.root_children = root_children
        self.inner_children = inner_children
        self.max_depth = max_depth
        self.temperature = temperature
        self.random_state = random_state
        self.policy = policy
        self.value = value
        self.n_jobs = n_jobs

    def _config(self):
        return SearchConfig(self.c_puct, self.n_simulations, self.root_children,
                            self.inner_children, self.max_depth, self.temperature,
                            self.random_state)

    def fit(self, problems=None, y=None):
        self.config_ = self._config()
        return self

    def transform(self, problems):
        config = getattr(self, "config_", None) or self._config()
        policy = self.policy if self.policy is not None else pol.PolicyParams.zeros()
        value = self.value if self.value is not None else ValueParams.zeros(policy.feature_dim)
        return search_many(problems, policy, value, config, n_jobs=self.n_jobs)


def search_many(problems, policy, value, config, n_jobs=1):
    if n_jobs == 1:
        return [run_search(p, policy, value, config) for p in problems]
    from joblib import Parallel, delayed
    return Parallel(n_jobs=n_jobs)(
        delayed(run_search)(p, policy, value, config) for p in problems)
