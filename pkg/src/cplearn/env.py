"""Synthetic multi-step reasoning environments.

Every episode has two phases. In the planning phase the agent picks abstract
plan steps ("compute q3 next", "move north"); once the plan covers everything
the task needs, solution-kind candidates appear and a single solution step
commits a concrete answer and ends the episode.

Two environments ship with the package:

``ArithChain``
    A small DAG of named integer quantities. The target quantity depends on a
    chain of others; a few decoy quantities are unrelated to the target.
    Computing a quantity before its inputs are available wastes the step.

``GridPlan``
    Shortest-path counting on a small grid with obstacles.

Both are pure: states are immutable and every method is a function of its
arguments, so any number of workers can share one environment instance.
"""

from __future__ import annotations

import json
import re
from abc import ABC, abstractmethod
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from ._validation import check_positive
from .exceptions import (
    ConfigurationError,
    InvalidTransitionError,
    ParseError,
    PreconditionError,
)

DEFAULT_MAX_DEPTH = 6
DIFFICULTIES = ("easy", "medium", "hard", "expert")


class ActionKind(str, Enum):
    PLAN = "plan"
    SOLUTION = "solution"


class Phase(str, Enum):
    PLANNING = "planning"
    SOLVED = "solved"


@dataclass(frozen=True)
class Problem:
    id: str
    env: str
    spec: dict = field(hash=False)
    ground_truth: int

    def to_dict(self):
        return {"id": self.id, "env": self.env, "spec": self.spec,
                "ground_truth": self.ground_truth}

    @classmethod
    def from_dict(cls, d):
        return cls(id=str(d["id"]), env=str(d["env"]), spec=d["spec"],
                   ground_truth=int(d["ground_truth"]))


@dataclass(frozen=True)
class StepAction:
    """A candidate next step.

    ``tags`` are abstract descriptors of the action relative to the state it
    was offered in (e.g. ``feeder``/``loose``); the policy featurizer reads
    them together with ``display``.
    """

    kind: ActionKind
    payload: object
    display: str
    tags: tuple = ()

    @property
    def tokens(self):
        return (self.display,) + tuple(self.tags)


@dataclass(frozen=True)
class State:
    problem: Problem = field(repr=False, compare=False)
    trace: tuple = ()
    phase: Phase = Phase.PLANNING
    context: tuple = ()

    @property
    def problem_id(self):
        return self.problem.id

    @property
    def depth(self):
        return len(self.trace)

    def key(self):
        """Canonical serialization: problem id plus the trace of displays."""
        return self.problem.id + "|" + " > ".join(a.display for a in self.trace)

    def __hash__(self):
        return hash((self.problem.id, self.trace, self.phase))

    def __eq__(self, other):
        if not isinstance(other, State):
            return NotImplemented
        return (self.problem.id == other.problem.id and self.trace == other.trace
                and self.phase == other.phase)


@dataclass(frozen=True)
class Verdict:
    correct: bool

    @property
    def reward(self):
        return 1.0 if self.correct else -1.0


def _difficulty_levels(difficulty, n, rng):
    if difficulty == "mixed":
        return [DIFFICULTIES[i] for i in rng.integers(0, len(DIFFICULTIES), size=n)]
    if difficulty not in DIFFICULTIES:
        raise ConfigurationError(
            f"unknown difficulty {difficulty!r}; expected one of "
            f"{DIFFICULTIES + ('mixed',)}")
    return [difficulty] * n


class Environment(ABC):
    """Interface shared by the built-in environments."""

    name = "base"

    def __init__(self, max_depth=DEFAULT_MAX_DEPTH):
        check_positive("max_depth", max_depth, integer=True)
        self.max_depth = max_depth

    # -- problem generation -------------------------------------------------
    @abstractmethod
    def generate_problems(self, seed, n, difficulty="easy"):
        ...

    @abstractmethod
    def evaluate_spec(self, spec):
        """Independent evaluation of a problem spec to its ground truth."""

    # -- dynamics ----------------------------------------------------------
    def initial_state(self, problem):
        return State(problem=problem, trace=(), phase=Phase.PLANNING,
                     context=self._context(problem, ()))

    def is_terminal(self, state):
        return state.phase == Phase.SOLVED or state.depth >= self.max_depth

    def candidate_actions(self, state):
        if self.is_terminal(state):
            raise PreconditionError(
                f"no candidates at terminal state {state.key()!r}")
        return self._candidates(state.problem, state.trace)

    def apply(self, state, action):
        if self.is_terminal(state):
            raise InvalidTransitionError(f"state {state.key()!r} is terminal")
        if action not in self._candidates(state.problem, state.trace):
            raise InvalidTransitionError(
                f"{action.display!r} is not a candidate at {state.key()!r}")
        return self._step(state, action)

    def apply_external(self, state, action):
        """Apply an action that did not come from ``candidate_actions``."""
        if self.is_terminal(state):
            raise InvalidTransitionError(f"state {state.key()!r} is terminal")
        return self._step(state, action)

    def _step(self, state, action):
        trace = state.trace + (action,)
        phase = Phase.SOLVED if action.kind == ActionKind.SOLUTION else Phase.PLANNING
        return State(problem=state.problem, trace=trace, phase=phase,
                     context=self._context(state.problem, trace))

    def verify(self, problem, state):
        if not self.is_terminal(state):
            raise PreconditionError(f"state {state.key()!r} is not terminal")
        if state.phase != Phase.SOLVED:
            return Verdict(False)
        return Verdict(state.trace[-1].payload == problem.ground_truth)

    def replay(self, problem, displays):
        """Rebuild a state from a sequence of action displays."""
        state = self.initial_state(problem)
        for text in displays:
            match = [a for a in self.candidate_actions(state) if a.display == text]
            if not match:
                raise InvalidTransitionError(
                    f"{text!r} is not a candidate at {state.key()!r}")
            state = self._step(state, match[0])
        return state

    def solvable(self, state):
        """True when solution-kind candidates are on offer."""
        if self.is_terminal(state):
            return False
        return any(a.kind == ActionKind.SOLUTION
                   for a in self._candidates(state.problem, state.trace))

    # -- environment specifics --------------------------------------------
    @abstractmethod
    def _candidates(self, problem, trace):
        ...

    @abstractmethod
    def _context(self, problem, trace):
        ...

    @abstractmethod
    def reference_action(self, state):
        """The valid-continuation candidate: following it always succeeds."""

    @abstractmethod
    def render(self, state):
        """Plain-text rendering of problem and trace for a remote generator."""

    def parse_proposal(self, state, text, kind, pattern=None):
        """Map generator text onto a StepAction.

        Exact matches of a candidate display reuse that candidate; other plan
        text becomes an opaque plan step; solution text must carry a boxed
        integer answer.
        """
        text = text.strip()
        if not self.is_terminal(state):
            for a in self._candidates(state.problem, state.trace):
                if a.display == text:
                    return a
        if kind == "solution" or kind == ActionKind.SOLUTION:
            value = extract_answer(text, pattern or BOXED_PATTERN)
            if value is None:
                return None
            return StepAction(ActionKind.SOLUTION, value, text, ("free",))
        return StepAction(ActionKind.PLAN, text, text, ("free",))


BOXED_PATTERN = r"\\boxed\{\s*(-?\d+)\s*\}"


def extract_answer(text, pattern=BOXED_PATTERN):
    m = re.search(pattern, text)
    return int(m.group(1)) if m else None


def _last_token(trace):
    if not trace:
        return "last=<start>"
    last = trace[-1]
    return "last=" + ":".join((last.kind.value,) + tuple(last.tags))


# ---------------------------------------------------------------------------
# ArithChain
# ---------------------------------------------------------------------------

_ARITH_DEPTH = {"easy": 2, "medium": 3, "hard": 4, "expert": 5}
_OPS = {"+": lambda a, b: a + b, "-": lambda a, b: a - b, "*": lambda a, b: a * b}


def _eval_quantity(q, values):
    args = [values.get(a, 0) if isinstance(a, str) else a for a in q["args"]]
    return _OPS[q["op"]](*args)


class ArithChain(Environment):
    """Quantity-DAG arithmetic.

    Plan steps are ``compute <q> next``. A quantity becomes valid when it is
    computed after all quantities it reads are valid; computing it earlier
    leaves it invalid and costs a step. Solution candidates appear once every
    ancestor of the target is valid.

    Plan tags expose only the quantity's role (target, feeder or loose); whether
    its inputs are ready is left for the policy to work out.
    """

    name = "arith"

    def __init__(self, max_depth=DEFAULT_MAX_DEPTH, n_decoys=2, n_distractors=2):
        super().__init__(max_depth)
        self.n_decoys = n_decoys
        self.n_distractors = n_distractors

    # -- generation ---------------------------------------------------------
    def generate_problems(self, seed, n, difficulty="easy"):
        check_positive("n", n, integer=True, error=PreconditionError)
        rng = np.random.default_rng(seed)
        levels = _difficulty_levels(difficulty, n, rng)
        problems = []
        for i, level in enumerate(levels):
            spec = self._random_spec(rng, _ARITH_DEPTH[level])
            gt = self.evaluate_spec(spec)
            problems.append(Problem(id=f"arith-s{seed}-{i:04d}", env=self.name,
                                    spec=spec, ground_truth=gt))
        return problems

    def _random_spec(self, rng, k):
        quantities = []
        for i in range(1, k + 1):
            name = f"q{i}"
            if i == 1:
                args = [int(rng.integers(1, 10)), int(rng.integers(1, 10))]
                op = str(rng.choice(["+", "-", "*"]))
            else:
                other = (f"q{int(rng.integers(1, i - 1))}"
                         if i > 2 and rng.random() < 0.3 else int(rng.integers(1, 10)))
                op = str(rng.choice(["+", "-", "*"])) if isinstance(other, int) \
                    else str(rng.choice(["+", "-"]))
                args = [f"q{i - 1}", other]
                if rng.random() < 0.5:
                    args.reverse()
            quantities.append({"name": name, "op": op, "args": args})
        for j in range(self.n_decoys):
            name = f"q{k + j + 1}"
            pool = [f"q{i}" for i in range(1, k + j + 1)]
            src = str(rng.choice(pool)) if rng.random() < 0.7 else int(rng.integers(1, 10))
            args = [src, int(rng.integers(1, 10))]
            quantities.append({"name": name, "op": str(rng.choice(["+", "-"])), "args": args})
        return {"quantities": quantities, "target": f"q{k}"}

    def evaluate_spec(self, spec):
        defs = {q["name"]: q for q in spec["quantities"]}

        def ev(name, seen=()):
            if name in seen:
                raise ConfigurationError(f"cycle through {name}")
            q = defs[name]
            vals = [ev(a, seen + (name,)) if isinstance(a, str) else a for a in q["args"]]
            return _OPS[q["op"]](*vals)

        return ev(spec["target"])

    # -- structure helpers ------------------------------------------------
    @staticmethod
    def _defs(problem):
        return {q["name"]: q for q in problem.spec["quantities"]}

    @staticmethod
    def needed(problem):
        """Ancestors of the target, target included."""
        defs = ArithChain._defs(problem)
        out, stack = set(), [problem.spec["target"]]
        while stack:
            name = stack.pop()
            if name in out:
                continue
            out.add(name)
            stack.extend(a for a in defs[name]["args"] if isinstance(a, str))
        return out

    @staticmethod
    def _valid(problem, trace):
        defs = ArithChain._defs(problem)
        valid = set()
        for a in trace:
            if a.kind != ActionKind.PLAN or a.payload not in defs:
                continue
            if all(d in valid for d in defs[a.payload]["args"] if isinstance(d, str)):
                valid.add(a.payload)
        return valid

    def _answers(self, problem, defs, needed):
        gt = problem.ground_truth
        target = problem.spec["target"]
        order = [q["name"] for q in problem.spec["quantities"]]
        true_vals = {}
        for name in order:
            true_vals[name] = _eval_quantity(defs[name], true_vals)
        wrong = []
        # wrong-order plans: one needed quantity computed before its inputs
        for name in order:
            if name not in needed:
                continue
            vals = {}
            for other in order:
                vals[other] = (_eval_quantity(defs[other], {}) if other == name
                               else _eval_quantity(defs[other], vals))
            wrong.append(vals[target])
        # decoy plans: a decoy value substituted for the target's first input
        first_input = next((a for a in defs[target]["args"] if isinstance(a, str)), None)
        for name in order:
            if name in needed or first_input is None:
                continue
            vals = dict(true_vals)
            vals[first_input] = true_vals[name]
            wrong.append(_eval_quantity(defs[target], vals))
        distractors = []
        for v in wrong + [gt + 1, gt - 1, gt + 2]:
            if v != gt and v not in distractors:
                distractors.append(v)
            if len(distractors) == self.n_distractors:
                break
        return sorted([gt] + distractors)

    def _candidates(self, problem, trace):
        defs = self._defs(problem)
        needed = self.needed(problem)
        valid = self._valid(problem, trace)
        target = problem.spec["target"]
        referenced = {a for q in defs.values() for a in q["args"] if isinstance(a, str)}
        out = []
        for name, q in defs.items():
            if name in valid:
                continue
            role = "target" if name == target else ("feeder" if name in referenced else "loose")
            out.append(StepAction(ActionKind.PLAN, name, f"compute {name} next", (role,)))
        if needed <= valid:
            for v in self._answers(problem, defs, needed):
                tag = "consistent" if v == problem.ground_truth else "inconsistent"
                out.append(StepAction(ActionKind.SOLUTION, v, f"answer {v}", (tag,)))
        return out

    def _context(self, problem, trace):
        left = len(self.needed(problem) - self._valid(problem, trace))
        return (f"depth={len(trace)}", f"left={left}", _last_token(trace))

    def reference_action(self, state):
        problem = state.problem
        cands = self.candidate_actions(state)
        for a in cands:
            if a.kind == ActionKind.SOLUTION and a.payload == problem.ground_truth:
                return a
        needed = self.needed(problem)
        defs = self._defs(problem)
        valid = self._valid(problem, state.trace)
        for a in cands:
            if a.payload in needed and all(d in valid for d in defs[a.payload]["args"]
                                           if isinstance(d, str)):
                return a
        raise PreconditionError(f"no valid continuation at {state.key()!r}")

    def render(self, state):
        lines = []
        for q in state.problem.spec["quantities"]:
            a, b = q["args"]
            lines.append(f"{q['name']} = {a} {q['op']} {b}")
        lines.append(f"target: {state.problem.spec['target']}")
        lines.append("steps:")
        lines.extend(a.display for a in state.trace)
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# GridPlan
# ---------------------------------------------------------------------------

_GRID_SIZE = {"easy": (3, 3, 0), "medium": (4, 4, 2), "hard": (5, 5, 4), "expert": (5, 5, 6)}
_MOVES = {"north": (-1, 0), "south": (1, 0), "west": (0, -1), "east": (0, 1)}


def _bfs(rows, cols, blocked, start, goal):
    dist = {start: 0}
    queue = deque([start])
    while queue:
        cell = queue.popleft()
        if cell == goal:
            return dist[cell]
        for dr, dc in _MOVES.values():
            nxt = (cell[0] + dr, cell[1] + dc)
            if 0 <= nxt[0] < rows and 0 <= nxt[1] < cols and nxt not in blocked \
                    and nxt not in dist:
                dist[nxt] = dist[cell] + 1
                queue.append(nxt)
    return None


class GridPlan(Environment):
    """Count the moves of a shortest path from start to goal.

    Plan steps are unit moves; once the walker stands on the goal, solution
    candidates offer the number of moves taken, the true shortest distance
    and nearby distractors. Only the shortest distance is correct, so a
    detour in the plan makes the natural (consistent) answer wrong.
    """

    name = "grid"

    def generate_problems(self, seed, n, difficulty="easy"):
        check_positive("n", n, integer=True, error=PreconditionError)
        rng = np.random.default_rng(seed)
        levels = _difficulty_levels(difficulty, n, rng)
        problems = []
        for i, level in enumerate(levels):
            rows, cols, n_obs = _GRID_SIZE[level]
            while True:
                cells = [(r, c) for r in range(rows) for c in range(cols)]
                picks = rng.permutation(len(cells))[: n_obs + 2]
                start, goal = cells[picks[0]], cells[picks[1]]
                obstacles = sorted(cells[p] for p in picks[2:])
                d = _bfs(rows, cols, set(obstacles), start, goal)
                if d is not None and 2 <= d <= self.max_depth - 1:
                    break
            spec = {"rows": rows, "cols": cols, "obstacles": [list(o) for o in obstacles],
                    "start": list(start), "goal": list(goal)}
            problems.append(Problem(id=f"grid-s{seed}-{i:04d}", env=self.name,
                                    spec=spec, ground_truth=self.evaluate_spec(spec)))
        return problems

    def evaluate_spec(self, spec):
        d = _bfs(spec["rows"], spec["cols"], {tuple(o) for o in spec["obstacles"]},
                 tuple(spec["start"]), tuple(spec["goal"]))
        if d is None:
            raise ConfigurationError("goal unreachable")
        return d

    @staticmethod
    def _position(problem, trace):
        r, c = problem.spec["start"]
        for a in trace:
            if a.kind == ActionKind.PLAN and a.payload in _MOVES:
                dr, dc = _MOVES[a.payload]
                r, c = r + dr, c + dc
        return r, c

    def _candidates(self, problem, trace):
        spec = problem.spec
        blocked = {tuple(o) for o in spec["obstacles"]}
        goal = tuple(spec["goal"])
        pos = self._position(problem, trace)
        out = []
        if pos == goal:
            moves = sum(1 for a in trace if a.kind == ActionKind.PLAN)
            values = sorted({moves, problem.ground_truth, problem.ground_truth + 2,
                             max(problem.ground_truth - 1, 0)})
            for v in values:
                tag = "consistent" if v == moves else "inconsistent"
                out.append(StepAction(ActionKind.SOLUTION, v, f"answer {v}", (tag,)))
            return out
        here = abs(pos[0] - goal[0]) + abs(pos[1] - goal[1])
        for name, (dr, dc) in _MOVES.items():
            nxt = (pos[0] + dr, pos[1] + dc)
            if not (0 <= nxt[0] < spec["rows"] and 0 <= nxt[1] < spec["cols"]) \
                    or nxt in blocked:
                continue
            there = abs(nxt[0] - goal[0]) + abs(nxt[1] - goal[1])
            out.append(StepAction(ActionKind.PLAN, name, f"move {name}",
                                  ("toward" if there < here else "away",)))
        return out

    def _context(self, problem, trace):
        pos = self._position(problem, trace)
        goal = tuple(problem.spec["goal"])
        gap = abs(pos[0] - goal[0]) + abs(pos[1] - goal[1])
        return (f"depth={len(trace)}", f"left={gap}", _last_token(trace))

    def reference_action(self, state):
        problem = state.problem
        spec = problem.spec
        cands = self.candidate_actions(state)
        moves = sum(1 for a in state.trace if a.kind == ActionKind.PLAN)
        for a in cands:
            if a.kind == ActionKind.SOLUTION and a.payload == moves:
                return a
        blocked = {tuple(o) for o in spec["obstacles"]}
        goal = tuple(spec["goal"])
        best, best_d = None, None
        for a in cands:
            pos = self._position(problem, state.trace + (a,))
            d = _bfs(spec["rows"], spec["cols"], blocked, pos, goal)
            if d is not None and (best_d is None or d < best_d):
                best, best_d = a, d
        return best

    def render(self, state):
        spec = state.problem.spec
        lines = [f"grid {spec['rows']}x{spec['cols']}",
                 f"obstacles: {spec['obstacles']}",
                 f"start: {spec['start']} goal: {spec['goal']}", "steps:"]
        lines.extend(a.display for a in state.trace)
        return "\n".join(lines)


ENVIRONMENTS = {ArithChain.name: ArithChain, GridPlan.name: GridPlan}


def make_env(name, **kwargs):
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown environment {name!r}; expected one of {sorted(ENVIRONMENTS)}") from None
    return cls(**kwargs)


def generate_problems(seed, n, difficulty="easy", env="arith", **env_kwargs):
    return make_env(env, **env_kwargs).generate_problems(seed, n, difficulty)


def save_problems(problems, path):
    path = Path(path)
    with path.open("w") as fh:
        for p in problems:
            fh.write(json.dumps(p.to_dict(), sort_keys=True) + "\n")
    return len(problems)


def load_problems(path):
    out = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(Problem.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(str(exc), line=lineno) from exc
    return out
