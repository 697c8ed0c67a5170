"""Policy training objectives: SFT, Step-APO, Step-DPO and response-level DPO.

All objectives are functions of log-probabilities of chosen candidates under
the hashed softmax policy, so they share one compiled representation: a CSR
matrix with one feature row per candidate, grouped by decision point. For a
loss ``L = sum_j c_j log pi(row_j)`` the gradient is ``X^T coef`` with

    coef = sum_j c_j e_{row_j} - sum_j c_j * p * 1[group(row_j)]

which is what :func:`_grad_from_terms` assembles.

Step-APO for a pair ``(s, a_w, a_l)`` with MCTS values ``v_w, v_l``::

    u    = beta * (log pi(a_w|s)/pi_ref(a_w|s) - log pi(a_l|s)/pi_ref(a_l|s))
           - s_f * (v_w - v_l)
    loss = -log sigmoid(u)

with ``s_f = solution_scale`` for solution pairs and 1 for plan pairs.
Step-DPO drops the value term.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.special import expit
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import policy as pol
from ._validation import check_choice, check_interval, check_nonempty, check_positive
from .exceptions import ConfigurationError, DivergenceError, NumericError, PreconditionError

OBJECTIVES = ("step-apo", "step-dpo", "dpo")


@dataclass
class TrainConfig:
    beta: float = 0.3
    solution_scale: float = 0.3
    lr: float = 0.05
    epochs: int = 2
    batch_size: int = 64
    optimizer: str = "adam"
    seed: int = 0
    scheduler: str = "cosine"
    warmup_ratio: float = 0.1

    def __post_init__(self):
        check_positive("beta", self.beta)
        check_interval("solution_scale", self.solution_scale, 0.0, 1.0, closed_low=False)
        check_interval("lr", self.lr, 0.0, math.inf, closed_high=False)
        check_positive("epochs", self.epochs, integer=True)
        check_positive("batch_size", self.batch_size, integer=True)
        check_choice("optimizer", self.optimizer, ("adam", "sgd"))
        check_choice("scheduler", self.scheduler, ("cosine", "constant"))
        check_interval("warmup_ratio", self.warmup_ratio, 0.0, 1.0, closed_high=False)


@dataclass
class LossReport:
    epochs: list = field(default_factory=list)
    initial_loss: float = float("nan")

    def add(self, epoch, mean_loss, pair_accuracy, grad_norm):
        for name, v in (("mean_loss", mean_loss), ("grad_norm", grad_norm)):
            if not math.isfinite(v):
                raise DivergenceError(f"non-finite {name} in epoch {epoch}", epoch=epoch)
        self.epochs.append({"epoch": epoch, "mean_loss": float(mean_loss),
                            "pair_accuracy": float(pair_accuracy),
                            "grad_norm": float(grad_norm)})

    @property
    def final_loss(self):
        return self.epochs[-1]["mean_loss"] if self.epochs else self.initial_loss

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["epoch", "mean_loss", "pair_accuracy", "grad_norm"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(self.epochs)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def to_dict(self):
        return {"initial_loss": self.initial_loss, "epochs": list(self.epochs)}


# -- compiled groups ------------------------------------------------------------------

class _Groups:
    """Candidate feature rows for a list of decision points."""

    def __init__(self, decisions, dim):
        idx_parts, val_parts, lengths, sizes = [], [], [], []
        for context, tokens in decisions:
            if not tokens:
                raise PreconditionError("decision point with no candidates")
            sizes.append(len(tokens))
            for tok in tokens:
                i, v = pol._feature_indices(tuple(context), tuple(tok), dim)
                idx_parts.append(i)
                val_parts.append(v)
                lengths.append(len(i))
        indptr = np.zeros(len(lengths) + 1, dtype=np.int64)
        indptr[1:] = np.cumsum(lengths)
        self.X = sparse.csr_matrix((np.concatenate(val_parts), np.concatenate(idx_parts),
                                    indptr), shape=(len(lengths), dim))
        self.starts = np.zeros(len(sizes) + 1, dtype=np.int64)
        self.starts[1:] = np.cumsum(sizes)
        self.group_of_row = np.repeat(np.arange(len(sizes)), sizes)
        self.dim = dim

    def subset(self, groups):
        """Rows of the given groups, renumbered; returns (Groups-like, old->new map)."""
        sub = _Groups.__new__(_Groups)
        sizes = self.starts[groups + 1] - self.starts[groups]
        rows = np.concatenate([np.arange(self.starts[g], self.starts[g + 1]) for g in groups])
        sub.X = self.X[rows]
        sub.starts = np.zeros(len(groups) + 1, dtype=np.int64)
        sub.starts[1:] = np.cumsum(sizes)
        sub.group_of_row = np.repeat(np.arange(len(groups)), sizes)
        sub.dim = self.dim
        return sub, rows

    def log_probs(self, weights):
        z = self.X @ weights
        heads = self.starts[:-1]
        gmax = np.maximum.reduceat(z, heads)
        zz = z - gmax[self.group_of_row]
        lse = np.log(np.add.reduceat(np.exp(zz), heads)) + gmax
        return z - lse[self.group_of_row]


def _grad_from_terms(groups, logp, rows, coefs):
    """Gradient of ``sum_j coefs[j] * log p(rows[j])``."""
    coef = np.zeros(groups.X.shape[0])
    np.add.at(coef, rows, coefs)
    per_group = np.zeros(len(groups.starts) - 1)
    np.add.at(per_group, groups.group_of_row[rows], coefs)
    coef -= np.exp(logp) * per_group[groups.group_of_row]
    return groups.X.T @ coef


def _sparse_from_terms(groups, logp, rows, coefs):
    coef = np.zeros(groups.X.shape[0])
    np.add.at(coef, rows, coefs)
    per_group = np.zeros(len(groups.starts) - 1)
    np.add.at(per_group, groups.group_of_row[rows], coefs)
    coef -= np.exp(logp) * per_group[groups.group_of_row]
    coo = groups.X.tocoo()
    return pol._combine(coo.col.astype(np.int64), coo.data * coef[coo.row], groups.dim)


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite {what}")


# -- pairwise objectives ------------------------------------------------------------

class _Pairwise:
    """Pairwise logistic objective over signed sums of log-ratios.

    Pair ``i`` has margin ``u_i = beta * sum_j sign_j (logp(row_j) - logref(row_j))
    - offset_i`` and loss ``softplus(-u_i)``.
    """

    def __init__(self, decisions, term_pair, term_row, term_sign, offsets, beta, dim):
        self.groups = _Groups(decisions, dim)
        self.term_pair = np.asarray(term_pair, dtype=np.int64)
        self.term_row = np.asarray(term_row, dtype=np.int64)
        self.term_sign = np.asarray(term_sign, dtype=np.float64)
        self.offsets = np.asarray(offsets, dtype=np.float64)
        self.beta = beta
        self.n_pairs = len(self.offsets)
        self.term_group = self.groups.group_of_row[self.term_row]
        order = np.argsort(self.term_pair, kind="stable")
        bounds = np.searchsorted(self.term_pair[order], np.arange(self.n_pairs + 1))
        self.pair_groups = [np.unique(self.term_group[order[a:b]])
                            for a, b in zip(bounds[:-1], bounds[1:])]

    def margins(self, logp, logref, term_pair, term_row, term_sign, offsets, n):
        ratio = logp[term_row] - logref[term_row]
        u = np.zeros(n)
        np.add.at(u, term_pair, self.beta * term_sign * ratio)
        return u - offsets

    def loss_grad(self, weights, logref_all, pair_ids=None, want_grad=True):
        """Mean loss and dense gradient over ``pair_ids`` (all pairs by default)."""
        if pair_ids is None:
            groups, row_map = self.groups, None
            mask = np.ones(len(self.term_pair), dtype=bool)
            pair_index = np.arange(self.n_pairs)
        else:
            pair_ids = np.asarray(pair_ids)
            gids = np.unique(np.concatenate([self.pair_groups[i] for i in pair_ids]))
            groups, rows = self.groups.subset(gids)
            row_map = np.full(self.groups.X.shape[0], -1, dtype=np.int64)
            row_map[rows] = np.arange(len(rows))
            mask = np.isin(self.term_pair, pair_ids)
            pair_index = np.full(self.n_pairs, -1, dtype=np.int64)
            pair_index[pair_ids] = np.arange(len(pair_ids))
        t_pair = pair_index[self.term_pair[mask]]
        t_row = self.term_row[mask] if row_map is None else row_map[self.term_row[mask]]
        t_sign = self.term_sign[mask]
        offsets = self.offsets if pair_ids is None else self.offsets[pair_ids]
        logref = logref_all if row_map is None else logref_all[rows]
        n = len(offsets)
        logp = groups.log_probs(weights)
        _check_finite(logp, "log-probability")
        u = self.margins(logp, logref, t_pair, t_row, t_sign, offsets, n)
        losses = np.logaddexp(0.0, -u)
        if not want_grad:
            return float(losses.mean()), None, u
        # d softplus(-u)/du = -sigmoid(-u)
        weight = -expit(-u) / n
        coefs = weight[t_pair] * self.beta * t_sign
        return float(losses.mean()), _grad_from_terms(groups, logp, t_row, coefs), u

    def reward_margins(self, weights, logref_all):
        logp = self.groups.log_probs(weights)
        return self.margins(logp, logref_all, self.term_pair, self.term_row, self.term_sign,
                            np.zeros(self.n_pairs), self.n_pairs)


def _step_problem(pairs, beta, solution_scale, use_values, dim):
    decisions, t_pair, t_row, t_sign, offsets = [], [], [], [], []
    base = 0
    for i, p in enumerate(pairs):
        decisions.append((p.context, p.candidate_tokens()))
        t_pair += [i, i]
        t_row += [base + p.chosen_idx, base + p.rejected_idx]
        t_sign += [1.0, -1.0]
        scale = solution_scale if p.kind == "solution" else 1.0
        offsets.append(scale * (p.v_chosen - p.v_rejected) if use_values else 0.0)
        base += len(p.candidates)
    return _Pairwise(decisions, t_pair, t_row, t_sign, offsets, beta, dim)


def _instance_problem(traj_pairs, beta, dim):
    decisions, t_pair, t_row, t_sign = [], [], [], []
    base = 0
    for i, (tw, tl) in enumerate(traj_pairs):
        if tw.problem_id != tl.problem_id:
            raise PreconditionError(
                f"trajectory problems differ: {tw.problem_id!r} vs {tl.problem_id!r}")
        for traj, sign in ((tw, 1.0), (tl, -1.0)):
            for step in traj.steps:
                decisions.append((step.context, step.candidate_tokens()))
                t_pair.append(i)
                t_row.append(base + step.chosen_idx)
                t_sign.append(sign)
                base += len(step.candidates)
    return _Pairwise(decisions, t_pair, t_row, t_sign, np.zeros(len(traj_pairs)), beta, dim)


def _ref_logp(problem, ref):
    return problem.groups.log_probs(ref.weights)


def _single(problem, theta, ref):
    logref = _ref_logp(problem, ref)
    loss, grad, _ = problem.loss_grad(theta.weights, logref, want_grad=False)
    if not math.isfinite(loss):
        raise NumericError("non-finite loss")
    return loss


def _single_sparse_grad(problem, theta, ref):
    logref = _ref_logp(problem, ref)
    groups = problem.groups
    logp = groups.log_probs(theta.weights)
    _check_finite(logp, "log-probability")
    u = problem.margins(logp, logref, problem.term_pair, problem.term_row,
                        problem.term_sign, problem.offsets, problem.n_pairs)
    weight = -expit(-u) / problem.n_pairs
    coefs = weight[problem.term_pair] * problem.beta * problem.term_sign
    return _sparse_from_terms(groups, logp, problem.term_row, coefs)


def _cfg(cfg):
    return cfg if cfg is not None else TrainConfig()


def step_apo_loss(pair, theta, ref, cfg=None):
    cfg = _cfg(cfg)
    return _single(_step_problem([pair], cfg.beta, cfg.solution_scale, True,
                                 theta.feature_dim), theta, ref)


def step_apo_grad(pair, theta, ref, cfg=None):
    cfg = _cfg(cfg)
    return _single_sparse_grad(_step_problem([pair], cfg.beta, cfg.solution_scale, True,
                                             theta.feature_dim), theta, ref)


def step_dpo_loss(pair, theta, ref, beta=0.3):
    return _single(_step_problem([pair], beta, 1.0, False, theta.feature_dim), theta, ref)


def step_dpo_grad(pair, theta, ref, beta=0.3):
    return _single_sparse_grad(_step_problem([pair], beta, 1.0, False, theta.feature_dim),
                               theta, ref)


def dpo_loss(traj_w, traj_l, theta, ref, beta=0.3):
    return _single(_instance_problem([(traj_w, traj_l)], beta, theta.feature_dim), theta, ref)


def dpo_grad(traj_w, traj_l, theta, ref, beta=0.3):
    return _single_sparse_grad(_instance_problem([(traj_w, traj_l)], beta, theta.feature_dim),
                               theta, ref)


# -- SFT ----------------------------------------------------------------------------------

class _Likelihood:
    """Mean negative log-likelihood of chosen candidates over decision steps."""

    def __init__(self, trajs, dim):
        steps = [s for t in trajs for s in t.steps]
        check_nonempty("trajectory steps", steps)
        self.groups = _Groups([(s.context, s.candidate_tokens()) for s in steps], dim)
        self.chosen = self.groups.starts[:-1] + np.array([s.chosen_idx for s in steps])
        self.n = len(steps)

    def loss_grad(self, weights, ids=None, want_grad=True):
        if ids is None:
            groups, chosen = self.groups, self.chosen
        else:
            ids = np.asarray(ids)
            groups, rows = self.groups.subset(ids)
            chosen = groups.starts[:-1] + (self.chosen[ids] - self.groups.starts[ids])
        logp = groups.log_probs(weights)
        _check_finite(logp, "log-probability")
        loss = float(-logp[chosen].mean())
        if not want_grad:
            return loss, None
        coefs = np.full(len(chosen), -1.0 / len(chosen))
        return loss, _grad_from_terms(groups, logp, chosen, coefs)

    def accuracy(self, weights):
        logp = self.groups.log_probs(weights)
        best = np.maximum.reduceat(logp, self.groups.starts[:-1])
        return float(np.mean(logp[self.chosen] >= best))


def nll_loss(params, trajs):
    return _Likelihood(trajs, params.feature_dim).loss_grad(params.weights, want_grad=False)[0]


def nll_grad(params, trajs):
    return _Likelihood(trajs, params.feature_dim).loss_grad(params.weights)[1]


# -- optimisation loop ---------------------------------------------------------------------

class _Optimizer:
    def __init__(self, cfg, dim, total_steps):
        self.cfg = cfg
        self.total = max(total_steps, 1)
        self.warmup = int(cfg.warmup_ratio * self.total)
        self.t = 0
        if cfg.optimizer == "adam":
            self.m = np.zeros(dim)
            self.v = np.zeros(dim)

    def rate(self):
        base = self.cfg.lr
        if self.t < self.warmup:
            return base * (self.t + 1) / (self.warmup + 1)
        if self.cfg.scheduler == "constant":
            return base
        progress = (self.t - self.warmup) / max(self.total - self.warmup, 1)
        return base * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))

    def step(self, w, grad):
        lr = self.rate()
        self.t += 1
        if self.cfg.optimizer == "sgd":
            return w - lr * grad
        b1, b2, eps = 0.9, 0.999, 1e-8
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        mhat = self.m / (1 - b1 ** self.t)
        vhat = self.v / (1 - b2 ** self.t)
        return w - lr * mhat / (np.sqrt(vhat) + eps)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _run(objective, n_items, init, cfg, accuracy):
    """Minibatch loop shared by every objective; ``objective(w, ids)`` -> (loss, grad)."""
    rng = np.random.default_rng(cfg.seed)
    w = init.weights.copy()
    report = LossReport()
    report.initial_loss = objective(w, None, False)[0]
    n_batches = math.ceil(n_items / cfg.batch_size)
    opt = _Optimizer(cfg, len(w), n_batches * cfg.epochs)
    for epoch in range(cfg.epochs):
        losses, norms = [], []
        for b, ids in enumerate(_batches(n_items, cfg.batch_size, rng)):
            loss, grad = objective(w, ids, True)[:2]
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}",
                                      epoch=epoch, batch=b)
            losses.append(loss * len(ids))
            norms.append(float(np.linalg.norm(grad)))
            if cfg.lr > 0:
                w = opt.step(w, grad)
        report.add(epoch, sum(losses) / n_items, accuracy(w), float(np.mean(norms)))
    return pol.PolicyParams(w, init.feature_dim, init.version + 1), report


def sft_fit(policy, trajs, cfg=None, return_report=False):
    """Maximize the log-likelihood of chosen steps on correct trajectories."""
    cfg = _cfg(cfg)
    check_nonempty("trajectories", trajs)
    lik = _Likelihood(trajs, policy.feature_dim)
    params, report = _run(lambda w, ids, g: lik.loss_grad(w, ids, g), lik.n, policy, cfg,
                          lik.accuracy)
    return (params, report) if return_report else params


def _pairwise_fit(problem, policy, ref, cfg):
    logref = _ref_logp(problem, ref)

    def accuracy(w):
        return float(np.mean(problem.reward_margins(w, logref) > 0))

    return _run(lambda w, ids, g: problem.loss_grad(w, logref, ids, g), problem.n_pairs,
                policy, cfg, accuracy)


def apo_fit(policy, ref, pairs, cfg=None, objective="step-apo"):
    """Minibatch Step-APO (or Step-DPO with ``objective='step-dpo'``)."""
    cfg = _cfg(cfg)
    check_nonempty("pairs", pairs)
    check_choice("objective", objective, ("step-apo", "step-dpo"))
    problem = _step_problem(pairs, cfg.beta, cfg.solution_scale, objective == "step-apo",
                            policy.feature_dim)
    return _pairwise_fit(problem, policy, ref, cfg)


def dpo_fit(policy, ref, traj_pairs, cfg=None):
    """Response-level DPO over (correct, incorrect) trajectory pairs."""
    cfg = _cfg(cfg)
    check_nonempty("trajectory pairs", traj_pairs)
    return _pairwise_fit(_instance_problem(traj_pairs, cfg.beta, policy.feature_dim),
                         policy, ref, cfg)


# -- estimator wrappers ----------------------------------------------------------------------

class _PolicyEstimator(BaseEstimator):
    def _train_config(self):
        return TrainConfig(beta=getattr(self, "beta", 0.3),
                           solution_scale=getattr(self, "solution_scale", 0.3),
                           lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
                           optimizer=self.optimizer, seed=self.random_state,
                           scheduler=self.scheduler, warmup_ratio=self.warmup_ratio)

    def predict(self, steps):
        """Greedy candidate index for each decision step."""
        check_is_fitted(self, "params_")
        g = _Groups([(s.context, s.candidate_tokens()) for s in steps], self.params_.feature_dim)
        z = g.X @ self.params_.weights
        return np.array([int(np.argmax(z[a:b])) for a, b in zip(g.starts[:-1], g.starts[1:])])

    def predict_log_proba(self, steps):
        check_is_fitted(self, "params_")
        g = _Groups([(s.context, s.candidate_tokens()) for s in steps], self.params_.feature_dim)
        lp = g.log_probs(self.params_.weights)
        return [lp[a:b] for a, b in zip(g.starts[:-1], g.starts[1:])]


class SupervisedPolicy(_PolicyEstimator):
    """SFT on correct trajectories; ``fit(trajectories, init=None)``."""

    def __init__(self, lr=0.1, epochs=3, batch_size=64, optimizer="adam", scheduler="cosine",
                 warmup_ratio=0.1, random_state=0, feature_dim=pol.FEATURE_DIM):
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.scheduler = scheduler
        self.warmup_ratio = warmup_ratio
        self.random_state = random_state
        self.feature_dim = feature_dim

    def fit(self, trajectories, init=None):
        init = init if init is not None else pol.PolicyParams.zeros(self.feature_dim)
        self.params_, self.report_ = sft_fit(init, trajectories, self._train_config(),
                                             return_report=True)
        return self


class StepPreferenceOptimizer(_PolicyEstimator):
    """Step-APO / Step-DPO; ``fit(pairs, init, ref=None)`` (ref defaults to ``init``)."""

    def __init__(self, objective="step-apo", beta=0.3, solution_scale=0.3, lr=0.05, epochs=2,
                 batch_size=64, optimizer="adam", scheduler="cosine", warmup_ratio=0.1,
                 random_state=0):
        self.objective = objective
        self.beta = beta
        self.solution_scale = solution_scale
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.scheduler = scheduler
        self.warmup_ratio = warmup_ratio
        self.random_state = random_state

    def fit(self, pairs, init, ref=None):
        if self.objective not in ("step-apo", "step-dpo"):
            raise ConfigurationError(f"unknown objective {self.objective!r}")
        ref = ref if ref is not None else pol.PolicySnapshot.of(init)
        self.params_, self.report_ = apo_fit(init, ref, pairs, self._train_config(),
                                             self.objective)
        return self


class InstanceDPO(_PolicyEstimator):
    """Response-level DPO; ``fit(trajectory_pairs, init, ref=None)``."""

    def __init__(self, beta=0.3, lr=0.05, epochs=2, batch_size=64, optimizer="adam",
                 scheduler="cosine", warmup_ratio=0.1, random_state=0):
        self.beta = beta
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.scheduler = scheduler
        self.warmup_ratio = warmup_ratio
        self.random_state = random_state

    def fit(self, traj_pairs, init, ref=None):
        ref = ref if ref is not None else pol.PolicySnapshot.of(init)
        self.params_, self.report_ = dpo_fit(init, ref, traj_pairs, self._train_config())
        return self
