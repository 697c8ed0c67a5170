"""State-value regressor: ``tanh(<w, phi(s)>)`` fitted by mean squared error."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted, column_or_1d

from ._validation import check_interval, check_nonempty, check_positive
from .exceptions import ConfigurationError, DivergenceError, ParseError, PreconditionError
from .policy import FEATURE_DIM, STATE_TOKEN, _feature_indices, featurize


@dataclass
class ValueParams:
    weights: np.ndarray
    feature_dim: int = FEATURE_DIM
    round: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.feature_dim,):
            raise ConfigurationError(
                f"weights shape {self.weights.shape} != ({self.feature_dim},)")
        if not np.all(np.isfinite(self.weights)):
            raise ConfigurationError("value weights must be finite")

    @classmethod
    def zeros(cls, feature_dim=FEATURE_DIM):
        return cls(np.zeros(feature_dim), feature_dim, 0)

    @property
    def version(self):
        return self.round


@dataclass(frozen=True)
class ValueLabel:
    """MCTS state value used as a regression target.

    Only the state's context tokens enter the features, so a label keeps the
    context and the canonical key rather than the whole state.
    """

    context: tuple
    target: float
    state_key: str = ""

    def __post_init__(self):
        check_interval("target", self.target, -1.0, 1.0, error=PreconditionError)

    @classmethod
    def from_state(cls, state, target):
        return cls(tuple(state.context), float(target), state.key())


def predict(params, state):
    return float(np.tanh(featurize(state, None, params.feature_dim).dot(params.weights)))


def _design(contexts, dim):
    rows = [_feature_indices(tuple(c), (STATE_TOKEN,), dim) for c in contexts]
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(r[0]) for r in rows])
    return sparse.csr_matrix(
        (np.concatenate([r[1] for r in rows]), np.concatenate([r[0] for r in rows]), indptr),
        shape=(len(rows), dim))


def mse_loss(params, labels):
    check_nonempty("labels", labels)
    X = _design([lab.context for lab in labels], params.feature_dim)
    y = np.array([lab.target for lab in labels])
    return float(np.mean((np.tanh(X @ params.weights) - y) ** 2))


def mse_grad(params, labels):
    """Dense gradient of :func:`mse_loss` with respect to the weights."""
    check_nonempty("labels", labels)
    X = _design([lab.context for lab in labels], params.feature_dim)
    y = np.array([lab.target for lab in labels])
    p = np.tanh(X @ params.weights)
    return X.T @ (2.0 * (p - y) * (1.0 - p ** 2)) / len(labels)


def fit(params, labels, epochs=300, lr=0.2):
    """Full-batch gradient descent on the MSE; returns ``(new_params, history)``.

    ``history[e]`` is the training loss after epoch ``e``'s update.
    """
    check_nonempty("labels", labels)
    check_positive("lr", lr)
    check_positive("epochs", epochs, integer=True)
    X = _design([lab.context for lab in labels], params.feature_dim)
    XT = X.T.tocsr()
    y = np.array([lab.target for lab in labels])
    w = params.weights.copy()
    history = []
    for epoch in range(epochs):
        p = np.tanh(X @ w)
        w -= lr * (XT @ (2.0 * (p - y) * (1.0 - p ** 2)) / len(y))
        loss = float(np.mean((np.tanh(X @ w) - y) ** 2))
        if not np.isfinite(loss):
            raise DivergenceError(f"value fit diverged at epoch {epoch}", epoch=epoch)
        history.append(loss)
    return ValueParams(w, params.feature_dim, params.round + 1), history


def save_labels(labels, path):
    with Path(path).open("w") as fh:
        for lab in labels:
            fh.write(json.dumps({"state_key": lab.state_key, "context": list(lab.context),
                                 "target": lab.target}) + "\n")
    return len(labels)


def load_labels(path):
    out = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                out.append(ValueLabel(tuple(d["context"]), float(d["target"]),
                                      d.get("state_key", "")))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(str(exc), line=lineno) from exc
    return out


class StateValueRegressor(RegressorMixin, BaseEstimator):
    """Estimator wrapper: ``fit(states, targets)`` then ``predict(states)``.

    ``X`` may hold :class:`~cplearn.env.State` objects or raw context tuples.
    """

    def __init__(self, feature_dim=FEATURE_DIM, epochs=300, lr=0.2):
        self.feature_dim = feature_dim
        self.epochs = epochs
        self.lr = lr

    @staticmethod
    def _contexts(X):
        return [tuple(getattr(x, "context", x)) for x in X]

    def fit(self, X, y):
        y = column_or_1d(np.asarray(y, dtype=np.float64))
        contexts = self._contexts(X)
        if len(contexts) != len(y):
            raise ValueError(f"X has {len(contexts)} samples but y has {len(y)}")
        labels = [ValueLabel(c, float(t)) for c, t in zip(contexts, y)]
        self.params_, self.loss_history_ = fit(
            ValueParams.zeros(self.feature_dim), labels, self.epochs, self.lr)
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        design = _design(self._contexts(X), self.feature_dim)
        return np.tanh(design @ self.params_.weights)
