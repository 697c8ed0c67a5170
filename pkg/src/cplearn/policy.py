"""Hashed linear-softmax policy over an enumerable candidate set.

The logit of action ``a`` at state ``s`` is ``<w, phi(s, a)>`` where ``phi``
hashes conjunctions of the state's context tokens with the action's tokens
into a ``feature_dim``-dimensional binary vector. Log-probabilities are a
log-softmax over the candidate list handed in, so they are exact.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import sparse

from ._validation import check_positive
from .exceptions import ConfigurationError, ParseError, PreconditionError

FEATURE_DIM = 2 ** 16
BIAS_TOKEN = "<bias>"
STATE_TOKEN = "<state>"


@dataclass(frozen=True)
class FeatureVector:
    """Sparse vector: sorted unique ``indices`` with matching ``values``."""

    indices: np.ndarray
    values: np.ndarray
    dim: int = FEATURE_DIM

    def dot(self, weights):
        return float(weights[self.indices] @ self.values)

    def to_dense(self):
        out = np.zeros(self.dim)
        out[self.indices] = self.values
        return out

    def as_dict(self):
        return dict(zip(self.indices.tolist(), self.values.tolist()))

    @property
    def nnz(self):
        return int(np.count_nonzero(self.values))


def _combine(indices, values, dim):
    """Merge duplicate indices by summation and drop exact zeros."""
    idx, inverse = np.unique(indices, return_inverse=True)
    vals = np.zeros(len(idx))
    np.add.at(vals, inverse, values)
    keep = vals != 0.0
    return FeatureVector(idx[keep], vals[keep], dim)


def _hash(text, dim):
    return zlib.crc32(text.encode("utf-8")) % dim


@lru_cache(maxsize=200_000)
def _feature_indices(context, tokens, dim):
    raw = [_hash(BIAS_TOKEN, dim)]
    for c in ("*",) + context:
        for t in tokens:
            raw.append(_hash(c + "\x1f" + t, dim))
    idx, counts = np.unique(np.asarray(raw, dtype=np.int64), return_counts=True)
    idx.setflags(write=False)
    counts = counts.astype(np.float64)
    counts.setflags(write=False)
    return idx, counts


def featurize_tokens(context, tokens, dim=FEATURE_DIM):
    idx, vals = _feature_indices(tuple(context), tuple(tokens), dim)
    return FeatureVector(idx, vals, dim)


def featurize(state, action, dim=FEATURE_DIM):
    """phi(state, action); ``action=None`` gives the state-only features."""
    tokens = (STATE_TOKEN,) if action is None else action.tokens
    return featurize_tokens(state.context, tokens, dim)


def candidate_matrix(context, candidate_tokens, dim=FEATURE_DIM):
    """CSR matrix with one row of features per candidate."""
    rows = [_feature_indices(tuple(context), tuple(t), dim) for t in candidate_tokens]
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(r[0]) for r in rows])
    indices = np.concatenate([r[0] for r in rows]) if rows else np.zeros(0, np.int64)
    data = np.concatenate([r[1] for r in rows]) if rows else np.zeros(0)
    return sparse.csr_matrix((data, indices, indptr), shape=(len(rows), dim))


@dataclass
class PolicyParams:
    weights: np.ndarray
    feature_dim: int = FEATURE_DIM
    version: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.feature_dim,):
            raise ConfigurationError(
                f"weights shape {self.weights.shape} != ({self.feature_dim},)")
        if not np.all(np.isfinite(self.weights)):
            raise ConfigurationError("policy weights must be finite")

    @classmethod
    def zeros(cls, feature_dim=FEATURE_DIM):
        return cls(np.zeros(feature_dim), feature_dim, 0)

    def snapshot(self):
        return PolicySnapshot.of(self)

    def copy(self, version=None):
        return PolicyParams(self.weights.copy(), self.feature_dim,
                            self.version if version is None else version)


@dataclass(frozen=True)
class PolicySnapshot:
    """Read-only copy of a policy, used as the reference for log-ratios."""

    weights: np.ndarray = field(repr=False)
    feature_dim: int
    version: int

    @classmethod
    def of(cls, params):
        w = np.array(params.weights, dtype=np.float64, copy=True)
        w.setflags(write=False)
        return cls(w, params.feature_dim, params.version)


def logits(params, state, candidates):
    return np.array([featurize(state, a, params.feature_dim).dot(params.weights)
                     for a in candidates])


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    m = z.max()
    return z - (m + math.log(np.exp(z - m).sum()))


def log_probs(params, state, candidates):
    if not candidates:
        raise PreconditionError("log_probs needs a non-empty candidate set")
    return log_softmax(logits(params, state, candidates))


def probs(params, state, candidates):
    return np.exp(log_probs(params, state, candidates))


def sample_distinct_indices(params, state, candidates, k, temperature, rng):
    """Indices of up to ``k`` candidates drawn without replacement.

    Gumbel-top-k: perturbing ``logits / temperature`` with i.i.d. Gumbel noise
    and keeping the k largest is equivalent to sequential sampling without
    replacement from the tempered softmax.
    """
    check_positive("k", k, integer=True)
    if not (isinstance(temperature, (int, float)) and temperature > 0):
        raise ConfigurationError(f"temperature must be > 0, got {temperature!r}")
    if not candidates:
        raise PreconditionError("cannot sample from an empty candidate set")
    z = logits(params, state, candidates) / temperature
    g = rng.gumbel(size=len(candidates))
    order = np.argsort(-(z + g), kind="stable")
    return [int(i) for i in order[: min(k, len(candidates))]]


def sample_distinct(params, state, candidates, k, temperature, rng):
    return [candidates[i] for i in
            sample_distinct_indices(params, state, candidates, k, temperature, rng)]


def grad_log_prob(params, state, candidates, chosen):
    """phi(s, a_chosen) - sum_b pi(b|s) phi(s, b), as a sparse vector."""
    if not 0 <= chosen < len(candidates):
        raise PreconditionError(f"chosen index {chosen} out of range [0, {len(candidates)})")
    feats = [featurize(state, a, params.feature_dim) for a in candidates]
    p = np.exp(log_softmax([f.dot(params.weights) for f in feats]))
    idx = np.concatenate([f.indices for f in feats] + [feats[chosen].indices])
    vals = np.concatenate([-pb * f.values for pb, f in zip(p, feats)]
                          + [feats[chosen].values])
    return _combine(idx, vals, params.feature_dim)


def greedy_action(params, state, candidates):
    return candidates[int(np.argmax(logits(params, state, candidates)))]


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(params, path, kind="policy"):
    version = getattr(params, "version", getattr(params, "round", 0))
    doc = {"kind": kind, "feature_dim": int(params.feature_dim), "version": int(version),
           "weights": [float(x) for x in params.weights]}
    if kind == "value":
        doc["round"] = int(version)
    Path(path).write_text(json.dumps(doc))
    return path


def load_checkpoint(path, kind=None):
    try:
        doc = json.loads(Path(path).read_text())
        found = doc.get("kind", "policy")
        weights = np.array(doc["weights"], dtype=np.float64)
        dim = int(doc["feature_dim"])
        version = int(doc["version"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad checkpoint {path}: {exc}") from exc
    if kind is not None and found != kind:
        raise ParseError(f"checkpoint {path} holds a {found!r} model, expected {kind!r}")
    if found == "value":
        from .value_model import ValueParams
        return ValueParams(weights, dim, version)
    return PolicyParams(weights, dim, version)
