import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cplearn import policy as pol
from cplearn.env import ArithChain
from cplearn.exceptions import ConfigurationError, ParseError, PreconditionError

from conftest import central_diff, rel_err

DIM = 2 ** 10


def random_state(seed):
    env = ArithChain()
    rng = np.random.default_rng(seed)
    (p,) = env.generate_problems(seed, 1, "mixed")
    s = env.initial_state(p)
    for _ in range(int(rng.integers(0, 4))):
        if env.is_terminal(s):
            break
        cands = env.candidate_actions(s)
        s = env.apply(s, cands[int(rng.integers(len(cands)))])
    if env.is_terminal(s):
        s = env.initial_state(p)
    return env, s, env.candidate_actions(s)


def test_featurize_deterministic_with_bias(arith):
    env, s, cands = random_state(0)
    f1, f2 = pol.featurize(s, cands[0]), pol.featurize(s, cands[0])
    assert np.array_equal(f1.indices, f2.indices) and np.array_equal(f1.values, f2.values)
    assert f1.nnz >= 1
    assert pol.featurize(s, None).nnz >= 1
    assert np.all((f1.indices >= 0) & (f1.indices < pol.FEATURE_DIM))


def test_hash_collisions_are_rare():
    rng = np.random.default_rng(0)
    same = 0
    for _ in range(10_000):
        ctx = (f"depth={rng.integers(6)}", f"left={rng.integers(6)}")
        a, b = rng.choice(50, size=2, replace=False)
        fa = pol.featurize_tokens(ctx, (f"compute q{a} next",))
        fb = pol.featurize_tokens(ctx, (f"compute q{b} next",))
        same += np.array_equal(fa.indices, fb.indices)
    assert same == 0


def test_uniform_at_zero():
    _, s, cands = random_state(3)
    params = pol.PolicyParams.zeros(DIM)
    lp = pol.log_probs(params, s, cands)
    assert np.allclose(lp, -math.log(len(cands)))


def test_two_logit_softmax():
    p = np.exp(pol.log_softmax([1.0, 0.0]))
    assert p == pytest.approx([0.7310585786, 0.2689414214], abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(z=st.lists(st.floats(-50, 50), min_size=1, max_size=12), c=st.floats(-100, 100))
def test_softmax_normalized_and_shift_invariant(z, c):
    lp = pol.log_softmax(z)
    assert abs(np.exp(lp).sum() - 1.0) < 1e-12
    assert np.allclose(pol.log_softmax(np.asarray(z) + c), lp, atol=1e-9)


def test_empty_candidates_rejected():
    _, s, _ = random_state(1)
    with pytest.raises(PreconditionError):
        pol.log_probs(pol.PolicyParams.zeros(DIM), s, [])


def test_sampling_exhaustion_and_determinism():
    _, s, cands = random_state(2)
    params = pol.PolicyParams(np.random.default_rng(0).normal(size=DIM), DIM)
    everything = pol.sample_distinct(params, s, cands, len(cands) + 3, 0.7,
                                     np.random.default_rng(5))
    assert sorted(a.display for a in everything) == sorted(a.display for a in cands)
    a = pol.sample_distinct_indices(params, s, cands, 2, 0.7, np.random.default_rng(9))
    b = pol.sample_distinct_indices(params, s, cands, 2, 0.7, np.random.default_rng(9))
    assert a == b and len(set(a)) == 2


def test_low_temperature_is_argmax():
    _, s, cands = random_state(4)
    params = pol.PolicyParams(np.random.default_rng(1).normal(size=DIM), DIM)
    best = int(np.argmax(pol.logits(params, s, cands)))
    for seed in range(20):
        got = pol.sample_distinct_indices(params, s, cands, 1, 1e-6,
                                          np.random.default_rng(seed))
        assert got == [best]


def test_sampling_frequencies_match_softmax():
    _, s, cands = random_state(6)
    params = pol.PolicyParams(np.random.default_rng(2).normal(size=DIM), DIM)
    p = pol.probs(params, s, cands)
    rng = np.random.default_rng(0)
    counts = np.zeros(len(cands))
    n = 20_000
    for _ in range(n):
        counts[pol.sample_distinct_indices(params, s, cands, 1, 1.0, rng)[0]] += 1
    assert np.abs(counts / n - p).max() < 0.02


def test_bad_temperature():
    _, s, cands = random_state(0)
    with pytest.raises(ConfigurationError):
        pol.sample_distinct(pol.PolicyParams.zeros(DIM), s, cands, 1, 0.0,
                            np.random.default_rng(0))


def test_single_candidate_zero_gradient():
    _, s, cands = random_state(0)
    params = pol.PolicyParams(np.random.default_rng(0).normal(size=DIM), DIM)
    g = pol.grad_log_prob(params, s, cands[:1], 0)
    assert np.allclose(g.to_dense(), 0.0)


@pytest.mark.parametrize("seed", range(100))
def test_grad_log_prob_finite_differences(seed):
    _, s, cands = random_state(seed)
    rng = np.random.default_rng(seed)
    params = pol.PolicyParams(rng.normal(scale=0.5, size=DIM), DIM)
    k = int(rng.integers(len(cands)))
    g = pol.grad_log_prob(params, s, cands, k).to_dense()
    idx = np.unique(np.concatenate([pol.featurize(s, a, DIM).indices for a in cands]))

    def f(w):
        return pol.log_probs(pol.PolicyParams(w, DIM), s, cands)[k]

    assert rel_err(g[idx], central_diff(f, params.weights, idx)) < 1e-6
    assert np.allclose(np.delete(g, idx), 0.0)


def test_expected_gradient_is_zero():
    _, s, cands = random_state(8)
    params = pol.PolicyParams(np.random.default_rng(3).normal(size=DIM), DIM)
    p = pol.probs(params, s, cands)
    total = sum(pb * pol.grad_log_prob(params, s, cands, i).to_dense()
                for i, pb in enumerate(p))
    assert np.abs(total).max() < 1e-12


def test_snapshot_is_frozen():
    params = pol.PolicyParams(np.ones(DIM), DIM)
    snap = pol.PolicySnapshot.of(params)
    params.weights += 1.0
    assert np.all(snap.weights == 1.0)
    with pytest.raises(ValueError):
        snap.weights[0] = 3.0


def test_params_validation():
    with pytest.raises(ConfigurationError):
        pol.PolicyParams(np.array([np.nan] * 4), 4)
    with pytest.raises(ConfigurationError):
        pol.PolicyParams(np.zeros(3), 4)


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    w = np.random.default_rng(0).normal(size=DIM) * 1e-3
    params = pol.PolicyParams(w, DIM, version=7)
    path = pol.save_checkpoint(params, tmp_path / "p.json")
    back = pol.load_checkpoint(path, "policy")
    assert back.version == 7 and back.feature_dim == DIM
    assert np.array_equal(back.weights, w)
    with pytest.raises(ParseError):
        pol.load_checkpoint(path, "value")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ParseError):
        pol.load_checkpoint(tmp_path / "bad.json")
