import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from resourcenet.attention import (AttnParams, attend, attend_backward, attend_forward, keys_backward,
                                   precompute_keys)
from resourcenet.numerics import ParamStore, finite_diff_check


def random_attn(rng, key_dim, query_dim, m):
    return AttnParams(rng.normal(size=m), rng.normal(size=(m, key_dim)), rng.normal(size=(m, query_dim)),
                      rng.normal(size=m))


def test_identity_keys_and_zero_E():
    rng = np.random.default_rng(0)
    p = random_attn(rng, 3, 2, 3)
    p.W_mu[...] = np.eye(3)
    E = rng.normal(size=(3, 4))
    np.testing.assert_array_equal(precompute_keys(E, p), E)
    assert not precompute_keys(np.zeros((3, 4)), p).any()
    with pytest.raises(ValueError):
        precompute_keys(np.zeros((2, 4)), p)


def test_cached_keys_match():
    rng = np.random.default_rng(1)
    p = random_attn(rng, 3, 2, 5)
    E, s = rng.normal(size=(3, 4)), rng.normal(size=2)
    a, b = attend(E, s, p), attend(E, s, p, precompute_keys(E, p))
    for f in ("energies", "weights", "context"):
        np.testing.assert_allclose(getattr(a, f), getattr(b, f), atol=1e-12, rtol=0)


def test_singleton_and_zero_v():
    rng = np.random.default_rng(2)
    p = random_attn(rng, 4, 3, 5)
    E, s = rng.normal(size=(4, 1)), rng.normal(size=3)
    step = attend(E, s, p)
    np.testing.assert_array_equal(step.weights, [1.0])
    np.testing.assert_allclose(step.context, E[:, 0], atol=1e-15)
    p.v[:] = 0.0
    E = rng.normal(size=(4, 6))
    step = attend(E, s, p)
    assert not step.energies.any()
    np.testing.assert_allclose(step.weights, np.full(6, 1 / 6), atol=1e-15)
    np.testing.assert_allclose(step.context, E.mean(axis=1), atol=1e-14)


def test_constructed_weights():
    # one hidden unit per column: mu_k = v_k * tanh(1) = ln(p_k)
    target = np.array([0.3, 0.7])
    p = AttnParams(np.log(target) / np.tanh(1.0), np.eye(2), np.zeros((2, 1)), np.zeros(2))
    step = attend(np.eye(2), np.zeros(1), p)
    np.testing.assert_allclose(step.energies, np.log(target), atol=1e-15)
    np.testing.assert_allclose(step.weights, target, atol=1e-15)
    np.testing.assert_allclose(step.context, target, atol=1e-15)


def test_errors():
    p = AttnParams(np.zeros(2), np.zeros((2, 3)), np.zeros((2, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        attend(np.zeros((3, 0)), np.zeros(2), p)
    with pytest.raises(ValueError):
        attend(np.zeros((3, 2)), np.zeros(3), p)
    with pytest.raises(ValueError):
        AttnParams(np.zeros(2), np.zeros((3, 3)), np.zeros((2, 2)), np.zeros(2))


def test_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    p = random_attn(rng, 4, 3, 5)
    E, s = rng.normal(size=(4, 6)), rng.normal(size=3)
    step = attend(E, s, p)
    mu, alpha, c = oracles.attention(E.tolist(), s.tolist(), oracles.tolist(p))
    np.testing.assert_allclose(step.energies, mu, atol=1e-12, rtol=0)
    np.testing.assert_allclose(step.weights, alpha, atol=1e-12, rtol=0)
    np.testing.assert_allclose(step.context, c, atol=1e-12, rtol=0)


@given(st.integers(0, 10_000), st.integers(1, 8))
def test_weights_and_context_properties(seed, n):
    rng = np.random.default_rng(seed)
    p = random_attn(rng, 4, 3, 5)
    E, s = rng.normal(size=(4, n)) * 3, rng.normal(size=3)
    step = attend(E, s, p)
    assert abs(step.weights.sum() - 1.0) < 1e-10
    assert np.all((step.weights >= 0) & (step.weights <= 1))
    explicit = sum(step.weights[k] * E[:, k] for k in range(n))
    np.testing.assert_allclose(step.context, explicit, atol=1e-12, rtol=0)
    assert step.context.shape == (4,)


@given(st.integers(0, 10_000), st.permutations(range(5)))
def test_column_permutation(seed, perm):
    rng = np.random.default_rng(seed)
    p = random_attn(rng, 3, 2, 4)
    E, s = rng.normal(size=(3, 5)), rng.normal(size=2)
    a, b = attend(E, s, p), attend(E[:, list(perm)], s, p)
    np.testing.assert_allclose(b.energies, a.energies[list(perm)], atol=1e-12)
    np.testing.assert_allclose(b.weights, a.weights[list(perm)], atol=1e-12)
    np.testing.assert_allclose(b.context, a.context, atol=1e-12)


def test_attention_gradients():
    rng = np.random.default_rng(4)
    store = ParamStore()
    p = AttnParams.init(store, "a", 4, 3, 5, rng)
    store.add("E", rng.normal(size=(4, 6)))
    store.add("s", rng.normal(size=3))
    g = AttnParams.grads_from_store(store, "a")
    w = rng.normal(size=4)

    def fwd():
        E, s = store["E"], store["s"]
        K = precompute_keys(E, p)
        step, cache = attend_forward(E, s, p, K)
        dK = np.zeros_like(K)
        ds = attend_backward(w, cache, p, g, store.grads["E"], dK)
        keys_backward(dK, E, p, g, store.grads["E"])
        store.grads["s"] += ds
        return float(w @ step.context)

    assert finite_diff_check(fwd, store) < 1e-4
