import numpy as np
import pytest

from pimi import tensor as T
from pimi.config import ConfigError
from pimi.nn import AttentionParams, multi_head_attention
from pimi.tensor import Tensor

from oracles import central_difference, max_relative_error, mha_single


def params_from(rng, d):
    return AttentionParams.init(rng, d)


def identity_params(d):
    eye = np.eye(d)
    return AttentionParams(*(Tensor(eye.copy(), requires_grad=True) for _ in range(4)))


def test_single_key_returns_projected_value():
    rng = np.random.default_rng(0)
    p = params_from(rng, 4)
    value = rng.normal(size=(1, 4))
    expected = value @ p.wv.data @ p.wo.data
    for _ in range(3):
        q = Tensor(rng.normal(size=(1, 4)) * 10)
        out = multi_head_attention(q, Tensor(rng.normal(size=(1, 4))), Tensor(value), 2, p)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_weights_concentrate_on_aligned_key():
    keys = Tensor([[1.0, 0.0], [0.0, 1.0]])
    out, w = multi_head_attention(Tensor([[10.0, 0.0]]), keys, keys, 1, identity_params(2), return_weights=True)
    # scores 10/sqrt(2) and 0
    s = 10 / np.sqrt(2)
    expected = np.exp([s, 0]) / np.exp([s, 0]).sum()
    np.testing.assert_allclose(w[0, :, 0], expected, atol=1e-12)
    assert w[0, 0, 0] > 0.99
    np.testing.assert_allclose(out.data[0], expected @ keys.data, atol=1e-12)


def test_matches_loop_reference():
    rng = np.random.default_rng(1)
    p = params_from(rng, 8)
    q, tokens = rng.normal(size=(1, 8)), rng.normal(size=(5, 8))
    out = multi_head_attention(Tensor(q), Tensor(tokens), Tensor(tokens), 2, p)
    ref = mha_single(q[0], list(tokens), p.wq.data, p.wk.data, p.wv.data, p.wo.data, 2)
    np.testing.assert_allclose(out.data[0], ref, atol=1e-12)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    p = params_from(rng, 8)
    q, k, v = (Tensor(rng.normal(size=s), requires_grad=True) for s in [(1, 8), (4, 8), (4, 8)])
    weights = rng.normal(size=(1, 8))

    def loss():
        return T.tsum(multi_head_attention(q, k, v, 2, p) * weights)

    T.backward(loss())
    for t in [q, k, v, p.wq, p.wk, p.wv, p.wo]:
        numeric = central_difference(lambda: float(loss().data), t.data)
        assert max_relative_error(t.grad, numeric) < 1e-4
        t.grad = None


def test_permuting_key_value_pairs_is_invariant():
    rng = np.random.default_rng(3)
    p = params_from(rng, 6)
    q = Tensor(rng.normal(size=(1, 6)))
    k, v = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
    perm = rng.permutation(5)
    a = multi_head_attention(q, Tensor(k), Tensor(v), 1, p).data
    b = multi_head_attention(q, Tensor(k[perm]), Tensor(v[perm]), 1, p).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_masked_keys_are_ignored():
    rng = np.random.default_rng(4)
    p = params_from(rng, 4)
    q = Tensor(rng.normal(size=(1, 4)))
    k = rng.normal(size=(3, 4))
    mask = np.array([True, False, True])
    a = multi_head_attention(q, Tensor(k), Tensor(k), 2, p, key_mask=mask).data
    k2 = k.copy()
    k2[1] = 1e3
    b = multi_head_attention(q, Tensor(k2), Tensor(k2), 2, p, key_mask=mask).data
    np.testing.assert_array_equal(a, b)


def test_head_count_must_divide_dim():
    rng = np.random.default_rng(5)
    with pytest.raises(ConfigError):
        multi_head_attention(Tensor(np.ones((1, 6))), Tensor(np.ones((2, 6))), Tensor(np.ones((2, 6))),
                             4, params_from(rng, 6))
