import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsrelab.numcore import (
    ConfigurationError,
    DegenerateInputError,
    NumericalError,
    ShapeError,
    Tensor,
    UsageError,
    check_gradients,
    conv1d_grouped,
    cosine_similarity,
    gelu,
    l2_normalize,
    layer_norm,
    log_softmax,
    log_sum_exp,
    no_grad,
    ops,
    relu,
    softmax,
    stream,
)


def direct_conv(h, kernel, groups):
    """Triple-loop grouped cross-correlation with zero 'same' padding."""
    T, c_in = h.shape
    c_out, c_in_g, k = kernel.shape
    c_out_g = c_out // groups
    pad = k // 2
    out = np.zeros((T, c_out))
    for t in range(T):
        for o in range(c_out):
            g = o // c_out_g
            for c in range(c_in_g):
                for j in range(k):
                    src = t + j - pad
                    if 0 <= src < T:
                        out[t, o] += kernel[o, c, j] * h[src, g * c_in_g + c]
    return out


def param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


# -- matmul ---------------------------------------------------------------

def test_matmul_identity_and_hand_sum():
    a = np.array([[2.0, -1.0], [0.5, 3.0]])
    assert np.array_equal((Tensor(np.eye(2)) @ Tensor(a)).data, a)
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
    assert np.array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


def test_matmul_gradcheck():
    rng = np.random.default_rng(0)
    a, b = param(rng, 3, 4), param(rng, 4, 2)
    res = check_gradients(lambda: (a @ b).sum(), {"a": a, "b": b})
    assert max(r.max_rel_err for r in res.values()) < 1e-6


def test_batched_matmul_gradcheck():
    rng = np.random.default_rng(1)
    a, b = param(rng, 2, 3, 4), param(rng, 4, 5)
    w = Tensor(rng.normal(size=(2, 3, 5)))
    res = check_gradients(lambda: ((a @ b) * w).sum(), {"a": a, "b": b})
    assert max(r.max_rel_err for r in res.values()) < 1e-6


# -- layer norm -----------------------------------------------------------

def test_layer_norm_analytic():
    out = layer_norm(Tensor([1.0, 2.0, 3.0]), np.ones(3), np.zeros(3), eps=0.0)
    expected = np.array([-1.0, 0.0, 1.0]) / math.sqrt(2.0 / 3.0)
    np.testing.assert_allclose(out.data, expected, atol=1e-12)
    np.testing.assert_allclose(out.data, [-1.22474, 0.0, 1.22474], atol=1e-5)


def test_layer_norm_constant_input():
    out = layer_norm(Tensor([4.0, 4.0, 4.0]), np.full(3, 2.0), np.zeros(3))
    assert np.array_equal(out.data, np.zeros(3))


def test_layer_norm_gradcheck():
    rng = np.random.default_rng(2)
    h, g, b = param(rng, 2, 5), param(rng, 5), param(rng, 5)
    w = Tensor(rng.normal(size=(2, 5)))
    res = check_gradients(lambda: (layer_norm(h, g, b) * w).sum(), {"h": h, "g": g, "b": b})
    assert max(r.max_rel_err for r in res.values()) < 1e-5


def test_layer_norm_feature_mismatch():
    with pytest.raises(ShapeError):
        layer_norm(Tensor(np.ones((2, 4))), np.ones(3), np.zeros(4))


# -- grouped convolution --------------------------------------------------

def test_conv_depthwise_zero_kernel():
    h = Tensor(np.random.default_rng(3).normal(size=(6, 4)))
    out = conv1d_grouped(h, Tensor(np.zeros((4, 1, 3))), groups=4)
    assert np.array_equal(out.data, np.zeros((6, 4)))


def test_conv_identity_kernel():
    h = np.array([[1.0], [-2.0], [3.5], [0.25]])
    out = conv1d_grouped(Tensor(h), Tensor(np.array([[[0.0, 1.0, 0.0]]])), groups=1)
    assert np.array_equal(out.data, h)


def test_conv_matches_direct_summation():
    rng = np.random.default_rng(4)
    h = rng.normal(size=(7, 4))
    kernel = rng.normal(size=(4, 2, 3))
    out = conv1d_grouped(Tensor(h), Tensor(kernel), groups=2)
    assert np.max(np.abs(out.data - direct_conv(h, kernel, 2))) < 1e-12


@settings(max_examples=60, deadline=None)
@given(
    T=st.integers(1, 8),
    C=st.integers(1, 8),
    k=st.sampled_from([1, 3, 5]),
    group_kind=st.sampled_from(["one", "two", "depthwise"]),
    seed=st.integers(0, 2**31 - 1),
)
def test_conv_oracle_property(T, C, k, group_kind, seed):
    G = {"one": 1, "two": 2, "depthwise": C}[group_kind]
    if C % G:
        C = 2 * C if G == 2 else C
    rng = np.random.default_rng(seed)
    h = rng.normal(size=(T, C))
    kernel = rng.normal(size=(C, C // G, k))
    out = conv1d_grouped(Tensor(h), Tensor(kernel), groups=G)
    assert np.max(np.abs(out.data - direct_conv(h, kernel, G))) < 1e-12


def test_conv_per_sample_kernels_match_loop():
    rng = np.random.default_rng(5)
    h = rng.normal(size=(3, 6, 4))
    kernels = rng.normal(size=(3, 4, 1, 5))
    out = conv1d_grouped(Tensor(h), Tensor(kernels), groups=4)
    for b in range(3):
        ref = direct_conv(h[b], kernels[b], 4)
        assert np.max(np.abs(out.data[b] - ref)) < 1e-12


def test_conv_configuration_errors():
    h = Tensor(np.ones((5, 6)))
    with pytest.raises(ConfigurationError):
        conv1d_grouped(h, Tensor(np.ones((6, 1, 3))), groups=4)
    with pytest.raises(ConfigurationError):
        conv1d_grouped(h, Tensor(np.ones((6, 6, 2))), groups=1)


@pytest.mark.parametrize("groups,per_sample", [(1, False), (2, False), (4, False), (4, True)])
def test_conv_gradcheck(groups, per_sample):
    rng = np.random.default_rng(6)
    h = param(rng, 2, 6, 4)
    kshape = (2, 4, 4 // groups, 3) if per_sample else (4, 4 // groups, 3)
    kernel = param(rng, *kshape)
    w = Tensor(rng.normal(size=(2, 6, 4)))
    res = check_gradients(lambda: (conv1d_grouped(h, kernel, groups) * w).sum(),
                          {"h": h, "kernel": kernel})
    assert max(r.max_rel_err for r in res.values()) < 1e-6


# -- softmax family and elementwise ---------------------------------------

def test_softmax_uniform():
    out = softmax(Tensor(np.full(5, 3.7)))
    np.testing.assert_allclose(out.data, np.full(5, 0.2), atol=1e-15)


def test_log_sum_exp_values():
    assert abs(log_sum_exp(Tensor([0.0, 0.0])).item() - math.log(2)) < 1e-15
    big = log_sum_exp(Tensor([1000.0, 1000.0])).item()
    assert abs(big - (1000.0 + math.log(2))) < 1e-9


@pytest.mark.parametrize("fn", [
    lambda x: softmax(x, axis=-1),
    lambda x: log_softmax(x, axis=0),
    lambda x: log_sum_exp(x, axis=1, keepdims=True),
    lambda x: log_sum_exp(x, axis=None),
    lambda x: ops.exp(x),
    lambda x: ops.log(ops.exp(x) + 1.0),
    lambda x: gelu(x),
    lambda x: relu(x),
    lambda x: ops.sqrt(x * x + 1.0),
    lambda x: l2_normalize(x),
    lambda x: x.mean(axis=0),
    lambda x: x.transpose(1, 0)[1:, ::2],
    lambda x: ops.stack([x, x * 2.0], axis=1),
    lambda x: ops.concat([x, x * x], axis=1),
    lambda x: x / (x * x + 2.0),
], ids=["softmax", "log_softmax", "lse_keep", "lse_all", "exp", "softplus", "gelu", "relu",
        "sqrt", "l2norm", "mean", "index", "stack", "concat", "div"])
def test_elementwise_gradcheck(fn):
    rng = np.random.default_rng(7)
    x = param(rng, 3, 4)
    # keep relu away from its kink
    x.data[np.abs(x.data) < 1e-2] = 0.5
    res = check_gradients(lambda: (fn(x) * Tensor(np.arange(fn(x).size).reshape(fn(x).shape)
                                                 * 0.1 + 0.3)).sum(), {"x": x})
    assert res["x"].max_rel_err < 1e-6


def test_non_finite_is_an_error():
    with pytest.raises(NumericalError):
        ops.log(Tensor([0.0, 1.0]))
    with pytest.raises(NumericalError):
        Tensor([np.nan])


# -- cosine similarity ----------------------------------------------------

def test_cosine_similarity_cases():
    v = Tensor([0.3, -2.0, 1.5])
    assert abs(cosine_similarity(v, v).item() - 1.0) < 1e-15
    assert cosine_similarity(Tensor([1.0, 0.0]), Tensor([0.0, 1.0])).item() == 0.0
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=6), rng.normal(size=6)
    expected = sum(x * y for x, y in zip(a, b)) / (
        math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))
    assert abs(cosine_similarity(Tensor(a), Tensor(b)).item() - expected) < 1e-12
    with pytest.raises(DegenerateInputError):
        cosine_similarity(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]))


def test_cosine_similarity_gradcheck():
    rng = np.random.default_rng(9)
    a, b = param(rng, 5), param(rng, 5)
    res = check_gradients(lambda: cosine_similarity(a, b), {"a": a, "b": b})
    assert max(r.max_rel_err for r in res.values()) < 1e-6


# -- backward semantics ---------------------------------------------------

def test_backward_sum_and_square_norm():
    w = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    w.sum().backward()
    assert np.array_equal(w.grad, np.ones(3))
    w.zero_grad()
    (w * w).sum().backward()
    assert np.array_equal(w.grad, 2 * w.data)


def test_backward_accumulates():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    w.sum().backward()
    w.sum().backward()
    assert np.array_equal(w.grad, [2.0, 2.0])


def test_backward_rejects_non_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        (w * 2.0).backward()


def test_no_grad_builds_no_graph():
    w = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        out = (w * 2.0).sum()
    assert not out.requires_grad


def test_gradients_bit_identical_across_replays():
    def run():
        rng = np.random.default_rng(10)
        a, b = param(rng, 4, 3), param(rng, 3, 3)
        loss = log_sum_exp(layer_norm(a @ b, np.ones(3), np.zeros(3)), axis=None)
        loss.backward()
        return a.grad.tobytes() + b.grad.tobytes()

    assert run() == run()


def test_stream_is_path_keyed_and_reproducible():
    a1 = stream(7, "encoder/w").normal(size=4)
    a2 = stream(7, "encoder/w").normal(size=4)
    b = stream(7, "encoder/v").normal(size=4)
    c = stream(8, "encoder/w").normal(size=4)
    assert a1.tobytes() == a2.tobytes()
    assert not np.array_equal(a1, b)
    assert not np.array_equal(a1, c)
