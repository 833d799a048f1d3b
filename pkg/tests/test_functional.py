import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from micap import functional as F
from micap.gradcheck import finite_diff_check
from micap.tensor import Tensor


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def naive_conv(x, w, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    b, c, h, wd = xp.shape
    f, _, k, _ = w.shape
    ho, wo = (h - k) // stride + 1, (wd - k) // stride + 1
    out = np.zeros((b, f, ho, wo))
    for n in range(b):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    out[n, o, i, j] = sum(xp[n, ci, i * stride + a, j * stride + bb] * w[o, ci, a, bb]
                                          for ci in range(c) for a in range(k) for bb in range(k))
    return out


# -- cross-entropy ---------------------------------------------------------------

def test_uniform_logits_give_log_vocab():
    loss = F.softmax_cross_entropy(t64(np.zeros((3, 16))), [0, 5, 15])
    assert abs(loss.item() - math.log(16)) < 1e-12


def test_confident_logit_gives_zero_loss():
    z = np.zeros((2, 4))
    z[[0, 1], [1, 3]] = 1e4
    assert F.softmax_cross_entropy(t64(z), [1, 3]).item() < 1e-12


def test_cross_entropy_matches_extended_precision(rng):
    z = rng.standard_normal((3, 5))
    y = np.array([4, 0, 2])
    getcontext().prec = 40
    ref = 0
    for row, t in zip(z, y):
        lse = sum(Decimal(float(v)).exp() for v in row).ln()
        ref += lse - Decimal(float(row[t]))
    ref = float(ref / 3)
    assert abs(F.softmax_cross_entropy(t64(z), y).item() - ref) < 1e-14


def test_ignore_index_and_rejections():
    z = t64(np.zeros((3, 4)))
    assert abs(F.softmax_cross_entropy(z, [1, 0, 0], ignore_index=0).item() - math.log(4)) < 1e-12
    with pytest.raises(ValueError, match="ignored"):
        F.softmax_cross_entropy(z, [0, 0, 0], ignore_index=0)
    with pytest.raises(ValueError, match="outside"):
        F.softmax_cross_entropy(z, [0, 4, 1])


def test_cross_entropy_gradient(rng):
    y = np.array([1, 3])
    assert finite_diff_check(lambda x: F.softmax_cross_entropy(x, y), t64(rng.standard_normal((2, 4))), 1e-5) < 1e-4


def test_binary_cross_entropy_gradient(rng):
    y = (rng.random((3, 4)) > 0.5).astype(float)
    assert finite_diff_check(lambda x: F.sigmoid_binary_cross_entropy(x, y), t64(rng.standard_normal((3, 4)))) < 1e-4


# -- convolution and pooling ----------------------------------------------------------

def test_conv_counting_case():
    out = F.conv2d(t64(np.ones((1, 1, 3, 3))), t64(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0


def test_conv_unit_kernel_is_identity(rng):
    x = rng.standard_normal((2, 1, 5, 5))
    assert np.array_equal(F.conv2d(t64(x), t64(np.ones((1, 1, 1, 1)))).data, x)


@pytest.mark.parametrize("stride,pad,k", [(2, 0, 2), (1, 1, 3), (2, 1, 3)])
def test_conv_matches_nested_loops(stride, pad, k, rng):
    x = rng.integers(-3, 4, (2, 2, 5, 5)).astype(np.float64)
    w = rng.integers(-2, 3, (3, 2, k, k)).astype(np.float64)
    assert np.array_equal(F.conv2d(t64(x), t64(w), stride=stride, pad=pad).data, naive_conv(x, w, stride, pad))


def test_conv_rejects_empty_output():
    with pytest.raises(ValueError):
        F.conv2d(t64(np.ones((1, 1, 2, 2))), t64(np.ones((1, 1, 3, 3))))


def test_conv_gradients(rng):
    w = t64(rng.standard_normal((3, 2, 3, 3)))
    x = t64(rng.standard_normal((2, 2, 5, 5)))
    c = rng.standard_normal((2, 3, 3, 3))
    assert finite_diff_check(lambda x: (F.conv2d(x, w, stride=2, pad=1) * t64(c)).sum(), x) < 1e-4
    assert finite_diff_check(lambda w: (F.conv2d(x, w, stride=2, pad=1) * t64(c)).sum(), w) < 1e-4


def test_max_pool_and_global_pool_gradients(rng):
    x = t64(rng.permutation(50).reshape(1, 2, 5, 5) / 7.0)
    c = t64(rng.standard_normal((1, 2, 3, 3)))
    assert finite_diff_check(lambda x: (F.max_pool2d(x, 3, 2, 1) * c).sum(), x) < 1e-4
    d = t64(rng.standard_normal((1, 2)))
    assert finite_diff_check(lambda x: (F.global_avg_pool(x) * d).sum(), x) < 1e-4


# -- normalisation, embedding, dropout ------------------------------------------------------

def test_layer_norm_gradients(rng):
    g, b = t64(rng.standard_normal(4)), t64(rng.standard_normal(4))
    c = t64(rng.standard_normal((3, 4)))
    x = t64(rng.standard_normal((3, 4)))
    assert finite_diff_check(lambda x: (F.layer_norm(x, g, b) * c).sum(), x) < 1e-4
    assert finite_diff_check(lambda g: (F.layer_norm(x, g, b) * c).sum(), g) < 1e-4


def test_batch_norm_training_gradient_and_running_stats(rng):
    g, b = t64(rng.standard_normal(2)), t64(rng.standard_normal(2))
    c = t64(rng.standard_normal((3, 2, 2, 2)))
    x = t64(rng.standard_normal((3, 2, 2, 2)))

    def f(x):
        return (F.batch_norm(x, g, b, np.zeros(2), np.ones(2), training=True) * c).sum()

    assert finite_diff_check(f, x) < 1e-4
    rm, rv = np.zeros(2), np.ones(2)
    F.batch_norm(x, g, b, rm, rv, training=True, momentum=0.1)
    assert np.allclose(rm, 0.1 * x.data.mean(axis=(0, 2, 3)))


def test_batch_norm_inference_treats_images_independently(rng):
    g, b = t64(np.ones(2)), t64(np.zeros(2))
    img = rng.standard_normal((1, 2, 3, 3))
    x = t64(np.concatenate([img, img, rng.standard_normal((1, 2, 3, 3))]))
    out = F.batch_norm(x, g, b, np.zeros(2), np.ones(2), training=False).data
    assert np.array_equal(out[0], out[1])


def test_embedding_gradient_accumulates_repeats(rng):
    table = t64(rng.standard_normal((5, 3)), grad=True)
    F.embedding(table, np.array([1, 1, 4])).sum().backward()
    assert np.array_equal(table.grad[:, 0], [0, 2, 0, 0, 1])
    with pytest.raises(ValueError):
        F.embedding(table, np.array([5]))


def test_dropout_needs_stream_and_is_identity_in_eval(rng):
    x = t64(np.ones((4, 4)))
    assert F.dropout(x, 0.5, None, training=False) is x
    with pytest.raises(ValueError):
        F.dropout(x, 0.5, None, training=True)
    y = F.dropout(x, 0.5, rng, training=True).data
    assert set(np.unique(y)) <= {0.0, 2.0}


def test_composite_conv_norm_linear_cross_entropy(rng):
    w = t64(rng.standard_normal((3, 2, 3, 3)) * 0.5)
    g, b = t64(np.ones(3)), t64(np.zeros(3))
    lin = t64(rng.standard_normal((3, 4)))
    y = np.array([0, 3])

    def f(x):
        h = F.batch_norm(F.conv2d(x, w, pad=1), g, b, np.zeros(3), np.ones(3), training=True)
        return F.softmax_cross_entropy(F.global_avg_pool(h.relu()) @ lin, y)

    assert finite_diff_check(f, t64(rng.standard_normal((2, 2, 4, 4)))) < 1e-4


@given(arrays(np.float64, (3, 6), elements=st.floats(-30, 30)))
def test_softmax_rows_are_distributions(z):
    p = F.softmax(t64(z)).data
    assert np.all(p >= 0) and np.allclose(p.sum(axis=1), 1.0)


@given(arrays(np.float64, (2, 5), elements=st.floats(-10, 10)), st.integers(0, 4))
def test_masked_entries_get_zero_probability(z, k):
    mask = np.ones((2, 5), bool)
    mask[:, k] = False
    p = F.softmax(t64(z), mask=mask).data
    assert np.all(p[:, k] == 0) and np.allclose(p.sum(axis=1), 1.0)
