import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from annealprune.tensor import (DimensionError, NumericError, Rng, conv2d_forward, matmul,
                                maxpool2x2, rng_uniform)
from helpers import naive_conv, naive_matmul, naive_maxpool


def test_matmul_identity():
    out = matmul(np.eye(2), np.array([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(out, [[3, 4], [5, 6]])


def test_matmul_row_by_column():
    assert matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).tolist() == [[11.0]]


def test_matmul_matches_triple_loop(gen):
    a = gen.standard_normal((7, 5)).astype(np.float32)
    b = gen.standard_normal((5, 3)).astype(np.float32)
    np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), rtol=1e-6, atol=1e-6)


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_matmul_rejects_non_finite():
    with pytest.raises(NumericError):
        matmul(np.array([[np.inf]]), np.array([[1.0]]))


def test_conv_zero_input_broadcasts_bias(gen):
    filters = gen.standard_normal((4, 3, 3, 1))
    bias = np.array([0.5, -1.0, 2.0, 0.0])
    out = conv2d_forward(np.zeros((5, 5, 1)), filters, bias, "same")
    assert out.shape == (5, 5, 4)
    np.testing.assert_array_equal(out, np.broadcast_to(bias, (5, 5, 4)))


def test_conv_first_cifar_layer_shape_and_count(gen):
    filters = gen.standard_normal((32, 3, 3, 3)).astype(np.float32)
    bias = np.zeros(32, np.float32)
    out = conv2d_forward(gen.random((32, 32, 3)).astype(np.float32), filters, bias, "same")
    assert out.shape == (32, 32, 32)
    assert filters.size + bias.size == 896


@pytest.mark.parametrize("padding", ["same", "valid"])
def test_conv_matches_loop_oracle(gen, padding):
    x = gen.standard_normal((8, 8, 2))
    filters = gen.standard_normal((3, 3, 3, 2))
    bias = gen.standard_normal(3)
    np.testing.assert_allclose(conv2d_forward(x, filters, bias, padding),
                               naive_conv(x, filters, bias, padding), rtol=1e-5, atol=1e-9)


def test_conv_valid_shrinks_by_two(gen):
    out = conv2d_forward(gen.random((10, 7, 3)), gen.random((2, 3, 3, 3)), np.zeros(2), "valid")
    assert out.shape == (8, 5, 2)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError, match="channel"):
        conv2d_forward(np.zeros((5, 5, 2)), np.zeros((1, 3, 3, 3)), np.zeros(1))


def test_conv_batched_equals_per_image(gen):
    xs = gen.standard_normal((3, 6, 6, 2))
    filters = gen.standard_normal((4, 3, 3, 2))
    bias = gen.standard_normal(4)
    batched = conv2d_forward(xs, filters, bias, "valid")
    for i in range(3):
        np.testing.assert_allclose(batched[i], conv2d_forward(xs[i], filters, bias, "valid"))


def test_maxpool_single_window():
    out, idx = maxpool2x2(np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None])
    assert out.tolist() == [[[4.0]]]
    assert idx.tolist() == [[[3]]]


def test_maxpool_floor_semantics():
    out, _ = maxpool2x2(np.zeros((13, 13, 4)))
    assert out.shape == (6, 6, 4)


def test_maxpool_constant():
    out, _ = maxpool2x2(np.full((6, 4, 2), 3.5))
    np.testing.assert_array_equal(out, np.full((3, 2, 2), 3.5))


def test_maxpool_too_small():
    with pytest.raises(DimensionError):
        maxpool2x2(np.zeros((1, 4, 1)))


def test_uniform_degenerate_interval(rng):
    assert rng_uniform(rng, 0.3, 0.3) == 0.3


def test_uniform_rejects_empty_interval(rng):
    with pytest.raises(ValueError):
        rng_uniform(rng, 1.0, 0.0)


def test_uniform_sample_mean():
    rng = Rng(5)
    draws = np.array([rng_uniform(rng, 0.0, 1.0) for _ in range(100_000)])
    assert abs(draws.mean() - 0.5) < 0.01
    assert draws.min() >= 0.0 and draws.max() < 1.0


def test_same_seed_same_stream():
    a, b = Rng(42), Rng(42)
    assert [a.uniform() for _ in range(20)] == [b.uniform() for _ in range(20)]


def test_derived_streams_differ():
    root = Rng(7)
    streams = [root.derive(c) for c in ("init", "dropout", "reentry", 0, 1, 2)]
    firsts = [tuple(s.generator.random(16)) for s in streams]
    assert len(set(firsts)) == len(firsts)


def test_derive_ignores_parent_consumption():
    a, b = Rng(3), Rng(3)
    a.generator.random(1000)
    assert a.derive("x").uniform() == b.derive("x").uniform()


def test_int_and_str_children_do_not_alias():
    root = Rng(0)
    assert root.derive(1).uniform() != root.derive("1").uniform()


def test_state_round_trip():
    rng = Rng(11).derive("a")
    rng.generator.random(17)
    clone = Rng.from_state(rng.get_state())
    assert clone.generator.random(5).tolist() == rng.generator.random(5).tolist()


def test_ops_do_not_mutate_inputs(gen):
    x = gen.standard_normal((2, 6, 6, 3))
    f = gen.standard_normal((2, 3, 3, 3))
    b = gen.standard_normal(2)
    copies = [x.copy(), f.copy(), b.copy()]
    conv2d_forward(x, f, b, "same")
    maxpool2x2(x)
    matmul(x[0, 0], f.reshape(2, -1)[:, :3].T)
    for before, after in zip(copies, [x, f, b]):
        np.testing.assert_array_equal(before, after)


small = st.integers(min_value=1, max_value=10)


@settings(max_examples=40, deadline=None)
@given(m=small, k=small, n=small, seed=st.integers(0, 2**16))
def test_matmul_property(m, k, n, seed):
    g = np.random.default_rng(seed)
    a, b = g.standard_normal((m, k)), g.standard_normal((k, n))
    np.testing.assert_allclose(matmul(a, b), naive_matmul(a, b), rtol=1e-5, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(3, 7), w=st.integers(3, 7), c=st.integers(1, 3), f=st.integers(1, 3),
       padding=st.sampled_from(["same", "valid"]), seed=st.integers(0, 2**16))
def test_conv_property(h, w, c, f, padding, seed):
    g = np.random.default_rng(seed)
    x, filt, b = g.standard_normal((h, w, c)), g.standard_normal((f, 3, 3, c)), g.standard_normal(f)
    np.testing.assert_allclose(conv2d_forward(x, filt, b, padding), naive_conv(x, filt, b, padding),
                               rtol=1e-5, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(h=st.integers(2, 10), w=st.integers(2, 10), c=st.integers(1, 4), seed=st.integers(0, 2**16))
def test_maxpool_property(h, w, c, seed):
    x = np.random.default_rng(seed).standard_normal((h, w, c))
    np.testing.assert_allclose(maxpool2x2(x)[0], naive_maxpool(x), rtol=1e-5)
