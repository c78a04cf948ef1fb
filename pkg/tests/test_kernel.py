import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from softfree import matcore as mc
from softfree.errors import DomainError, ShapeError
from softfree.kernel import (
    ProjectionWeights,
    TokenSequence,
    gaussian_attention_matrix,
    pairwise_sq_dist,
    project,
    softmax_attention_matrix,
)


def double_loop_dist(a, b):
    out = np.zeros((len(a), len(b)))
    for i in range(len(a)):
        for j in range(len(b)):
            out[i, j] = sum((a[i, k] - b[j, k]) ** 2 for k in range(a.shape[1]))
    return out


def token_sets(max_n=32, max_d=8):
    return st.tuples(st.integers(1, max_n), st.integers(1, max_d)).flatmap(
        lambda s: arrays(np.float64, s, elements=st.floats(-5, 5, allow_nan=False))
    )


class TestTokenSequence:
    def test_grid_mismatch(self):
        with pytest.raises(ShapeError):
            TokenSequence(np.zeros((6, 2)), 2, 2)

    def test_square(self):
        t = TokenSequence.square(np.zeros((9, 3)))
        assert (t.grid_h, t.grid_w, t.n, t.d) == (3, 3, 9, 3)

    def test_not_square(self):
        with pytest.raises(ShapeError):
            TokenSequence.square(np.zeros((8, 3)))


class TestProject:
    def test_identity(self):
        x = TokenSequence(np.arange(12.0).reshape(4, 3), 2, 2)
        q, v = project(x, ProjectionWeights(np.eye(3), np.eye(3)))
        assert np.array_equal(q.features, x.features) and np.array_equal(v.features, x.features)
        assert (q.grid_h, q.grid_w) == (2, 2)

    def test_zero_input(self):
        rng = np.random.default_rng(0)
        x = TokenSequence(np.zeros((4, 3)), 4, 1)
        q, v = project(x, ProjectionWeights(rng.standard_normal((3, 5)), rng.standard_normal((3, 5))))
        assert not q.features.any() and not v.features.any()

    def test_matches_matmul(self):
        rng = np.random.default_rng(1)
        x = TokenSequence(rng.standard_normal((6, 4)), 2, 3)
        w = ProjectionWeights(rng.standard_normal((4, 5)), rng.standard_normal((4, 5)))
        q, v = project(x, w)
        assert np.array_equal(q.features, mc.matmul(x.features, w.w_qk))
        assert np.array_equal(v.features, mc.matmul(x.features, w.w_v))

    def test_mismatch(self):
        x = TokenSequence(np.zeros((4, 3)), 2, 2)
        with pytest.raises(ShapeError):
            project(x, ProjectionWeights(np.eye(4), np.eye(4)))


class TestPairwise:
    def test_two_points(self):
        a = np.array([[0.0], [1.0]])
        assert np.array_equal(pairwise_sq_dist(a, a), [[0, 1], [1, 0]])

    def test_single_equal_rows(self):
        assert np.array_equal(pairwise_sq_dist(np.array([[1.0, 2]]), np.array([[1.0, 2]])), [[0]])

    def test_double_loop_oracle(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((6, 4)), rng.standard_normal((3, 4))
        assert np.abs(pairwise_sq_dist(a, b) - double_loop_dist(a, b)).max() <= 1e-10

    def test_feature_mismatch(self):
        with pytest.raises(ShapeError):
            pairwise_sq_dist(np.zeros((2, 3)), np.zeros((2, 4)))

    @settings(max_examples=60, deadline=None)
    @given(token_sets())
    def test_self_distance_exact(self, q):
        d = pairwise_sq_dist(q, q)
        assert np.array_equal(d, d.T)
        assert not np.diagonal(d).any()
        assert (d >= 0).all()


class TestGaussian:
    def test_identical_rows(self):
        q = np.array([[1.0, 2], [1, 2]])
        assert np.array_equal(gaussian_attention_matrix(q, q), np.ones((2, 2)))

    def test_hand_value(self):
        q = np.array([[0.0, 0], [2, 0]])
        s = gaussian_attention_matrix(q, q, 2)
        assert s[0, 1] == pytest.approx(math.exp(-4 / (2 * math.sqrt(2))), rel=1e-15)

    def test_hand_value_d4(self):
        # d_e = 4 as a pure scale: exp(-4 / (2 * 2)) = exp(-1)
        q = np.array([[0.0, 0, 0, 0], [2, 0, 0, 0]])
        s = gaussian_attention_matrix(q, q, 4)
        assert s[0, 1] == pytest.approx(0.36787944117144233, rel=1e-15)

    def test_zero_dim(self):
        with pytest.raises(DomainError):
            gaussian_attention_matrix(np.zeros((2, 0)), np.zeros((2, 0)), 0)

    def test_wrong_width(self):
        with pytest.raises(ShapeError):
            gaussian_attention_matrix(np.zeros((2, 3)), np.zeros((2, 3)), 4)

    @settings(max_examples=60, deadline=None)
    @given(token_sets())
    def test_structure(self, q):
        s = gaussian_attention_matrix(q, q)
        assert np.array_equal(s, s.T)
        assert (np.diagonal(s) == 1.0).all()
        assert (s > 0).all() and (s <= 1).all()

    @settings(max_examples=40, deadline=None)
    @given(token_sets(max_n=16, max_d=6), st.floats(-3, 3))
    def test_translation_invariance(self, q, c):
        s = gaussian_attention_matrix(q, q)
        shifted = q + c * np.linspace(-1, 1, q.shape[1])
        assert np.abs(gaussian_attention_matrix(shifted, shifted) - s).max() <= 1e-10

    def test_psd(self):
        rng = np.random.default_rng(3)
        for n in (2, 8, 32):
            q = rng.standard_normal((n, 5))
            w, _ = mc.jacobi_eigh(gaussian_attention_matrix(q, q))
            assert w.min() >= -1e-8


class TestSoftmax:
    def test_single_row(self):
        assert np.array_equal(softmax_attention_matrix(np.ones((1, 3)), np.ones((1, 3))), [[1.0]])

    def test_uniform_rows(self):
        q = np.zeros((4, 2))
        assert np.allclose(softmax_attention_matrix(q, q), 0.25, atol=0, rtol=1e-15)

    def test_naive_oracle(self):
        rng = np.random.default_rng(4)
        q, k = rng.standard_normal((5, 8)), rng.standard_normal((5, 8))
        z = np.exp(q @ k.T / math.sqrt(8))
        naive = z / z.sum(axis=1, keepdims=True)
        s = softmax_attention_matrix(q, k)
        assert np.abs(s - naive).max() <= 1e-12
        assert np.abs(s.sum(axis=1) - 1).max() <= 1e-12

    def test_large_logits_stable(self):
        q = np.array([[1000.0], [-1000.0]])
        s = softmax_attention_matrix(q, q, 1)
        assert np.isfinite(s).all()

    def test_zero_dim(self):
        with pytest.raises(DomainError):
            softmax_attention_matrix(np.zeros((2, 0)), np.zeros((2, 0)), 0)
