import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from softfree import matcore as mc
from softfree.errors import DomainError, ShapeError


def triple_loop(a, b):
    n, k = a.shape
    out = np.zeros((n, b.shape[1]))
    for i in range(n):
        for j in range(b.shape[1]):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def mats(rows, cols):
    return arrays(np.float64, (rows, cols), elements=finite)


class TestMatmul:
    def test_identity(self):
        m = np.arange(12.0).reshape(3, 4)
        assert np.array_equal(mc.matmul(np.eye(3), m), m)

    def test_permutation(self):
        out = mc.matmul(np.array([[1.0, 2], [3, 4]]), np.array([[0.0, 1], [1, 0]]))
        assert np.array_equal(out, [[2, 1], [4, 3]])

    def test_triple_loop_oracle(self):
        rng = np.random.default_rng(0)
        a, b = rng.standard_normal((7, 5)), rng.standard_normal((5, 3))
        assert np.abs(mc.matmul(a, b) - triple_loop(a, b)).max() <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mc.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(1)
        a, b = rng.standard_normal((4, 3, 5)), rng.standard_normal((5, 2))
        out = mc.matmul(a, b)
        for i in range(4):
            assert np.array_equal(out[i], mc.matmul(a[i], b))

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal((64, 64)), rng.standard_normal((64, 64))
        assert np.array_equal(mc.matmul(a, b), mc.matmul(a, b))

    @settings(max_examples=40, deadline=None)
    @given(st.data())
    def test_associativity(self, data):
        n, k, p, q = (data.draw(st.integers(1, 6)) for _ in range(4))
        a, b, c = data.draw(mats(n, k)), data.draw(mats(k, p)), data.draw(mats(p, q))
        left = mc.matmul(mc.matmul(a, b), c)
        right = mc.matmul(a, mc.matmul(b, c))
        scale = np.linalg.norm(np.abs(a) @ np.abs(b) @ np.abs(c))
        assert np.linalg.norm(left - right) <= 1e-9 * max(scale, 1e-300)

    @settings(max_examples=40, deadline=None)
    @given(st.data())
    def test_transpose_of_product(self, data):
        n, k, p = (data.draw(st.integers(1, 6)) for _ in range(3))
        a, b = data.draw(mats(n, k)), data.draw(mats(k, p))
        lhs = mc.transpose(mc.matmul(a, b))
        rhs = mc.matmul(mc.transpose(b), mc.transpose(a))
        assert np.abs(lhs - rhs).max(initial=0.0) <= 1e-12 * max(1.0, np.abs(lhs).max(initial=0.0))


class TestNorms:
    def test_one_identity(self):
        assert mc.norm(np.eye(4), "one") == 1.0

    def test_frobenius_345(self):
        assert mc.norm(np.array([[3.0, 0], [4, 0]]), "frobenius") == 5.0

    def test_spectral_matches_jacobi(self):
        rng = np.random.default_rng(3)
        g = rng.standard_normal((10, 10))
        a = g + g.T
        w, _ = mc.jacobi_eigh(a)
        assert abs(mc.norm(a, "spectral") - np.abs(w).max()) <= 1e-6 * np.abs(w).max()

    def test_spectral_rectangular(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((6, 4))
        assert abs(mc.norm(a, "spectral") - np.linalg.svd(a, compute_uv=False)[0]) <= 1e-8 * 10

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            mc.norm(np.zeros((0, 3)), "one")

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            mc.norm(np.eye(2), "nuclear")

    @settings(max_examples=50, deadline=None)
    @given(st.data())
    def test_one_norm_is_inf_norm_of_transpose(self, data):
        a = data.draw(mats(data.draw(st.integers(1, 6)), data.draw(st.integers(1, 6))))
        assert mc.norm(a, "one") == mc.norm(mc.transpose(a), "inf")


class TestJacobi:
    def test_diagonal(self):
        w, v = mc.jacobi_eigh(np.diag([2.0, 5.0]))
        assert np.allclose(w, [2, 5])
        assert np.allclose(np.abs(v), np.eye(2))

    def test_classic_2x2(self):
        w, _ = mc.jacobi_eigh(np.array([[2.0, 1], [1, 2]]))
        assert np.allclose(w, [1, 3], atol=1e-14)

    @pytest.mark.parametrize("n", [1, 5, 20, 49])
    def test_spd_reconstruction(self, n):
        rng = np.random.default_rng(n)
        g = rng.standard_normal((n, n))
        a = g @ g.T + n * np.eye(n)
        w, v = mc.jacobi_eigh(a)
        recon = (v * w) @ v.T
        assert np.linalg.norm(recon - a) / np.linalg.norm(a) <= 1e-8
        assert np.abs(v.T @ v - np.eye(n)).max() <= 1e-8
        assert np.all(np.diff(w) >= 0)

    def test_gram_nonnegative(self):
        rng = np.random.default_rng(5)
        g = rng.standard_normal((4, 12))
        w, _ = mc.jacobi_eigh(g.T @ g)  # rank 4, eight zero eigenvalues
        assert w.min() >= -1e-10

    def test_matches_numpy_eigvalsh(self):
        rng = np.random.default_rng(6)
        g = rng.standard_normal((30, 30))
        a = g + g.T
        w, _ = mc.jacobi_eigh(a)
        assert np.allclose(w, np.linalg.eigvalsh(a), atol=1e-10)

    def test_rejects_non_square(self):
        with pytest.raises(DomainError):
            mc.jacobi_eigh(np.ones((2, 3)))

    def test_rejects_asymmetric(self):
        with pytest.raises(DomainError):
            mc.jacobi_eigh(np.array([[1.0, 2], [0, 1]]))


class TestAllocTracking:
    def test_single_matrix(self):
        _, stats = mc.with_alloc_tracking(mc.new, (30, 7))
        assert stats.peak_live_bytes >= 8 * 30 * 7
        assert stats.allocation_count == 1

    def test_sequential_temporaries(self):
        def work():
            a = mc.new((100, 100))
            del a
            b = mc.new((100, 100))
            del b

        _, stats = mc.with_alloc_tracking(work)
        assert stats.peak_live_bytes == 80_000
        assert stats.total_allocated_bytes == 160_000
        assert stats.allocation_count == 2

    def test_peak_bounded_by_total(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((20, 20))
        _, stats = mc.with_alloc_tracking(lambda: mc.matmul(mc.matmul(a, a), a))
        assert stats.peak_live_bytes <= stats.total_allocated_bytes

    def test_nested_scopes(self):
        with mc.track_allocations() as outer:
            keep = mc.new((10, 10))
            with mc.track_allocations() as inner:
                tmp = mc.new((5, 5))
                del tmp
        assert inner.stats().total_allocated_bytes == 200
        assert inner.stats().peak_live_bytes == 200
        assert outer.stats().total_allocated_bytes == 1000
        assert outer.stats().peak_live_bytes == 1000
        del keep

    def test_untracked_outside_scope(self):
        with mc.track_allocations() as t:
            pass
        mc.new((50, 50))
        assert t.stats().allocation_count == 0

    def test_deterministic_counts(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((40, 40))
        runs = [mc.with_alloc_tracking(mc.matmul, a, a)[1] for _ in range(3)]
        assert len(set(runs)) == 1
