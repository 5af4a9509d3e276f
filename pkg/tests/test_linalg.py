import numpy as np
import pytest

from snflow import linalg
from snflow.errors import SingularMatrix, SizeGuardExceeded


def naive_matmul(a, b):
    """Triple-loop product, fixed summation order."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for l in range(k):
                acc += a[i, l] * b[l, j]
            out[i, j] = acc
    return out


def cofactor_det(a):
    """Determinant by cofactor expansion along the first row."""
    n = a.shape[0]
    if n == 1:
        return a[0, 0]
    total = 0.0
    for j in range(n):
        minor = np.delete(np.delete(a, 0, axis=0), j, axis=1)
        total += ((-1.0) ** j) * a[0, j] * cofactor_det(minor)
    return total


class TestMatmul:
    def test_identity(self):
        a = np.arange(9.0).reshape(3, 3)
        np.testing.assert_array_equal(linalg.matmul(np.eye(3), a), a)

    def test_hand_2x2(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[0.0], [1.0]])
        np.testing.assert_array_equal(linalg.matmul(a, b), [[2.0], [4.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(7, 5))
        b = rng.normal(size=(5, 3))
        np.testing.assert_allclose(linalg.matmul(a, b), naive_matmul(a, b), atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            linalg.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


class TestLu:
    def test_identity(self):
        f = linalg.lu_factor(np.eye(3))
        np.testing.assert_array_equal(f.lu, np.eye(3))
        assert f.sign == 1

    def test_diagonal(self):
        f = linalg.lu_factor(np.diag([2.0, 3.0]))
        np.testing.assert_array_equal(np.diag(f.lu), [2.0, 3.0])

    def test_reconstruction(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(6, 6))
        f = linalg.lu_factor(a)
        l = np.tril(f.lu, -1) + np.eye(6)
        u = np.triu(f.lu)
        err = np.linalg.norm(a[f.perm] - l @ u) / np.linalg.norm(a)
        assert err <= 1e-10

    def test_singular_raises(self):
        a = np.array([[1.0, 2.0], [2.0, 4.0]])
        with pytest.raises(SingularMatrix):
            linalg.lu_factor(a)

    def test_call_counter(self):
        linalg.reset_lu_call_count()
        linalg.lu_factor(np.eye(2))
        linalg.lu_factor(np.eye(3))
        assert linalg.lu_call_count() == 2


class TestLogAbsDet:
    def test_identity(self):
        sign, logabs = linalg.logabsdet(linalg.lu_factor(np.eye(4)))
        assert sign == 1
        assert logabs == 0.0

    def test_diagonal(self):
        sign, logabs = linalg.logabsdet(linalg.lu_factor(np.diag([2.0, 3.0])))
        assert sign == 1
        np.testing.assert_allclose(logabs, np.log(6.0), rtol=1e-15)

    def test_against_cofactor_expansion(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            a = rng.normal(size=(5, 5))
            det = cofactor_det(a)
            sign, logabs = linalg.logabsdet(linalg.lu_factor(a))
            assert sign == np.sign(det)
            np.testing.assert_allclose(logabs, np.log(abs(det)), rtol=1e-9)

    def test_negative_determinant_sign(self):
        a = np.diag([-2.0, 3.0])
        sign, logabs = linalg.logabsdet(linalg.lu_factor(a))
        assert sign == -1
        np.testing.assert_allclose(logabs, np.log(6.0), rtol=1e-15)

    def test_inverse_cancels(self):
        # det multiplicativity: log|A| + log|A^-1| == 0
        rng = np.random.default_rng(5)
        for _ in range(5):
            a = np.eye(6) + 0.3 * rng.normal(size=(6, 6))
            f = linalg.lu_factor(a)
            _, la = linalg.logabsdet(f)
            _, lb = linalg.logabsdet(linalg.lu_factor(linalg.inverse(f)))
            assert abs(la + lb) <= 1e-8


class TestSolveInverse:
    def test_identity(self):
        b = np.array([1.0, 2.0, 3.0])
        np.testing.assert_array_equal(linalg.solve(linalg.lu_factor(np.eye(3)), b), b)

    def test_diagonal(self):
        f = linalg.lu_factor(np.diag([2.0, 4.0]))
        np.testing.assert_array_equal(linalg.solve(f, np.array([2.0, 4.0])), [1.0, 1.0])

    def test_residual(self):
        rng = np.random.default_rng(13)
        a = np.eye(8) + 0.5 * rng.normal(size=(8, 8))
        b = rng.normal(size=(8, 2))
        x = linalg.solve(linalg.lu_factor(a), b)
        res = np.linalg.norm(a @ x - b) / np.linalg.norm(b)
        assert res <= 1e-8

    def test_transpose_solve(self):
        rng = np.random.default_rng(14)
        a = np.eye(5) + 0.4 * rng.normal(size=(5, 5))
        b = rng.normal(size=5)
        x = linalg.solve(linalg.lu_factor(a), b, transpose=True)
        np.testing.assert_allclose(a.T @ x, b, atol=1e-10)

    def test_inverse_trivial(self):
        np.testing.assert_allclose(
            linalg.inverse(linalg.lu_factor(np.array([[2.0, 0.0], [0.0, 4.0]]))),
            [[0.5, 0.0], [0.0, 0.25]],
        )

    def test_inverse_roundtrip(self):
        rng = np.random.default_rng(17)
        a = np.eye(6) + 0.4 * rng.normal(size=(6, 6))
        inv = linalg.inverse(linalg.lu_factor(a))
        np.testing.assert_allclose(a @ inv, np.eye(6), atol=1e-9)


def dirac_kernel(channels, kh, kw):
    k = np.zeros((channels, channels, kh, kw))
    for c in range(channels):
        k[c, c, (kh - 1) // 2, (kw - 1) // 2] = 1.0
    return k


class TestConv2d:
    def test_dirac_identity(self):
        rng = np.random.default_rng(19)
        x = rng.normal(size=(2, 4, 4))
        np.testing.assert_array_equal(linalg.conv2d(x, dirac_kernel(2, 3, 3)), x)

    def test_scalar_kernel(self):
        rng = np.random.default_rng(23)
        x = rng.normal(size=(1, 3, 3))
        k = np.full((1, 1, 1, 1), 2.0)
        np.testing.assert_array_equal(linalg.conv2d(x, k), 2.0 * x)

    def test_matches_matrix_oracle(self):
        rng = np.random.default_rng(29)
        k = rng.normal(size=(2, 2, 3, 3))
        x = rng.normal(size=(2, 4, 4))
        t = linalg.build_conv_matrix(k, (2, 4, 4))
        np.testing.assert_allclose(
            linalg.conv2d(x, k).ravel(), t @ x.ravel(), atol=1e-12
        )

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            linalg.conv2d(np.zeros((1, 4, 4)), np.zeros((1, 1, 2, 2)))

    def test_matrix_apply_many_inputs(self):
        rng = np.random.default_rng(31)
        k = rng.normal(size=(1, 1, 3, 3))
        t = linalg.build_conv_matrix(k, (1, 5, 5))
        for _ in range(100):
            x = rng.normal(size=(1, 5, 5))
            np.testing.assert_allclose(
                linalg.conv2d(x, k).ravel(), t @ x.ravel(), atol=1e-12
            )


class TestBuildConvMatrix:
    def test_dirac_gives_identity(self):
        t = linalg.build_conv_matrix(dirac_kernel(1, 3, 3), (1, 3, 3))
        np.testing.assert_array_equal(t, np.eye(9))

    def test_columns_are_basis_responses(self):
        rng = np.random.default_rng(37)
        k = rng.normal(size=(2, 1, 3, 3))
        t = linalg.build_conv_matrix(k, (1, 3, 3))
        assert t.shape == (18, 9)
        for j in range(9):
            e = np.zeros(9)
            e[j] = 1.0
            np.testing.assert_array_equal(t[:, j], linalg.conv2d(e.reshape(1, 3, 3), k).ravel())

    def test_band_structure_3x3(self):
        # single channel 3x3 kernel on 3x3 input: doubly blocked band matrix
        k = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
        t = linalg.build_conv_matrix(k, (1, 3, 3))
        # center row (pixel (1,1)) sees the whole kernel
        np.testing.assert_array_equal(t[4], k.ravel())
        # corner pixel (0,0) only sees taps at offsets >= 0
        expected = np.array([5.0, 6.0, 0.0, 8.0, 9.0, 0.0, 0.0, 0.0, 0.0])
        np.testing.assert_array_equal(t[0], expected)

    def test_size_guard(self):
        with pytest.raises(SizeGuardExceeded):
            linalg.build_conv_matrix(np.zeros((1, 1, 3, 3)), (1, 100, 100))


class TestConvBackwardWeight:
    def test_matches_einsum(self):
        rng = np.random.default_rng(41)
        x = rng.normal(size=(3, 2, 4, 4))
        delta = rng.normal(size=(3, 2, 4, 4))
        got = linalg.conv_backward_weight(delta, x, (2, 2, 3, 3))
        # direct definition: correlate deltas with shifted inputs
        want = np.zeros((2, 2, 3, 3))
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for o in range(2):
            for c in range(2):
                for dy in range(3):
                    for dx in range(3):
                        want[o, c, dy, dx] = np.sum(
                            delta[:, o] * xp[:, c, dy : dy + 4, dx : dx + 4]
                        )
        np.testing.assert_allclose(got, want, atol=1e-12)
