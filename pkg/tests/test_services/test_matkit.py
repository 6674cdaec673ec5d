import numpy as np
import pytest

from app.services.matkit import MatKit
from app.core.exceptions import DimensionError, DomainError


EXAMPLE_P = [[0.0608, -0.0363], [-0.0363, 0.1020]]


class TestMatKit:
    """MatKitのテストクラス"""

    def test_as_mat_rejects_bad_input(self):
        """空配列と非有限値を拒否するテスト"""
        with pytest.raises(DimensionError):
            MatKit.as_mat([])
        with pytest.raises(DomainError):
            MatKit.as_mat([[1.0, np.nan]])
        assert MatKit.as_mat(3.0).shape == (1, 1)

    def test_kron_examples(self):
        """クロネッカー積の基本例のテスト"""
        A = np.array([[0.0, 1.0], [0.0, 0.0]])
        np.testing.assert_array_equal(MatKit.kron([[1.0]], A), A)

        block = MatKit.kron(np.eye(2), A)
        assert block.shape == (4, 4)
        np.testing.assert_array_equal(block[:2, :2], A)
        np.testing.assert_array_equal(block[2:, 2:], A)
        np.testing.assert_array_equal(block[:2, 2:], np.zeros((2, 2)))

        assert MatKit.kron(np.ones((5, 6)), np.eye(2)).shape == (10, 12)

    def test_kron_algebraic_properties(self):
        """結合律と混合積の性質のテスト"""
        rng = np.random.default_rng(7)
        for _ in range(50):
            A, B, C = (rng.standard_normal(rng.integers(1, 4, size=2)) for _ in range(3))
            left = MatKit.kron(MatKit.kron(A, B), C)
            right = MatKit.kron(A, MatKit.kron(B, C))
            np.testing.assert_allclose(left, right, atol=1e-12)

            p, q, r, s, t, u = rng.integers(1, 4, size=6)
            A, B = rng.standard_normal((p, q)), rng.standard_normal((r, s))
            C, D = rng.standard_normal((q, t)), rng.standard_normal((s, u))
            np.testing.assert_allclose(
                MatKit.kron(A, B) @ MatKit.kron(C, D), MatKit.kron(A @ C, B @ D), atol=1e-10
            )

    def test_hadamard(self):
        """アダマール積のテスト"""
        A = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(MatKit.hadamard(A, np.ones((2, 2))), A)
        np.testing.assert_array_equal(MatKit.hadamard(A, np.zeros((2, 2))), np.zeros((2, 2)))
        np.testing.assert_array_equal(MatKit.hadamard(A, [[5, 6], [7, 8]]), [[5, 12], [21, 32]])
        with pytest.raises(DimensionError):
            MatKit.hadamard(A, np.ones((2, 3)))

    def test_pinv_examples(self):
        """擬似逆行列の基本例のテスト"""
        np.testing.assert_allclose(MatKit.pinv(np.eye(3)), np.eye(3), atol=1e-14)
        np.testing.assert_allclose(MatKit.pinv([[1.0, -1.0]]), [[0.5], [-0.5]], atol=1e-14)
        np.testing.assert_array_equal(MatKit.pinv(np.zeros((2, 3))), np.zeros((3, 2)))

    def test_pinv_penrose_identities(self):
        """ランダム行列でペンローズ条件が成り立つテスト"""
        rng = np.random.default_rng(11)
        for _ in range(50):
            rows, cols = rng.integers(1, 13, size=2)
            rank = rng.integers(1, min(rows, cols) + 1)
            A = rng.standard_normal((rows, rank)) @ rng.standard_normal((rank, cols))
            A_pinv = MatKit.pinv(A)
            np.testing.assert_allclose(A @ A_pinv @ A, A, atol=1e-9)
            np.testing.assert_allclose(A_pinv @ A @ A_pinv, A_pinv, atol=1e-9)

    def test_rank(self):
        """ランクのテスト"""
        assert MatKit.rank(np.eye(3)) == 3
        assert MatKit.rank(np.zeros((3, 3))) == 0
        assert MatKit.rank([[1.0, 2.0], [2.0, 4.0]]) == 1
        with pytest.raises(DomainError):
            MatKit.rank(np.eye(2), tol=0.0)

    def test_is_positive_definite(self):
        """正定値判定のテスト"""
        assert MatKit.is_positive_definite(np.eye(2))
        assert not MatKit.is_positive_definite(-np.eye(2))
        assert MatKit.is_positive_definite(EXAMPLE_P)
        assert not MatKit.is_positive_definite([[1.0, 0.5], [0.0, 1.0]])
        with pytest.raises(DimensionError):
            MatKit.is_positive_definite(np.ones((2, 3)))

    def test_sym_eig(self):
        """対称固有値分解のテスト"""
        values, vectors = MatKit.sym_eig(np.diag([3.0, 7.0]))
        np.testing.assert_allclose(values, [3.0, 7.0])
        np.testing.assert_allclose(np.abs(vectors), np.eye(2), atol=1e-14)

        values, _ = MatKit.sym_eig(EXAMPLE_P)
        assert np.all(values > 0.0)

        with pytest.raises(DomainError):
            MatKit.sym_eig([[1.0, 2.0], [0.0, 1.0]])

    def test_sym_eig_reconstruction(self):
        """固有値分解から元の行列を再構成できるテスト"""
        rng = np.random.default_rng(3)
        for _ in range(30):
            size = rng.integers(1, 9)
            X = rng.standard_normal((size, size))
            A = X + X.T
            values, vectors = MatKit.sym_eig(A)
            residual = np.linalg.norm(A - vectors @ np.diag(values) @ vectors.T)
            assert residual <= 1e-9 * np.linalg.norm(A)
