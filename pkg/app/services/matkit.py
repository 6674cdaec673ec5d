from typing import Any, Tuple

import numpy as np
import scipy.linalg

from app.core.exceptions import DimensionError, DomainError


DEFAULT_RCOND = 1e-10
SYMMETRY_RTOL = 1e-9


class MatKit:
    """
    密行列の線形代数カーネル
    パッケージ全体が必要とする最小限の演算だけを提供する
    """

    @staticmethod
    def as_mat(values: Any, name: str = "matrix") -> np.ndarray:
        """
        入力を2次元のfloat64配列に変換し、有限値であることを検証する

        Args:
            values (Any): 配列に変換可能な値
            name (str, optional): エラーメッセージ用の名前

        Returns:
            np.ndarray: 2次元のC順配列

        Raises:
            DimensionError: 2次元に解釈できない場合
            DomainError: NaN/Infを含む場合
        """
        a = np.array(values, dtype=float, order="C")
        if a.ndim == 0:
            a = a.reshape(1, 1)
        elif a.ndim == 1:
            a = a.reshape(1, -1)
        if a.ndim != 2 or a.size == 0:
            raise DimensionError(f"{name} は空でない2次元行列である必要があります: shape={a.shape}")
        if not np.all(np.isfinite(a)):
            raise DomainError(f"{name} に非有限値 (NaN/Inf) が含まれています")
        return a

    @staticmethod
    def frobenius_norm(a: Any) -> float:
        return float(np.linalg.norm(np.asarray(a, dtype=float)))

    @staticmethod
    def sym(a: np.ndarray) -> np.ndarray:
        return 0.5 * (a + a.T)

    @staticmethod
    def kron(a: Any, b: Any) -> np.ndarray:
        """
        クロネッカー積を計算する

        Args:
            a (Any): 左オペランド
            b (Any): 右オペランド

        Returns:
            np.ndarray: (a.rows·b.rows) × (a.cols·b.cols) の行列
        """
        return np.kron(MatKit.as_mat(a, "a"), MatKit.as_mat(b, "b"))

    @staticmethod
    def hadamard(a: Any, b: Any) -> np.ndarray:
        """
        アダマール積（要素積）を計算する

        Raises:
            DimensionError: 形状が一致しない場合
        """
        a = MatKit.as_mat(a, "a")
        b = MatKit.as_mat(b, "b")
        if a.shape != b.shape:
            raise DimensionError(f"アダマール積の形状が一致しません: {a.shape} と {b.shape}")
        return a * b

    @staticmethod
    def pinv(a: Any, tol: float = DEFAULT_RCOND) -> np.ndarray:
        """
        特異値分解によりムーア・ペンローズ擬似逆行列を計算する

        Args:
            a (Any): 対象行列
            tol (float, optional): 最大特異値に対する相対カットオフ

        Returns:
            np.ndarray: 転置形状の擬似逆行列（零行列なら零行列）

        Raises:
            DomainError: tol が正でない場合
        """
        if tol <= 0:
            raise DomainError(f"tol は正である必要があります: {tol}")
        a = MatKit.as_mat(a, "a")
        u, s, vt = scipy.linalg.svd(a, full_matrices=False)
        if s.size == 0 or s[0] == 0.0:
            return np.zeros((a.shape[1], a.shape[0]))
        keep = s > tol * s[0]
        s_inv = np.zeros_like(s)
        s_inv[keep] = 1.0 / s[keep]
        return (vt.T * s_inv) @ u.T

    @staticmethod
    def rank(a: Any, tol: float = DEFAULT_RCOND) -> int:
        """
        最大特異値に対する相対閾値を超える特異値の個数を返す
        """
        if tol <= 0:
            raise DomainError(f"tol は正である必要があります: {tol}")
        s = scipy.linalg.svdvals(MatKit.as_mat(a, "a"))
        if s.size == 0 or s[0] == 0.0:
            return 0
        return int(np.sum(s > tol * s[0]))

    @staticmethod
    def _check_square(a: np.ndarray, name: str) -> None:
        if a.shape[0] != a.shape[1]:
            raise DimensionError(f"{name} は正方行列である必要があります: shape={a.shape}")

    @staticmethod
    def is_symmetric(a: np.ndarray) -> bool:
        scale = max(1.0, MatKit.frobenius_norm(a))
        return MatKit.frobenius_norm(a - a.T) <= SYMMETRY_RTOL * scale

    @staticmethod
    def is_positive_definite(a: Any) -> bool:
        """
        対称（許容誤差内）かつコレスキー分解に成功するとき正定値と判定する

        Args:
            a (Any): 正方行列

        Returns:
            bool: 正定値ならTrue

        Raises:
            DimensionError: 正方でない場合
        """
        a = MatKit.as_mat(a, "a")
        MatKit._check_square(a, "a")
        if not MatKit.is_symmetric(a):
            return False
        try:
            scipy.linalg.cholesky(MatKit.sym(a), lower=True)
        except scipy.linalg.LinAlgError:
            return False
        return True

    @staticmethod
    def sym_eig(a: Any) -> Tuple[np.ndarray, np.ndarray]:
        """
        対称行列の固有値分解を行う

        Args:
            a (Any): 対称行列

        Returns:
            Tuple[np.ndarray, np.ndarray]: 昇順の固有値と正規直交な固有ベクトル（列）

        Raises:
            DimensionError: 正方でない場合
            DomainError: 対称でない場合
        """
        a = MatKit.as_mat(a, "a")
        MatKit._check_square(a, "a")
        if not MatKit.is_symmetric(a):
            raise DomainError("sym_eig には対称行列が必要です")
        eigenvalues, eigenvectors = scipy.linalg.eigh(MatKit.sym(a))
        return eigenvalues, eigenvectors

    @staticmethod
    def max_eig(a: np.ndarray) -> float:
        return float(scipy.linalg.eigvalsh(MatKit.sym(a))[-1])

    @staticmethod
    def min_eig(a: np.ndarray) -> float:
        return float(scipy.linalg.eigvalsh(MatKit.sym(a))[0])
