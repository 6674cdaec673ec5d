from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import scipy.linalg

from app.core.logging import logger
from app.core.exceptions import DimensionError, ReportIOError
from app.schemas.lmi import (
    AffineBlock,
    LmiProblem,
    LmiSolution,
    LmiStatus,
    SolverOptions,
)


LINE_SEARCH_ALPHA = 0.2
LINE_SEARCH_BETA = 0.5
NEWTON_TOL = 1e-9
UNBOUNDED_FRACTION = 0.5


class _ConeBlock:
    """
    σ(F₀ + Σ y_j F_j) − c·I ≻ 0 の形に正規化した1ブロック
    バリアの値・勾配・ヘッシアンを計算する
    """

    def __init__(self, block: AffineBlock, shift: float, slack_index: Optional[int] = None):
        sign = block.sense.sign
        dim = block.dim
        self.name = block.name
        self.dim = dim
        self.G0 = sign * block.F0 - shift * np.eye(dim)
        indices = [index for index, _ in block.terms]
        mats = [sign * mat for _, mat in block.terms]
        if slack_index is not None:
            indices.append(slack_index)
            mats.append(np.eye(dim))
        self.indices = np.array(indices, dtype=int)
        self.stack = np.array(mats).reshape(len(mats), dim, dim) if mats else np.zeros((0, dim, dim))

    def value(self, z: np.ndarray) -> np.ndarray:
        if self.indices.size == 0:
            return self.G0
        return self.G0 + np.tensordot(z[self.indices], self.stack, axes=1)

    def cholesky(self, z: np.ndarray) -> Optional[np.ndarray]:
        try:
            return scipy.linalg.cholesky(self.value(z), lower=True)
        except (scipy.linalg.LinAlgError, ValueError):
            return None

    def derivatives(self, chol: np.ndarray, n_vars: int) -> Tuple[float, np.ndarray, np.ndarray]:
        """−log det G の値・勾配・ヘッシアン"""
        grad = np.zeros(n_vars)
        hess = np.zeros((n_vars, n_vars))
        value = -2.0 * float(np.sum(np.log(np.diag(chol))))
        if self.indices.size == 0:
            return value, grad, hess
        c_inv = scipy.linalg.solve_triangular(chol, np.eye(self.dim), lower=True)
        # W_j = C⁻¹ S_j C⁻ᵀ
        w = c_inv[None, :, :] @ self.stack @ c_inv.T[None, :, :]
        flat = w.reshape(self.indices.size, -1)
        np.add.at(grad, self.indices, -np.einsum("jaa->j", w))
        hess[np.ix_(self.indices, self.indices)] += flat @ flat.T
        return value, grad, hess


class LmiService:
    """
    小規模な半正定値計画問題を解くサービスクラス
    対数行列式バリアの内点法（Phase I で実行可能点を探し、Phase II で最適化）を用いる
    """

    @staticmethod
    def schur_embed(Q, S, R) -> np.ndarray:
        """
        ブロック行列 [[Q, S], [Sᵀ, R]] を構成する

        Raises:
            DimensionError: 次元が整合しない場合
        """
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        S = np.atleast_2d(np.asarray(S, dtype=float))
        R = np.atleast_2d(np.asarray(R, dtype=float))
        if Q.shape[0] != Q.shape[1] or R.shape[0] != R.shape[1]:
            raise DimensionError("Q と R は正方行列である必要があります")
        if S.shape != (Q.shape[0], R.shape[0]):
            raise DimensionError(f"S の形状 {S.shape} が ({Q.shape[0]}, {R.shape[0]}) と一致しません")
        return np.block([[Q, S], [S.T, R]])

    @staticmethod
    def block_margins(problem: LmiProblem, y: np.ndarray) -> List[float]:
        """
        ソルバーの内部状態を使わず、各ブロックの σ·F(y) の最小固有値を独立に評価する
        """
        margins = []
        for block in problem.blocks:
            value = block.sense.sign * block.evaluate(y)
            margins.append(float(scipy.linalg.eigvalsh(0.5 * (value + value.T))[0]))
        return margins

    @staticmethod
    def restrict(problem: LmiProblem, basis: np.ndarray, var_names: List[str]) -> LmiProblem:
        """
        y = T z を代入して z についての問題に書き換える

        Args:
            problem (LmiProblem): 元の問題
            basis (np.ndarray): 代入行列 T（元の変数数 × 新しい変数数）
            var_names (List[str]): 新しい変数名

        Returns:
            LmiProblem: F_k' = Σ_j T_jk F_j、c' = Tᵀc とした問題

        Raises:
            DimensionError: T の形状が整合しない場合
        """
        basis = np.asarray(basis, dtype=float)
        if basis.shape != (problem.n_vars, len(var_names)):
            raise DimensionError(
                f"代入行列の形状 {basis.shape} が ({problem.n_vars}, {len(var_names)}) と一致しません"
            )
        blocks = []
        for block in problem.blocks:
            terms = []
            for k in range(basis.shape[1]):
                mat = np.zeros((block.dim, block.dim))
                used = False
                for index, F in block.terms:
                    weight = basis[index, k]
                    if weight != 0.0:
                        mat += weight * F
                        used = True
                if used:
                    terms.append((k, 0.5 * (mat + mat.T)))
            blocks.append(AffineBlock(name=block.name, sense=block.sense, F0=block.F0, terms=terms))
        return LmiProblem(var_names=var_names, objective=basis.T @ problem.objective, blocks=blocks)

    @staticmethod
    def _barrier(cones: List[_ConeBlock], z: np.ndarray, radius: float,
                 need_derivatives: bool = True) -> Optional[Tuple[float, np.ndarray, np.ndarray]]:
        """
        全ブロックと球制約 ‖z‖ < R のバリア。領域外なら None
        """
        n = z.size
        slack = radius ** 2 - float(z @ z)
        if slack <= 0.0:
            return None
        total = -np.log(slack)
        grad = 2.0 * z / slack
        hess = 2.0 * np.eye(n) / slack + 4.0 * np.outer(z, z) / slack ** 2
        for cone in cones:
            chol = cone.cholesky(z)
            if chol is None:
                return None
            if need_derivatives:
                value, g, h = cone.derivatives(chol, n)
                grad += g
                hess += h
            else:
                value = -2.0 * float(np.sum(np.log(np.diag(chol))))
            total += value
        return total, grad, hess

    @staticmethod
    def _newton_direction(hess: np.ndarray, grad: np.ndarray) -> np.ndarray:
        try:
            return -scipy.linalg.solve(hess, grad, assume_a="pos")
        except (scipy.linalg.LinAlgError, ValueError):
            return -scipy.linalg.lstsq(hess, grad)[0]

    @staticmethod
    def _centering(cones: List[_ConeBlock], c: np.ndarray, z: np.ndarray, t: float,
                   radius: float, budget: int, stop=None) -> Tuple[np.ndarray, int, bool]:
        """
        t·cᵀz + バリア をニュートン法で最小化する

        Returns:
            Tuple[np.ndarray, int, bool]: 新しい点、使ったニュートン反復数、早期終了したか
        """
        steps = 0
        while steps < budget:
            barrier = LmiService._barrier(cones, z, radius)
            value = t * float(c @ z) + barrier[0]
            grad = t * c + barrier[1]
            direction = LmiService._newton_direction(barrier[2], grad)
            decrement = -float(grad @ direction)
            if not np.isfinite(decrement) or decrement / 2.0 <= NEWTON_TOL:
                break

            # バックトラッキング直線探索（領域内に留まることも条件とする）
            step = 1.0
            while step > 1e-14:
                candidate = z + step * direction
                trial = LmiService._barrier(cones, candidate, radius, need_derivatives=False)
                if trial is not None:
                    trial_value = t * float(c @ candidate) + trial[0]
                    if trial_value <= value - LINE_SEARCH_ALPHA * step * decrement:
                        break
                step *= LINE_SEARCH_BETA
            else:
                break

            z = z + step * direction
            steps += 1
            if stop is not None and stop(z):
                return z, steps, True
        return z, steps, False

    @staticmethod
    def _initial_t(cones: List[_ConeBlock], c: np.ndarray, z: np.ndarray, radius: float, m: float) -> float:
        """中心パスに最も近くなる t を最小二乗で選ぶ"""
        _, grad, hess = LmiService._barrier(cones, z, radius)
        try:
            h_inv_c = scipy.linalg.solve(hess, c, assume_a="pos")
            h_inv_g = scipy.linalg.solve(hess, grad, assume_a="pos")
        except (scipy.linalg.LinAlgError, ValueError):
            return 1.0
        denom = float(c @ h_inv_c)
        if denom <= 0.0:
            return 1.0
        t = -float(c @ h_inv_g) / denom
        return float(np.clip(t, 1e-3, m)) if np.isfinite(t) and t > 0 else 1.0

    @staticmethod
    def _phase1(problem: LmiProblem, opts: SolverOptions) -> Tuple[Optional[np.ndarray], float, int]:
        """
        一様スラック s を最小化して厳密実行可能点を探す
        σF(y) − εI + sI ≻ 0 で s < 0 となる点が見つかれば成功

        Returns:
            Tuple[Optional[np.ndarray], float, int]: 実行可能点（なければNone）、最終スラック、反復数
        """
        n = problem.n_vars
        slack_index = n
        cones = [_ConeBlock(block, opts.eps_strict, slack_index) for block in problem.blocks]

        y0 = np.zeros(n)
        worst = max(-float(scipy.linalg.eigvalsh(cone.value(np.append(y0, 0.0)))[0]) for cone in cones)
        z = np.append(y0, max(worst, 0.0) + 1.0)
        c = np.zeros(n + 1)
        c[slack_index] = 1.0

        m = sum(cone.dim for cone in cones) + 1.0
        t = LmiService._initial_t(cones, c, z, opts.radius, m)
        used = 0
        logger.debug(f"Phase I 開始: 初期スラック={z[slack_index]:.3e}")

        while used < opts.phase1_max_iter:
            z, steps, found = LmiService._centering(
                cones, c, z, t, opts.radius, opts.phase1_max_iter - used,
                stop=lambda point: point[slack_index] < 0.0,
            )
            used += steps
            s = float(z[slack_index])
            logger.debug(f"Phase I: t={t:.3e}, s={s:.3e}, 反復={used}")
            if found or s < 0.0:
                return z[:n], s, used
            if m / t <= opts.tol * (1.0 + abs(s)):
                # 中心化された最適スラックが非負: 実行不能
                return None, s, used
            t *= opts.barrier_factor
        return None, float(z[slack_index]), used

    @staticmethod
    def solve(problem: LmiProblem, opts: Optional[SolverOptions] = None) -> LmiSolution:
        """
        LMI 制約付きの線形目的関数最小化を解く

        Args:
            problem (LmiProblem): 問題
            opts (Optional[SolverOptions], optional): ソルバーオプション

        Returns:
            LmiSolution: 解。OPTIMAL なら全ブロックが ε_strict 以上のマージンで成立する
        """
        opts = opts or SolverOptions()
        n = problem.n_vars
        c = problem.objective
        logger.info(f"LMIの求解を開始: 変数={n}, ブロック={len(problem.blocks)}, "
                    f"次元={[block.dim for block in problem.blocks]}")

        y, slack, phase1_iters = LmiService._phase1(problem, opts)
        if y is None:
            status = LmiStatus.INFEASIBLE if phase1_iters < opts.phase1_max_iter else LmiStatus.MAX_ITER
            logger.warning(f"Phase I で実行可能点が見つかりません: スラック={slack:.3e}, 状態={status.value}")
            y_last = np.zeros(n)
            return LmiSolution(
                y=y_last,
                status=status,
                objective_value=float("nan"),
                min_margins=LmiService.block_margins(problem, y_last),
                gap=slack,
                iterations=0,
                phase1_iterations=phase1_iters,
            )

        cones = [_ConeBlock(block, opts.eps_strict) for block in problem.blocks]
        m = sum(cone.dim for cone in cones) + 1.0
        t = LmiService._initial_t(cones, c, y, opts.radius, m)
        used = 0
        status = LmiStatus.MAX_ITER

        while used < opts.max_iter:
            y, steps, _ = LmiService._centering(cones, c, y, t, opts.radius, opts.max_iter - used)
            used += steps
            objective = float(c @ y)
            logger.debug(f"Phase II: t={t:.3e}, 目的関数={objective:.8g}, 反復={used}")
            # 目的関数に現れない変数が球面に張り付くのは正則化の結果で、非有界ではない
            if (np.linalg.norm(y) >= 0.99 * opts.radius
                    and objective <= -UNBOUNDED_FRACTION * opts.radius * float(np.linalg.norm(c))):
                status = LmiStatus.UNBOUNDED
                break
            if m / t <= opts.tol * (1.0 + abs(objective)):
                status = LmiStatus.OPTIMAL
                break
            t *= opts.barrier_factor

        objective = float(c @ y)
        margins = LmiService.block_margins(problem, y)
        if status is LmiStatus.OPTIMAL and min(margins, default=np.inf) < opts.eps_strict * (1.0 - 1e-6):
            logger.warning(f"独立な固有値検査でマージンが不足しています: {min(margins):.3e}")
            status = LmiStatus.MAX_ITER

        logger.info(f"LMIの求解が終了: 状態={status.value}, 目的関数={objective:.8g}, "
                    f"ギャップ={m / t:.3e}, 反復={phase1_iters}+{used}")
        return LmiSolution(
            y=y,
            status=status,
            objective_value=objective,
            min_margins=margins,
            gap=m / t,
            iterations=used,
            phase1_iterations=phase1_iters,
        )

    @staticmethod
    def dump_problem(problem: LmiProblem, path: Union[str, Path]) -> Path:
        """
        外部SDPツールと照合するためのテキスト形式で問題を書き出す
        ヘッダ（変数数 ブロック数）、変数名、目的係数、各ブロックの次元・向きと
        F₀ および F_j の上三角トリプレット（1始まり）を並べる

        Raises:
            ReportIOError: 書き込みに失敗した場合
        """
        path = Path(path)
        lines = [f"{problem.n_vars} {len(problem.blocks)}"]
        lines.append(" ".join(problem.var_names))
        lines.append(" ".join(f"{value:.12g}" for value in problem.objective))

        def triplets(mat: np.ndarray) -> List[str]:
            rows, cols = np.triu_indices(mat.shape[0])
            return [
                f"{r + 1} {k + 1} {mat[r, k]:.12g}"
                for r, k in zip(rows, cols) if mat[r, k] != 0.0
            ]

        for block in problem.blocks:
            lines.append(f"block {block.name} {block.dim} {block.sense.value}")
            entries = triplets(block.F0)
            lines.append(f"F 0 {len(entries)}")
            lines.extend(entries)
            for index, mat in block.terms:
                entries = triplets(mat)
                lines.append(f"F {index + 1} {len(entries)}")
                lines.extend(entries)

        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        except OSError as e:
            logger.error(f"問題ダンプの書き込みに失敗: {path}: {str(e)}")
            raise ReportIOError(f"問題ダンプを書き込めません: {path}: {str(e)}")
        logger.info(f"LMI問題をダンプしました: {path}")
        return path
