import math
import time
from typing import Dict, List, Optional, Tuple

import numpy as np
import scipy.linalg

from app.config import settings
from app.core.logging import logger
from app.core.exceptions import (
    DimensionError,
    DomainError,
    InfeasibleSynthesisError,
    NoSpanningTreeError,
    SynthesisVerificationError,
)
from app.schemas.lmi import AffineBlock, BlockSense, LmiProblem, LmiSolution, LmiStatus, SolverOptions
from app.schemas.synthesis import CertificateReport, GainOrigin, Plant, SynthesisResult, SynthesisSpec
from app.schemas.topology import LaplacianBundle
from app.services.lmi import LmiService
from app.services.matkit import MatKit


# ゲイン再設計で要求する減衰率の倍率（ζ に対する余裕）
NOMINAL_RATE_FACTOR = 1.25


def _sym_basis(n: int, a: int, b: int) -> np.ndarray:
    basis = np.zeros((n, n))
    basis[a, b] = 1.0
    basis[b, a] = 1.0
    return basis


class VariableLayout:
    """
    スカラー化した決定変数ベクトルと 𝒫, Θ_i, τ, γ, μ, υ_i の対応
    並び: 𝒫 の上三角、Θ_1..Θ_N の全要素、τ₁, τ₂, τ₃, γ, μ, υ_1..υ_N
    """

    def __init__(self, n: int, n_agents: int):
        self.n = n
        self.n_agents = n_agents
        names: List[str] = []

        self.p_index: Dict[Tuple[int, int], int] = {}
        for a in range(n):
            for b in range(a, n):
                self.p_index[(a, b)] = len(names)
                names.append(f"P[{a + 1},{b + 1}]")

        self.theta_index: List[Dict[Tuple[int, int], int]] = []
        for i in range(n_agents):
            entries = {}
            for r in range(n):
                for c in range(n):
                    entries[(r, c)] = len(names)
                    names.append(f"Theta{i + 1}[{r + 1},{c + 1}]")
            self.theta_index.append(entries)

        base = len(names)
        self.tau1, self.tau2, self.tau3, self.gamma, self.mu = range(base, base + 5)
        names.extend(["tau1", "tau2", "tau3", "gamma", "mu"])

        self.upsilon = list(range(len(names), len(names) + n_agents))
        names.extend(f"upsilon{i + 1}" for i in range(n_agents))
        self.names = names

    @property
    def n_vars(self) -> int:
        return len(self.names)

    def p_basis(self, a: int, b: int) -> np.ndarray:
        return _sym_basis(self.n, a, b)

    def unpack(self, y: np.ndarray) -> Dict[str, object]:
        P = np.zeros((self.n, self.n))
        for (a, b), index in self.p_index.items():
            P[a, b] = y[index]
            P[b, a] = y[index]
        theta = []
        for entries in self.theta_index:
            mat = np.zeros((self.n, self.n))
            for (r, c), index in entries.items():
                mat[r, c] = y[index]
            theta.append(mat)
        return {
            "P": P,
            "Theta": theta,
            "tau": (float(y[self.tau1]), float(y[self.tau2]), float(y[self.tau3])),
            "gamma": float(y[self.gamma]),
            "mu": float(y[self.mu]),
            "upsilon": [float(y[index]) for index in self.upsilon],
        }

    def pack(self, P: np.ndarray, theta: List[np.ndarray], tau: Tuple[float, float, float],
             gamma: float, mu: float, upsilon: List[float]) -> np.ndarray:
        y = np.zeros(self.n_vars)
        for (a, b), index in self.p_index.items():
            y[index] = P[a, b]
        for mat, entries in zip(theta, self.theta_index):
            for (r, c), index in entries.items():
                y[index] = mat[r, c]
        y[self.tau1], y[self.tau2], y[self.tau3] = tau
        y[self.gamma] = gamma
        y[self.mu] = mu
        y[self.upsilon] = upsilon
        return y


class NominalLayout:
    """
    ゲイン再設計 LMI の決定変数の並び: Q の上三角、Y_1..Y_N の全要素（m×n）、ε、ρ
    """

    def __init__(self, n: int, m: int, n_agents: int):
        self.n = n
        self.m = m
        names: List[str] = []
        self.q_index: Dict[Tuple[int, int], int] = {}
        for a in range(n):
            for b in range(a, n):
                self.q_index[(a, b)] = len(names)
                names.append(f"Q[{a + 1},{b + 1}]")
        self.y_index: List[Dict[Tuple[int, int], int]] = []
        for i in range(n_agents):
            entries = {}
            for r in range(m):
                for c in range(n):
                    entries[(r, c)] = len(names)
                    names.append(f"Y{i + 1}[{r + 1},{c + 1}]")
            self.y_index.append(entries)
        self.eps, self.rho = len(names), len(names) + 1
        names.extend(["eps", "rho"])
        self.names = names

    @property
    def n_vars(self) -> int:
        return len(self.names)

    def q_basis(self, a: int, b: int) -> np.ndarray:
        return _sym_basis(self.n, a, b)

    def gains(self, z: np.ndarray) -> List[np.ndarray]:
        """K_i = Y_i Q⁻¹"""
        Q = np.zeros((self.n, self.n))
        for (a, b), index in self.q_index.items():
            Q[a, b] = Q[b, a] = z[index]
        gains = []
        for entries in self.y_index:
            Y = np.zeros((self.m, self.n))
            for (r, c), index in entries.items():
                Y[r, c] = z[index]
            gains.append(scipy.linalg.solve(Q, Y.T, assume_a="pos").T)
        return gains


class SynthesisService:
    """
    ゲインと送信閾値の同時設計を行うサービスクラス
    LMI の組み立て、求解、ゲイン復元、閉ループ検証、Zeno 下界の計算を担当する
    """

    @staticmethod
    def _check_inputs(plant: Plant, bundle: LaplacianBundle) -> None:
        if bundle.n != plant.n:
            raise DimensionError(f"バンドルの状態次元 {bundle.n} がプラントの n={plant.n} と一致しません")
        if bundle.n_agents != plant.n_agents:
            raise DimensionError(
                f"グラフのエージェント数 {bundle.n_agents} と B_i の数 {plant.n_agents} が一致しません"
            )
        if MatKit.rank(bundle.L) != bundle.n_agents - 1:
            raise NoSpanningTreeError()

    @staticmethod
    def _analysis_terms(plant: Plant, bundle: LaplacianBundle, spec: SynthesisSpec,
                        layout: VariableLayout) -> Tuple[int, List[Tuple[int, np.ndarray]]]:
        """
        ブロック (i) の各変数の係数行列を作る
        ブロック構成: [x_r, e_r, σ₁, σ₂, イベント項]
        """
        n, m, N = plant.n, plant.m, plant.n_agents
        q = (N - 1) * n
        nm = N * m
        dim = 3 * q + 2 * nm
        s1, s2, s3, s4, s5 = (slice(0, q), slice(q, 2 * q), slice(2 * q, 2 * q + nm),
                              slice(2 * q + nm, 2 * q + 2 * nm), slice(2 * q + 2 * nm, dim))

        A_r = np.kron(np.eye(N - 1), plant.A)
        L_hat_n = bundle.L_hat_n()
        B = scipy.linalg.block_diag(*plant.B)
        lift = bundle.lift
        lift_gram = lift.T @ lift
        M_n_t = bundle.M_n().T

        terms: List[Tuple[int, np.ndarray]] = []

        def place(entries) -> np.ndarray:
            mat = np.zeros((dim, dim))
            for rows, cols, block in entries:
                mat[rows, cols] += block
                if rows != cols:
                    mat[cols, rows] += block.T
            return mat

        # 𝒫 の上三角
        for (a, b), index in layout.p_index.items():
            P_e = np.kron(np.eye(N - 1), layout.p_basis(a, b))
            coupling = P_e @ L_hat_n @ B
            terms.append((index, place([
                (s1, s1, A_r.T @ P_e + P_e @ A_r + 2.0 * spec.zeta * P_e),
                (s1, s3, coupling),
                (s1, s4, coupling),
            ])))

        # Θ_i の各要素: Ξ = (L̂ ⊗ 1ₙ1ₙᵀ) ∘ (1_{N−1} ⊗ [Θ_1, …, Θ_N])
        for i, entries in enumerate(layout.theta_index):
            selector = np.zeros((1, N))
            selector[0, i] = 1.0
            column = bundle.L_hat[:, i:i + 1] @ selector
            for (r, c), index in entries.items():
                unit = np.zeros((n, n))
                unit[r, c] = 1.0
                xi_lift = np.kron(column, unit) @ lift
                terms.append((index, place([
                    (s1, s1, xi_lift + xi_lift.T),
                    (s1, s2, xi_lift),
                ])))

        delta_sq = spec.delta ** 2
        terms.append((layout.tau1, place([
            (s1, s1, delta_sq * lift_gram),
            (s3, s3, -np.eye(nm)),
        ])))
        terms.append((layout.tau2, place([
            (s2, s2, delta_sq * lift_gram),
            (s4, s4, -np.eye(nm)),
        ])))
        terms.append((layout.tau3, place([
            (s2, s2, -np.eye(q)),
            (s1, s5, M_n_t),
            (s2, s5, M_n_t),
        ])))
        terms.append((layout.gamma, place([(s5, s5, -np.eye(q))])))
        return dim, terms

    @staticmethod
    def assemble_lmis(plant: Plant, bundle: LaplacianBundle, spec: SynthesisSpec) -> LmiProblem:
        """
        ゲイン・閾値同時設計の LMI 問題を組み立てる

        Args:
            plant (Plant): プラント
            bundle (LaplacianBundle): このプラントの n で構築したラプラシアン一式
            spec (SynthesisSpec): 合成条件

        Returns:
            LmiProblem: 目的関数 γ + μ + Συ_i と3つの制約ブロックを持つ問題

        Raises:
            NoSpanningTreeError: グラフが全域木を持たない場合
            DimensionError: 次元が整合しない場合
        """
        SynthesisService._check_inputs(plant, bundle)
        n, N = plant.n, plant.n_agents
        layout = VariableLayout(n, N)

        # (i) 解析 LMI ≺ 0
        dim, terms = SynthesisService._analysis_terms(plant, bundle, spec, layout)
        analysis = AffineBlock(
            name="analysis", sense=BlockSense.NEGATIVE_DEFINITE, F0=np.zeros((dim, dim)), terms=terms
        )

        # (ii) [μI, I; I, 𝒫] ≻ 0
        eye = np.eye(n)
        zero = np.zeros((n, n))
        bound_terms = [(layout.mu, np.block([[eye, zero], [zero, zero]]))]
        for (a, b), index in layout.p_index.items():
            bound_terms.append((index, np.block([[zero, zero], [zero, layout.p_basis(a, b)]])))
        inverse_bound = AffineBlock(
            name="inverse_bound", sense=BlockSense.POSITIVE_DEFINITE,
            F0=np.block([[zero, eye], [eye, zero]]), terms=bound_terms,
        )

        # (iii) [−Υ, Θᵀ; Θ, −I] ≺ 0
        size = N * n
        F0 = np.zeros((2 * size, 2 * size))
        F0[size:, size:] = -np.eye(size)
        norm_terms = []
        for i in range(N):
            rows = slice(i * n, (i + 1) * n)
            mat = np.zeros((2 * size, 2 * size))
            mat[rows, rows] = -np.eye(n)
            norm_terms.append((layout.upsilon[i], mat))
            lower = slice(size + i * n, size + (i + 1) * n)
            for (r, c), index in layout.theta_index[i].items():
                mat = np.zeros((2 * size, 2 * size))
                unit = np.zeros((n, n))
                unit[r, c] = 1.0
                mat[lower, rows] = unit
                mat[rows, lower] = unit.T
                norm_terms.append((index, mat))
        gain_bound = AffineBlock(
            name="gain_bound", sense=BlockSense.NEGATIVE_DEFINITE, F0=F0, terms=norm_terms
        )

        objective = np.zeros(layout.n_vars)
        objective[layout.gamma] = 1.0
        objective[layout.mu] = 1.0
        objective[layout.upsilon] = 1.0

        logger.info(f"LMIを組み立てました: 変数={layout.n_vars}, ブロック次元=({dim}, {2 * n}, {2 * size})")
        return LmiProblem(
            var_names=layout.names,
            objective=objective,
            blocks=[analysis, inverse_bound, gain_bound],
        )

    @staticmethod
    def _reconstruction_residuals(plant: Plant, P: np.ndarray, theta: List[np.ndarray],
                                  gains: List[np.ndarray]) -> List[float]:
        """‖𝒫B_iK_i − Θ_i‖_F / ‖Θ_i‖_F"""
        residuals = []
        for b, th, k in zip(plant.B, theta, gains):
            scale = MatKit.frobenius_norm(th)
            residual = MatKit.frobenius_norm(P @ b @ k - th)
            residuals.append(residual / scale if scale > 0.0 else residual)
        return residuals

    @staticmethod
    def recover_gains(plant: Plant, P: np.ndarray, theta: List[np.ndarray]) -> Tuple[List[np.ndarray], List[float]]:
        """
        K_i = B_i⁺ 𝒫⁻¹ Θ_i と再構成残差 ‖𝒫B_iK_i − Θ_i‖_F / ‖Θ_i‖_F を計算する
        """
        gains = [
            MatKit.pinv(b) @ scipy.linalg.solve(P, th, assume_a="pos")
            for b, th in zip(plant.B, theta)
        ]
        return gains, SynthesisService._reconstruction_residuals(plant, P, theta, gains)

    @staticmethod
    def _check_gains(plant: Plant, gains: List[np.ndarray]) -> List[np.ndarray]:
        gains = [np.asarray(k, dtype=float) for k in gains]
        if len(gains) != plant.n_agents or any(k.shape != (plant.m, plant.n) for k in gains):
            raise DimensionError(f"ゲインは {plant.n_agents} 個の {plant.m}×{plant.n} 行列である必要があります")
        return gains

    @staticmethod
    def _accepted(solution: LmiSolution, spec: SynthesisSpec) -> bool:
        """OPTIMAL、または反復上限でも全ブロックが ε_strict を満たす点なら採用する"""
        if solution.status is LmiStatus.OPTIMAL:
            return True
        feasible_point = min(solution.min_margins, default=0.0) >= spec.eps_strict * (1.0 - 1e-6)
        if solution.status is LmiStatus.MAX_ITER and feasible_point:
            logger.warning("反復上限に達しましたが実行可能点は得られているため結果を採用します")
            return True
        return False

    @staticmethod
    def _draft(plant: Plant, spec: SynthesisSpec, values: Dict[str, object], gains: List[np.ndarray],
               residuals: List[float], solution: LmiSolution, origin: GainOrigin) -> SynthesisResult:
        """検証前の合成結果を作る（φ は √(τ₃/γ)）"""
        P = values["P"]
        tau = values["tau"]
        gamma = values["gamma"]
        phi_lmi = math.sqrt(tau[2] / gamma)
        eigenvalues, _ = MatKit.sym_eig(P)
        return SynthesisResult(
            zeta=spec.zeta,
            delta=spec.delta,
            P_script=P,
            Theta=values["Theta"],
            tau=tau,
            gamma=gamma,
            mu=values["mu"],
            upsilon=values["upsilon"],
            phi=phi_lmi,
            phi_lmi=phi_lmi,
            K=gains,
            c=math.sqrt(eigenvalues[-1] / eigenvalues[0]),
            recon_residual=residuals,
            verified=False,
            solver_status=solution.status,
            objective_value=solution.objective_value,
            min_margins=solution.min_margins,
            gain_origin=origin,
        )

    @staticmethod
    def solve_lmis(plant: Plant, bundle: LaplacianBundle, spec: SynthesisSpec,
                   opts: Optional[SolverOptions] = None) -> LmiSolution:
        """
        LMI を組み立てて内点法で解く（実行可能性の判定は from_solution で行う）
        """
        problem = SynthesisService.assemble_lmis(plant, bundle, spec)
        opts = opts or SolverOptions(eps_strict=spec.eps_strict)
        return LmiService.solve(problem, opts)

    @staticmethod
    def synthesize(plant: Plant, bundle: LaplacianBundle, spec: SynthesisSpec,
                   opts: Optional[SolverOptions] = None, nonbinary_weights: bool = False) -> SynthesisResult:
        """
        LMI を解いてゲイン K_i と送信閾値 φ を設計する

        Args:
            plant (Plant): プラント
            bundle (LaplacianBundle): ラプラシアン一式
            spec (SynthesisSpec): 合成条件
            opts (Optional[SolverOptions], optional): ソルバーオプション
            nonbinary_weights (bool, optional): グラフの重みが0/1以外を含むか（レポート用）

        Returns:
            SynthesisResult: 検証済みの合成結果

        Raises:
            InfeasibleSynthesisError: (ζ, δ) に対して解がない場合
            SynthesisVerificationError: どの方法でも閉ループ検証が通らない場合
        """
        logger.info(f"合成を開始: ζ={spec.zeta}, δ={spec.delta}, N={plant.n_agents}")
        started = time.perf_counter()
        solution = SynthesisService.solve_lmis(plant, bundle, spec, opts)
        return SynthesisService.from_solution(plant, bundle, spec, solution, started, nonbinary_weights, opts)

    @staticmethod
    def from_solution(plant: Plant, bundle: LaplacianBundle, spec: SynthesisSpec, solution: LmiSolution,
                      started: Optional[float] = None, nonbinary_weights: bool = False,
                      opts: Optional[SolverOptions] = None) -> SynthesisResult:
        """
        ソルバーの解の実行可能性を判定し、𝒫, K_i, φ, c を取り出して閉ループ検証する

        取り出したゲインで検証が通らなければ、φ の縮小、ゲインを固定した証明書の再計算、
        合同変換 LMI によるゲインの再設計の順に試す

        Raises:
            InfeasibleSynthesisError: ソルバーが実行可能点を返さなかった場合
            SynthesisVerificationError: どの方法でも閉ループ検証が通らない場合
        """
        started = time.perf_counter() if started is None else started
        if not SynthesisService._accepted(solution, spec):
            logger.warning(f"(ζ={spec.zeta}, δ={spec.delta}) で解が得られません: {solution.status.value}")
            raise InfeasibleSynthesisError(spec.zeta, spec.delta)

        layout = VariableLayout(plant.n, plant.n_agents)
        values = layout.unpack(solution.y)
        gains, residuals = SynthesisService.recover_gains(plant, values["P"], values["Theta"])
        draft = SynthesisService._draft(plant, spec, values, gains, residuals, solution, GainOrigin.EXTRACTED)
        logger.info(f"LMIの解: φ={draft.phi_lmi:.4f}, τ₃={draft.tau[2]:.4f}, γ={draft.gamma:.4f}, "
                    f"最大再構成残差={max(residuals):.3e}")

        result = SynthesisService._certify(plant, bundle, spec, draft, opts)
        result = result.model_copy(update={"nonbinary_weights": nonbinary_weights})
        logger.info(f"合成が完了: φ={result.phi:.4f}, c={result.c:.4f}, 検証マージン={result.verify_margin:.3e}, "
                    f"ゲインの出どころ={result.gain_origin.value}, 所要時間={time.perf_counter() - started:.2f}s")
        return result

    @staticmethod
    def _certify(plant: Plant, bundle: LaplacianBundle, spec: SynthesisSpec, draft: SynthesisResult,
                 opts: Optional[SolverOptions] = None) -> SynthesisResult:
        """
        取り出したゲインを検証し、通らなければ固定ゲインでの証明書の再計算、ゲインの再設計の順に試す
        """
        try:
            return SynthesisService._with_verified_phi(plant, bundle, spec, draft)
        except SynthesisVerificationError as error:
            failure = error

        candidates = [
            (GainOrigin.REFIT, lambda: draft.K),
            (GainOrigin.REDESIGNED, lambda: SynthesisService.design_nominal_gains(plant, bundle, spec, opts)),
        ]
        for origin, make_gains in candidates:
            gains = make_gains()
            if gains is None:
                continue
            refit = SynthesisService.refit_certificate(plant, bundle, spec, gains, opts, origin)
            if refit is None:
                continue
            try:
                return SynthesisService._with_verified_phi(plant, bundle, spec, refit)
            except SynthesisVerificationError as error:
                failure = error
        raise failure

    @staticmethod
    def _with_verified_phi(plant: Plant, bundle: LaplacianBundle, spec: SynthesisSpec,
                           draft: SynthesisResult) -> SynthesisResult:
        phi, margin = SynthesisService._largest_verified_phi(plant, bundle, spec, draft)
        return draft.model_copy(update={"phi": phi, "verified": True, "verify_margin": margin})

    @staticmethod
    def _largest_verified_phi(plant: Plant, bundle: LaplacianBundle, spec: SynthesisSpec,
                              result: SynthesisResult) -> Tuple[float, float]:
        """
        φ = √(τ₃/γ) で検証し、通らなければ [PHI_MIN, φ] の二分探索で通る最大の φ を探す
        """
        ok, margin = SynthesisService.verify_closed_loop(plant, bundle, spec, result)
        if ok:
            return result.phi_lmi, margin

        logger.warning(f"閉ループ検証に失敗 (マージン={margin:.3e}, ゲイン={result.gain_origin.value})。φ を縮小します")
        lo = settings.PHI_MIN
        ok, lo_margin = SynthesisService.verify_closed_loop(
            plant, bundle, spec, result.model_copy(update={"phi": lo})
        )
        if not ok:
            logger.warning(f"φ={lo} でも閉ループ検証に失敗しました (マージン={lo_margin:.3e})")
            raise SynthesisVerificationError(
                f"ゲインを固定したまま φ={lo} まで下げても閉ループ LMI が成立しません (マージン={lo_margin:.3e})"
            )

        hi = result.phi_lmi
        while hi - lo > 1e-6 * hi:
            mid = 0.5 * (lo + hi)
            ok, mid_margin = SynthesisService.verify_closed_loop(
                plant, bundle, spec, result.model_copy(update={"phi": mid})
            )
            if ok:
                lo, lo_margin = mid, mid_margin
            else:
                hi = mid
        logger.info(f"φ を {result.phi_lmi:.4f} から {lo:.4f} に縮小しました")
        return lo, lo_margin

    @staticmethod
    def fixed_gain_lmis(plant: Plant, bundle: LaplacianBundle, spec: SynthesisSpec,
                        gains: List[np.ndarray]) -> Tuple[LmiProblem, np.ndarray]:
        """
        ゲイン K_i を固定し Θ_i = 𝒫B_iK_i を代入した LMI 問題を作る
        変数は 𝒫 の上三角、τ₁, τ₂, τ₃, γ, μ, υ_1..υ_N で、ブロックと目的関数は同時設計と同じ

        Returns:
            Tuple[LmiProblem, np.ndarray]: 問題と、元の変数への代入行列 T（y = T z）
        """
        gains = SynthesisService._check_gains(plant, gains)
        full = SynthesisService.assemble_lmis(plant, bundle, spec)
        layout = VariableLayout(plant.n, plant.n_agents)
        scalars = [layout.tau1, layout.tau2, layout.tau3, layout.gamma, layout.mu, *layout.upsilon]
        n_p = len(layout.p_index)

        basis = np.zeros((layout.n_vars, n_p + len(scalars)))
        names: List[str] = []
        for col, (pair, index) in enumerate(layout.p_index.items()):
            basis[index, col] = 1.0
            names.append(layout.names[index])
            for b, k, entries in zip(plant.B, gains, layout.theta_index):
                # ∂Θ_i/∂𝒫_ab = E_ab B_i K_i
                derivative = layout.p_basis(*pair) @ b @ k
                for (r, c), theta_index in entries.items():
                    basis[theta_index, col] = derivative[r, c]
        for offset, index in enumerate(scalars):
            basis[index, n_p + offset] = 1.0
            names.append(layout.names[index])
        return LmiService.restrict(full, basis, names), basis

    @staticmethod
    def refit_certificate(plant: Plant, bundle: LaplacianBundle, spec: SynthesisSpec, gains: List[np.ndarray],
                          opts: Optional[SolverOptions] = None,
                          origin: GainOrigin = GainOrigin.REFIT) -> Optional[SynthesisResult]:
        """
        ゲインを固定して (𝒫, τ, γ, μ, υ_i) を解き直す
        Θ_i = 𝒫B_iK_i が恒等的に成り立つので、検証行列はソルバーが保証した解析ブロックと一致する

        Returns:
            Optional[SynthesisResult]: 未検証の合成結果。固定したゲインでは実行不能なら None
        """
        gains = SynthesisService._check_gains(plant, gains)
        problem, basis = SynthesisService.fixed_gain_lmis(plant, bundle, spec, gains)
        solution = LmiService.solve(problem, opts or SolverOptions(eps_strict=spec.eps_strict))
        if not SynthesisService._accepted(solution, spec):
            logger.info(f"固定したゲインでは証明書が得られません: {solution.status.value}")
            return None

        values = VariableLayout(plant.n, plant.n_agents).unpack(basis @ solution.y)
        residuals = SynthesisService._reconstruction_residuals(plant, values["P"], values["Theta"], gains)
        draft = SynthesisService._draft(plant, spec, values, gains, residuals, solution, origin)
        logger.info(f"固定ゲインで証明書を再計算しました: φ={draft.phi_lmi:.4f}, 出どころ={origin.value}")
        return draft

    @staticmethod
    def nominal_gain_lmis(plant: Plant, bundle: LaplacianBundle,
                          spec: SynthesisSpec) -> Tuple[LmiProblem, NominalLayout]:
        """
        Q = 𝒫⁻¹, Y_i = K_iQ の合同変換でゲインを直接設計する LMI を組み立てる
        減衰率 NOMINAL_RATE_FACTOR·ζ を ‖ΔK_i‖ ≤ δ に対して保証し、ρ ≥ ‖Y_i‖² を最小化する

        ブロック:
            nominal_rate: [[A_rQ̄ + Q̄A_rᵀ + 2ζ'Q̄ + XY𝕃 + 𝕃ᵀYᵀXᵀ + εXXᵀ, δQ̄𝕃ᵀ], [δ𝕃Q̄, −εI]] ≺ 0（X = L̂⟨n⟩B）
            normalization: Q − I ≻ 0
            gain_bound: diag_i [[ρI, Y_iᵀ], [Y_i, I]] ≻ 0
        """
        SynthesisService._check_inputs(plant, bundle)
        n, m, N = plant.n, plant.m, plant.n_agents
        q = (N - 1) * n
        size = N * n
        layout = NominalLayout(n, m, N)
        rate = NOMINAL_RATE_FACTOR * spec.zeta

        A_r = np.kron(np.eye(N - 1), plant.A)
        X = bundle.L_hat_n() @ scipy.linalg.block_diag(*plant.B)
        lift = bundle.lift
        sx, su = slice(0, q), slice(q, q + size)

        rate_terms: List[Tuple[int, np.ndarray]] = []
        for pair, index in layout.q_index.items():
            Q_e = np.kron(np.eye(N - 1), layout.q_basis(*pair))
            mat = np.zeros((q + size, q + size))
            mat[sx, sx] = A_r @ Q_e + Q_e @ A_r.T + 2.0 * rate * Q_e
            mat[su, sx] = spec.delta * lift @ Q_e
            mat[sx, su] = mat[su, sx].T
            rate_terms.append((index, mat))
        for i, entries in enumerate(layout.y_index):
            for (r, c), index in entries.items():
                Y = np.zeros((N * m, size))
                Y[i * m + r, i * n + c] = 1.0
                term = X @ Y @ lift
                mat = np.zeros((q + size, q + size))
                mat[sx, sx] = term + term.T
                rate_terms.append((index, mat))
        mat = np.zeros((q + size, q + size))
        mat[sx, sx] = X @ X.T
        mat[su, su] = -np.eye(size)
        rate_terms.append((layout.eps, mat))
        nominal_rate = AffineBlock(
            name="nominal_rate", sense=BlockSense.NEGATIVE_DEFINITE,
            F0=np.zeros((q + size, q + size)), terms=rate_terms,
        )

        normalization = AffineBlock(
            name="normalization", sense=BlockSense.POSITIVE_DEFINITE, F0=-np.eye(n),
            terms=[(index, layout.q_basis(*pair)) for pair, index in layout.q_index.items()],
        )

        width = n + m
        F0 = np.zeros((N * width, N * width))
        bound_terms: List[Tuple[int, np.ndarray]] = []
        rho_mat = np.zeros((N * width, N * width))
        for i, entries in enumerate(layout.y_index):
            top = slice(i * width, i * width + n)
            bottom = slice(i * width + n, (i + 1) * width)
            F0[bottom, bottom] = np.eye(m)
            rho_mat[top, top] = np.eye(n)
            for (r, c), index in entries.items():
                mat = np.zeros((N * width, N * width))
                mat[bottom.start + r, top.start + c] = 1.0
                mat[top.start + c, bottom.start + r] = 1.0
                bound_terms.append((index, mat))
        bound_terms.append((layout.rho, rho_mat))
        gain_bound = AffineBlock(
            name="gain_bound", sense=BlockSense.POSITIVE_DEFINITE, F0=F0, terms=bound_terms
        )

        objective = np.zeros(layout.n_vars)
        objective[layout.rho] = 1.0
        problem = LmiProblem(
            var_names=layout.names, objective=objective, blocks=[nominal_rate, normalization, gain_bound]
        )
        return problem, layout

    @staticmethod
    def design_nominal_gains(plant: Plant, bundle: LaplacianBundle, spec: SynthesisSpec,
                             opts: Optional[SolverOptions] = None) -> Optional[List[np.ndarray]]:
        """
        合同変換 LMI を解いて K_i = Y_iQ⁻¹ を設計する

        Returns:
            Optional[List[np.ndarray]]: m×n のゲイン。実行不能なら None
        """
        problem, layout = SynthesisService.nominal_gain_lmis(plant, bundle, spec)
        solution = LmiService.solve(problem, opts or SolverOptions(eps_strict=spec.eps_strict))
        if not SynthesisService._accepted(solution, spec):
            logger.info(f"ゲインの再設計 LMI が解けません: {solution.status.value}")
            return None
        gains = layout.gains(solution.y)
        logger.info(f"ゲインを再設計しました: 最大ノルム={max(MatKit.frobenius_norm(k) for k in gains):.4f}")
        return gains

    @staticmethod
    def verify_closed_loop(plant: Plant, bundle: LaplacianBundle, spec: SynthesisSpec,
                           result: SynthesisResult) -> Tuple[bool, float]:
        """
        復元したゲイン K_i を解析行列に代入し、最大固有値で閉ループを検証する
        Θ_i を 𝒫B_iK_i に置き換え、イベント項の対角を −τ₃/φ²·I とした合同変換形で評価する

        Returns:
            Tuple[bool, float]: 最大固有値 < −ε_verify なら True、マージン = −最大固有値
        """
        if result.phi <= 0.0:
            raise DomainError(f"検証には φ > 0 が必要です: φ={result.phi}")
        SynthesisService._check_inputs(plant, bundle)
        layout = VariableLayout(plant.n, plant.n_agents)
        realized = [result.P_script @ b @ k for b, k in zip(plant.B, result.K)]
        y = layout.pack(
            result.P_script, realized, result.tau,
            result.tau[2] / result.phi ** 2, result.mu, result.upsilon,
        )
        dim, terms = SynthesisService._analysis_terms(plant, bundle, spec, layout)
        matrix = AffineBlock(
            name="closed_loop", sense=BlockSense.NEGATIVE_DEFINITE, F0=np.zeros((dim, dim)), terms=terms
        ).evaluate(y)
        largest = MatKit.max_eig(matrix)
        return bool(largest < -settings.VERIFY_EPS), -largest

    @staticmethod
    def check_certificates(result: SynthesisResult, eps: float = 0.0) -> CertificateReport:
        """
        保存済み合成結果の各証明書を独立な固有値計算で再検査する
        """
        P = result.P_script
        checks: Dict[str, bool] = {}
        details: Dict[str, float] = {}

        p_min = MatKit.min_eig(P)
        details["P_min_eig"] = p_min
        checks["P_positive_definite"] = MatKit.is_positive_definite(P) and p_min > eps

        inverse_bound = result.mu * np.eye(P.shape[0]) - scipy.linalg.inv(P)
        details["mu_bound_min_eig"] = MatKit.min_eig(inverse_bound)
        checks["mu_bound"] = details["mu_bound_min_eig"] > 0.0

        upsilon_margins = [
            MatKit.min_eig(u * np.eye(th.shape[1]) - th.T @ th)
            for u, th in zip(result.upsilon, result.Theta)
        ]
        details["upsilon_bound_min_eig"] = min(upsilon_margins)
        checks["upsilon_bounds"] = all(v > 0.0 for v in upsilon_margins)

        checks["tau_positive"] = all(t > 0.0 for t in result.tau)
        checks["scalars_positive"] = result.gamma > 0.0 and result.mu > 0.0 and all(u > 0.0 for u in result.upsilon)

        phi_identity = math.sqrt(result.tau[2] / result.gamma)
        details["phi_lmi_recomputed"] = phi_identity
        checks["phi_identity"] = math.isclose(phi_identity, result.phi_lmi, rel_tol=1e-9)
        checks["phi_within_certificate"] = 0.0 <= result.phi <= result.phi_lmi * (1.0 + 1e-9)

        eigenvalues = scipy.linalg.eigvalsh(P)
        c = math.sqrt(eigenvalues[-1] / eigenvalues[0]) if eigenvalues[0] > 0 else float("inf")
        details["c_recomputed"] = c
        checks["envelope_constant"] = c >= 1.0 and math.isclose(c, result.c, rel_tol=1e-9)

        report = CertificateReport(ok=all(checks.values()), checks=checks, details=details)
        if not report.ok:
            failed = [name for name, ok in checks.items() if not ok]
            logger.warning(f"証明書の再検査に失敗: {failed}")
        return report

    @staticmethod
    def zeno_lower_bound(phi: float, A_norm: float, Xhat_at_trigger: float, F_bar: float) -> float:
        """
        イベント間隔の下界 (1/‖A‖)·ln(φ‖A‖‖X̂_i(t_k)‖/F̄ + 1) を返す
        ‖X̂_i(t_k)‖ = 0 のときは閾値が0なので即時に再送信しうるため0、
        それ以外で F̄ = 0 のときは状態が動かず次のイベントが来ないため +∞ を返す

        Raises:
            DomainError: ‖A‖ ≤ 0 または負の入力の場合
        """
        if A_norm <= 0.0:
            raise DomainError(f"‖A‖ は正である必要があります: {A_norm}")
        if phi < 0.0 or Xhat_at_trigger < 0.0 or F_bar < 0.0:
            raise DomainError("φ, ‖X̂‖, F̄ は非負である必要があります")
        if phi == 0.0 or Xhat_at_trigger == 0.0:
            return 0.0
        if F_bar == 0.0:
            return math.inf
        return math.log(phi * A_norm * Xhat_at_trigger / F_bar + 1.0) / A_norm
