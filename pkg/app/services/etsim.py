import math
from typing import Callable, List, Optional, Tuple

import numpy as np

from app.config import settings
from app.core.logging import logger
from app.core.exceptions import DimensionError, DomainError, SimulationDivergedError
from app.schemas.simulation import (
    IntegratorKind,
    InterEventRecord,
    SimConfig,
    SimResult,
    UncertaintyKind,
    UncertaintyModel,
)
from app.schemas.synthesis import Plant
from app.schemas.topology import LaplacianBundle
from app.services.matkit import MatKit
from app.services.synthesis import SynthesisService


class FixedStepIntegrator:
    """
    固定ステップ積分器の基底クラス
    """

    def __init__(self, func: Callable[[float, np.ndarray], np.ndarray]):
        self.func = func

    def integration_step(self, t: float, x: np.ndarray, h: float) -> np.ndarray:
        raise NotImplementedError


class Euler(FixedStepIntegrator):
    """前進オイラー法"""

    def integration_step(self, t: float, x: np.ndarray, h: float) -> np.ndarray:
        return x + h * self.func(t, x)


class RK4(FixedStepIntegrator):
    """古典的4段4次ルンゲ・クッタ法"""

    def integration_step(self, t: float, x: np.ndarray, h: float) -> np.ndarray:
        half = 0.5 * h
        k1 = self.func(t, x)
        k2 = self.func(t + half, x + half * k1)
        k3 = self.func(t + half, x + half * k2)
        k4 = self.func(t + h, x + h * k3)
        return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


INTEGRATORS = {IntegratorKind.EULER: Euler, IntegratorKind.RK4: RK4}


class EventTriggeredSimulator:
    """
    イベントトリガ型コンセンサス閉ループの固定ステップシミュレータ
    エージェントごとの非同期トリガ、ゲイン不確かさの注入、収束判定、評価指標の計算を行う
    """

    @staticmethod
    def uncertainty_fn(model: UncertaintyModel, n_agents: int, m: int, n: int,
                       seed: int = 0) -> Callable[[float], np.ndarray]:
        """
        時刻 t の Δ_K(t) を (N, m, n) 配列で返す関数を作る

        Raises:
            DimensionError: 振幅の数がエージェント数と一致しない場合
            DomainError: CUSTOM が上界 δ を超える値を返した場合
        """
        if model.kind is UncertaintyKind.NONE:
            zero = np.zeros((n_agents, m, n))
            return lambda t: zero

        if model.kind in (UncertaintyKind.SINUSOID, UncertaintyKind.RANDOM):
            amplitudes = model.amplitudes if model.amplitudes is not None else [model.bound] * n_agents
            if len(amplitudes) != n_agents:
                raise DimensionError(f"振幅の数 {len(amplitudes)} がエージェント数 {n_agents} と一致しません")
            if model.kind is UncertaintyKind.SINUSOID:
                directions = np.ones((n_agents, m, n)) / math.sqrt(m * n)
            else:
                directions = np.random.default_rng(seed).standard_normal((n_agents, m, n))
                directions /= np.linalg.norm(directions.reshape(n_agents, -1), axis=1)[:, None, None]
            shape = np.asarray(amplitudes, dtype=float)[:, None, None] * directions
            return lambda t: math.sin(t) * shape

        def custom(t: float) -> np.ndarray:
            values = np.array([np.asarray(model.custom(t, i), dtype=float).reshape(m, n) for i in range(n_agents)])
            norms = np.linalg.norm(values.reshape(n_agents, -1), axis=1)
            if np.any(norms > model.bound * (1.0 + 1e-9)):
                raise DomainError(f"t={t} で不確かさ ‖Δ_Ki‖={norms.max():.4g} が δ={model.bound} を超えています")
            return values

        return custom

    @staticmethod
    def run(plant: Plant, bundle: LaplacianBundle, gains: List[np.ndarray], cfg: SimConfig) -> SimResult:
        """
        イベントトリガ閉ループをシミュレーションする

        t=0 で全エージェントが送信し、各ステップで状態を更新した後に
        保持中の X̂ で収束判定、続いて全エージェントのトリガ条件 ‖e_i‖ ≥ φ‖X̂_i‖ を同時に評価する

        Args:
            plant (Plant): プラント
            bundle (LaplacianBundle): ラプラシアン一式
            gains (List[np.ndarray]): m×n のゲイン K_i
            cfg (SimConfig): シミュレーション設定

        Returns:
            SimResult: シミュレーション結果

        Raises:
            DimensionError: ゲインや初期状態の次元が不正な場合
            SimulationDivergedError: 状態が非有限値になった場合
        """
        N, n, m = plant.n_agents, plant.n, plant.m
        if len(gains) != N or any(np.shape(k) != (m, n) for k in gains):
            raise DimensionError(f"ゲインは {N} 個の {m}×{n} 行列である必要があります")
        if len(cfg.initial_states) != N * n:
            raise DimensionError(f"初期状態の長さ {len(cfg.initial_states)} が N·n={N * n} と一致しません")
        if bundle.n_agents != N:
            raise DimensionError(f"グラフのエージェント数 {bundle.n_agents} が N={N} と一致しません")

        A = plant.A
        B = np.array(plant.B)                       # (N, n, m)
        K = np.array([np.asarray(k, dtype=float) for k in gains])  # (N, m, n)
        L = np.asarray(bundle.L)
        L_hat = np.asarray(bundle.L_hat)
        delta_k = EventTriggeredSimulator.uncertainty_fn(cfg.uncertainty, N, m, n, cfg.seed)
        T_s, phi, delta_c = cfg.T_s, cfg.phi, cfg.delta_c

        x = np.asarray(cfg.initial_states, dtype=float).reshape(N, n).copy()
        xhat = x.copy()
        Xhat = L @ xhat

        def inputs(t: float, held: np.ndarray) -> np.ndarray:
            return np.einsum("imn,in->im", K + delta_k(t), held)

        def dynamics(t: float, state: np.ndarray) -> np.ndarray:
            return state @ A.T + np.einsum("inm,im->in", B, inputs(t, Xhat))

        integrator = INTEGRATORS[cfg.integrator](dynamics)

        counts = np.ones(N, dtype=int)
        trigger_times: List[List[float]] = [[0.0] for _ in range(N)]
        interevent: List[List[InterEventRecord]] = [[] for _ in range(N)]
        xhat_at_trigger = np.linalg.norm(Xhat, axis=1)
        f_running = np.zeros(N)
        ju = 0.0
        max_rate = 0.0
        worst_excess = -math.inf

        times, states, sampled_u = [0.0], [x.copy()], [inputs(0.0, Xhat)]

        logger.info(f"シミュレーションを開始: N={N}, φ={phi:.4f}, T_s={T_s}, 積分法={cfg.integrator.value}")

        converged = bool(np.all(np.linalg.norm(Xhat, axis=1) < delta_c))
        ti = 0
        k = 0
        while not converged and k < cfg.max_steps:
            k += 1
            t_prev = (k - 1) * T_s
            t_now = k * T_s

            u = inputs(t_prev, Xhat)
            ju += float(np.sum(u * u)) * T_s
            rate = xhat @ A.T + np.einsum("inm,im->in", B, u)
            f_running = np.maximum(f_running, np.linalg.norm(rate, axis=1))
            max_rate = max(max_rate, float(np.max(np.linalg.norm(dynamics(t_prev, x), axis=1))))

            x = integrator.integration_step(t_prev, x, T_s)
            if not np.all(np.isfinite(x)):
                logger.error(f"ステップ {k} で状態が発散しました")
                raise SimulationDivergedError(k)

            xhat_norms = np.linalg.norm(Xhat, axis=1)
            if np.all(xhat_norms < delta_c):
                converged = True
                ti = k
                break

            # 全エージェントのトリガ条件を同時に評価
            e_norms = np.linalg.norm(xhat - x, axis=1)
            fired = e_norms >= phi * xhat_norms
            excess = np.where(fired, 0.0, e_norms) - phi * xhat_norms
            worst_excess = max(worst_excess, float(np.max(excess)))

            if np.any(fired):
                agents = np.flatnonzero(fired)
                xhat[agents] = x[agents]
                Xhat = L @ xhat
                new_norms = np.linalg.norm(Xhat, axis=1)
                for i in agents:
                    interevent[i].append(InterEventRecord(
                        t_start=trigger_times[i][-1],
                        t_end=t_now,
                        xhat_norm=float(xhat_norms[i]),
                        xhat_norm_start=float(xhat_at_trigger[i]),
                        f_bar=float(f_running[i]),
                    ))
                    trigger_times[i].append(t_now)
                    xhat_at_trigger[i] = new_norms[i]
                    f_running[i] = 0.0
                counts[agents] += 1

            if k % cfg.decimation == 0:
                times.append(t_now)
                states.append(x.copy())
                sampled_u.append(inputs(t_now, Xhat))

        if not converged:
            ti = k
            logger.warning(f"{cfg.max_steps} ステップ以内に収束しませんでした")
        if times[-1] != ti * T_s:
            times.append(ti * T_s)
            states.append(x.copy())
            sampled_u.append(inputs(ti * T_s, Xhat))

        trajectories = np.array(states)
        envelope = np.column_stack([
            np.array(times),
            np.linalg.norm(np.einsum("jk,skn->sjn", L_hat, trajectories).reshape(len(times), -1), axis=1),
        ])

        AT = float(np.mean(counts))
        ST = (1.0 - AT / ti) * 100.0 if ti > 0 else 0.0
        min_interevent = [
            float(np.min(np.diff(ts))) if len(ts) > 1 else math.inf for ts in trigger_times
        ]

        draft = SimResult(
            TI=ti,
            trigger_counts=counts.tolist(),
            trigger_times=trigger_times,
            AT=AT,
            ST=ST,
            Ju=ju,
            converged=converged,
            times=np.array(times),
            trajectories=trajectories,
            inputs=np.array(sampled_u),
            envelope_trace=envelope,
            min_interevent=min_interevent,
            interevent=interevent,
            zeno_ok=True,
            max_state_rate=max_rate,
            worst_trigger_excess=worst_excess if np.isfinite(worst_excess) else 0.0,
            phi=phi,
            T_s=T_s,
            delta_c=delta_c,
        )
        zeno_ok, violations = EventTriggeredSimulator.check_zeno(draft, plant, gains, phi, cfg)
        result = draft.model_copy(update={"zeno_ok": zeno_ok})

        logger.info(f"シミュレーションが終了: 収束={converged}, TI={ti}, AT={AT:.2f}, "
                    f"ST={ST:.2f}%, J_u={ju:.4f}, Zeno違反={len(violations)}")
        return result

    @staticmethod
    def check_envelope(result: SimResult, zeta: float, c: float,
                       slack: Optional[float] = None) -> Tuple[bool, float]:
        """
        ‖x_r(t)‖ ≤ (1+η)·c·e^{−ζt}‖x_r(0)‖ を全サンプルで確認する

        Returns:
            Tuple[bool, float]: 判定と最悪比 max ‖x_r(t)‖/(c·e^{−ζt}‖x_r(0)‖)
        """
        eta = settings.ENVELOPE_SLACK if slack is None else slack
        rows = result.envelope_rows(zeta, c)
        if not rows:
            raise DomainError("envelope_trace が空です")
        if rows[0][1] == 0.0:
            return True, 0.0
        worst = max(norm / bound if bound > 0.0 else math.inf for _, norm, bound in rows)
        return bool(worst <= 1.0 + eta), float(worst)

    @staticmethod
    def check_zeno(result: SimResult, plant: Plant, gains: List[np.ndarray], phi: float,
                   cfg: SimConfig) -> Tuple[bool, List[Tuple[int, int]]]:
        """
        記録したイベント間隔が Zeno 下界（1ステップ分の離散化余裕を差し引く）を満たすか確認する
        下界には区間開始時の ‖X̂_i(t_k)‖ を使い、それが δ_c 以上の区間だけを対象とする

        Returns:
            Tuple[bool, List[Tuple[int, int]]]: 判定と違反した (エージェント, 区間番号) の一覧
        """
        if result.n_agents < 2:
            raise DomainError("Zeno 判定には2エージェント以上が必要です")
        if len(gains) != result.n_agents:
            raise DimensionError(f"ゲインの数 {len(gains)} がエージェント数 {result.n_agents} と一致しません")
        # F̄ はシミュレーション中に同じゲインで記録済み
        a_norm = MatKit.frobenius_norm(plant.A)
        violations: List[Tuple[int, int]] = []
        if phi == 0.0 or a_norm == 0.0:
            return True, violations

        for i, records in enumerate(result.interevent):
            for k, record in enumerate(records):
                if record.xhat_norm_start < cfg.delta_c:
                    continue
                bound = SynthesisService.zeno_lower_bound(phi, a_norm, record.xhat_norm_start, record.f_bar)
                if record.t_end - record.t_start < bound - cfg.T_s - 1e-12:
                    violations.append((i, k))

        if violations:
            logger.warning(f"Zeno 下界の違反: {len(violations)} 件 (最初: {violations[0]})")
        return not violations, violations

    @staticmethod
    def trigger_soundness(result: SimResult) -> float:
        """
        max(‖e_i‖ − φ‖X̂_i‖) − T_s·max‖ẋ_i‖ を返す（0以下であればトリガ規則が守られている）
        """
        return result.worst_trigger_excess - result.T_s * result.max_state_rate
