from enum import Enum
from typing import Callable, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.config import settings


class IntegratorKind(str, Enum):
    """
    固定ステップ積分法
    """
    EULER = "euler"
    RK4 = "rk4"


class UncertaintyKind(str, Enum):
    """
    制御ゲインの不確かさモデル
    """
    NONE = "none"
    SINUSOID = "sinusoid"
    RANDOM = "random"
    CUSTOM = "custom"


class UncertaintyModel(BaseModel):
    """
    時変ゲイン不確かさ Δ_Ki(t)
    SINUSOID: Δ_Ki(t) = sin(t)·a_i/√(mn)·1_{m×n}（フロベニウスノルム ≤ a_i ≤ δ）
    RANDOM: Δ_Ki(t) = sin(t)·a_i·U_i（U_i は SimConfig.seed から引いたフロベニウスノルム1の m×n 行列）
    CUSTOM: (t, agent) -> m×n 配列 を返す関数
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    kind: UncertaintyKind = UncertaintyKind.NONE
    bound: float = Field(0.0, ge=0, description="不確かさの上界 δ")
    amplitudes: Optional[List[float]] = Field(None, description="エージェントごとの振幅 a_i（省略時は δ）")
    custom: Optional[Callable[[float, int], np.ndarray]] = Field(None, exclude=True)

    @model_validator(mode="after")
    def _check_bound(self) -> "UncertaintyModel":
        if self.amplitudes is not None:
            if any(a < 0.0 or a > self.bound * (1.0 + 1e-12) for a in self.amplitudes):
                raise ValueError(f"振幅は [0, δ={self.bound}] の範囲である必要があります")
        if self.kind is UncertaintyKind.CUSTOM and self.custom is None:
            raise ValueError("CUSTOM には関数 custom が必要です")
        return self


class SimConfig(BaseModel):
    """
    イベントトリガ閉ループのシミュレーション設定
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    T_s: float = Field(default_factory=lambda: settings.SIM_TS, gt=0, description="ステップ幅 [s]")
    delta_c: float = Field(default_factory=lambda: settings.SIM_DELTA_C, gt=0, description="収束判定閾値 δ_c")
    max_steps: int = Field(default_factory=lambda: settings.SIM_MAX_STEPS, ge=1)
    phi: float = Field(..., ge=0, description="使用する送信閾値 φ")
    uncertainty: UncertaintyModel = Field(default_factory=UncertaintyModel)
    integrator: IntegratorKind = IntegratorKind.EULER
    initial_states: List[float] = Field(..., description="積み上げた初期状態 x(0)（長さ N·n）")
    seed: int = Field(0, description="RANDOM 不確かさの方向 U_i を引く乱数シード")
    decimation: int = Field(default_factory=lambda: settings.SIM_DECIMATION, ge=1)


class InterEventRecord(BaseModel):
    """
    あるエージェントの連続する2つのイベント間の記録
    """
    t_start: float
    t_end: float
    xhat_norm: float = Field(..., description="区間を閉じたトリガ判定で比較に使った ‖X̂_i‖")
    xhat_norm_start: float = Field(..., description="区間開始時の ‖X̂_i(t_k)‖")
    f_bar: float = Field(..., description="区間内の ‖A x̂_i + B_i(K_i+Δ_Ki)X̂_i‖ の最大値")


class SimResult(BaseModel):
    """
    シミュレーション結果（返却後は変更しない）
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    TI: int = Field(..., description="収束までの総反復数")
    trigger_counts: List[int]
    trigger_times: List[List[float]]
    AT: float
    ST: float
    Ju: float
    converged: bool
    times: np.ndarray = Field(..., description="間引いたサンプル時刻")
    trajectories: np.ndarray = Field(..., description="サンプル時刻ごとの状態 (S, N, n)")
    inputs: np.ndarray = Field(..., description="サンプル時刻ごとの入力 (S, N, m)")
    envelope_trace: np.ndarray = Field(..., description="(t, ‖x_r(t)‖) の列 (S, 2)")
    min_interevent: List[float]
    interevent: List[List[InterEventRecord]]
    zeno_ok: bool
    max_state_rate: float
    worst_trigger_excess: float = Field(..., description="判定時点の max(‖e_i‖ − φ‖X̂_i‖)")
    phi: float
    T_s: float
    delta_c: float

    @property
    def n_agents(self) -> int:
        return len(self.trigger_counts)

    def final_states(self) -> np.ndarray:
        return self.trajectories[-1]

    def envelope_rows(self, zeta: float, c: float) -> List[Tuple[float, float, float]]:
        """(t, ‖x_r(t)‖, c·e^{−ζt}‖x_r(0)‖) の列"""
        x0 = float(self.envelope_trace[0, 1])
        return [
            (float(t), float(norm), float(c * np.exp(-zeta * t) * x0))
            for t, norm in self.envelope_trace
        ]
