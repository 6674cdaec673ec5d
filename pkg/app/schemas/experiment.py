from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.config import settings
from app.schemas.simulation import IntegratorKind, SimResult, UncertaintyKind
from app.schemas.synthesis import Plant, SynthesisResult, SynthesisSpec


class SweepAxis(str, Enum):
    """
    掃引するパラメータ
    """
    PHI = "phi"
    DELTA = "delta"
    ZETA = "zeta"


class PlantConfig(BaseModel):
    """
    プラント設定（入力行列 B_i の列挙、または慣性の列挙）
    """
    model_config = ConfigDict(extra="forbid")

    a: List[List[float]] = Field(default_factory=lambda: [[0.0, 1.0], [0.0, 0.0]])
    b: Optional[List[List[List[float]]]] = Field(None, description="エージェントごとの n×m 入力行列")
    inertias: Optional[List[float]] = Field(None, description="二次系 B_i = [0, b_i]ᵀ の b_i")

    @model_validator(mode="after")
    def _exactly_one(self) -> "PlantConfig":
        if (self.b is None) == (self.inertias is None):
            raise ValueError("plant には b と inertias のどちらか一方だけを指定してください")
        if self.inertias is not None and np.shape(self.a) != (2, 2):
            raise ValueError("inertias を使う場合 A は 2×2 である必要があります")
        return self

    def to_plant(self) -> Plant:
        if self.inertias is not None:
            return Plant(A=self.a, B=[[[0.0], [float(b)]] for b in self.inertias])
        return Plant(A=self.a, B=self.b)


class RandomGraphConfig(BaseModel):
    """
    有向全域木を含むランダムグラフの設定
    """
    model_config = ConfigDict(extra="forbid")

    n_agents: int = Field(..., ge=2)
    edge_probability: float = Field(0.25, ge=0, le=1)
    seed: int = 0


class GraphConfig(BaseModel):
    """
    グラフ設定（隣接行列、ファイル、ランダムのいずれか一つ）
    """
    model_config = ConfigDict(extra="forbid")

    adjacency: Optional[List[List[float]]] = None
    file: Optional[str] = None
    random: Optional[RandomGraphConfig] = None

    @model_validator(mode="after")
    def _exactly_one(self) -> "GraphConfig":
        given = [v is not None for v in (self.adjacency, self.file, self.random)]
        if sum(given) != 1:
            raise ValueError("graph には adjacency, file, random のいずれか一つを指定してください")
        if self.file is not None and not Path(self.file).is_file():
            raise ValueError(f"グラフファイルが存在しません: {self.file}")
        return self


class SimSettings(BaseModel):
    """
    実験設定ファイル中のシミュレーション設定
    phi と initial_states は省略時に合成結果と既定の初期状態で補う
    """
    model_config = ConfigDict(extra="forbid")

    T_s: float = Field(default_factory=lambda: settings.SIM_TS, gt=0)
    delta_c: float = Field(default_factory=lambda: settings.SIM_DELTA_C, gt=0)
    max_steps: int = Field(default_factory=lambda: settings.SIM_MAX_STEPS, ge=1)
    phi: Optional[float] = Field(None, ge=0)
    uncertainty: UncertaintyKind = UncertaintyKind.SINUSOID
    amplitudes: Optional[List[float]] = None
    integrator: IntegratorKind = IntegratorKind.EULER
    initial_states: Optional[List[float]] = None
    seed: int = 0
    decimation: int = Field(default_factory=lambda: settings.SIM_DECIMATION, ge=1)


class SweepConfig(BaseModel):
    """
    掃引設定
    """
    model_config = ConfigDict(extra="forbid")

    axis: SweepAxis
    grid: List[float] = Field(..., min_length=1)


class MonteCarloConfig(BaseModel):
    """
    モンテカルロ実験の設定
    """
    model_config = ConfigDict(extra="forbid")

    sizes: List[int] = Field(default_factory=lambda: [8, 12, 16], min_length=1)
    axis: SweepAxis = SweepAxis.ZETA
    grid: List[float] = Field(default_factory=lambda: [0.2, 0.3, 0.4, 0.5], min_length=1)
    zeta: float = Field(0.4, gt=0)
    delta: float = Field(0.01, ge=0)
    trials: int = Field(20, ge=1)
    master_seed: int = 2024
    workers: int = Field(default_factory=lambda: settings.MC_WORKERS, ge=1)
    edge_probability: float = Field(0.25, ge=0, le=1)
    inertia_scale: float = Field(0.1, ge=0)
    inertia_floor: float = Field(0.2, gt=0)

    @model_validator(mode="after")
    def _check_axis(self) -> "MonteCarloConfig":
        if self.axis is SweepAxis.PHI:
            raise ValueError("モンテカルロの掃引軸は zeta または delta です")
        if any(size < 2 for size in self.sizes):
            raise ValueError("ネットワークの大きさは2以上である必要があります")
        return self


class ExperimentConfig(BaseModel):
    """
    実験設定ファイル（JSON）の全体
    """
    model_config = ConfigDict(extra="forbid")

    name: str = "experiment"
    plant: Optional[PlantConfig] = None
    graph: Optional[GraphConfig] = None
    dropped_row: Optional[int] = Field(None, ge=0)
    spec: SynthesisSpec
    sim: SimSettings = Field(default_factory=SimSettings)
    sweep: Optional[SweepConfig] = None
    monte_carlo: Optional[MonteCarloConfig] = None
    output_dir: str = Field(default_factory=lambda: settings.OUTPUT_DIR)


class SweepRow(BaseModel):
    """
    掃引表の1行
    """
    axis_value: float
    phi: Optional[float] = None
    TI: Optional[int] = None
    AT: Optional[float] = None
    ST: Optional[float] = None
    Ju: Optional[float] = None
    feasible: bool = True
    converged: bool = True
    note: str = ""


class SweepTable(BaseModel):
    """
    掃引結果の表（行の順序はグリッドの順序）
    """
    axis: SweepAxis
    rows: List[SweepRow]

    def column(self, name: str) -> List[Optional[float]]:
        return [getattr(row, name) for row in self.rows]


class McCell(BaseModel):
    """
    (N, 掃引値) ごとの集計
    平均は実行可能かつ収束した試行だけで計算し、失敗数は別に数える
    """
    n_agents: int
    axis_value: float
    trials: int
    successes: int
    infeasible: int
    diverged: int
    not_converged: int
    feasibility_rate: float
    mean_TI: Optional[float] = None
    mean_AT: Optional[float] = None
    mean_ST: Optional[float] = None
    mean_Ju: Optional[float] = None
    mean_phi: Optional[float] = None
    mean_at_ti_ratio: Optional[float] = None


class TrendCheck(BaseModel):
    """
    掃引軸に対する平均値の傾向（スピアマン相関）
    """
    n_agents: int
    metric: str
    rho: Optional[float]
    expected_sign: int
    ok: bool


class McSummary(BaseModel):
    """
    モンテカルロ実験の集計
    """
    axis: SweepAxis
    cells: List[McCell]
    trends: List[TrendCheck]
    mean_ST_by_size: Dict[int, Optional[float]]
    clamped_trials: int
    seeds: Dict[str, List[int]] = Field(default_factory=dict, description="(N, 試行) ごとのシードエントロピー")

    @property
    def trends_ok(self) -> bool:
        return all(check.ok for check in self.trends)


class LabResults(BaseModel):
    """
    レポート出力の対象となる実行結果一式
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    config: ExperimentConfig
    plant: Optional[Plant] = None
    synthesis: Optional[SynthesisResult] = None
    simulation: Optional[SimResult] = None
    tables: List[SweepTable] = Field(default_factory=list)
    monte_carlo: Optional[McSummary] = None
