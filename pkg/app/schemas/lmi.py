from enum import Enum
from typing import List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.config import settings


class BlockSense(str, Enum):
    """
    アフィン行列制約の向き
    """
    NEGATIVE_DEFINITE = "negative_definite"
    POSITIVE_DEFINITE = "positive_definite"

    @property
    def sign(self) -> float:
        return 1.0 if self is BlockSense.POSITIVE_DEFINITE else -1.0


class LmiStatus(str, Enum):
    """
    ソルバーの終了状態
    """
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"
    UNBOUNDED = "unbounded"


class AffineBlock(BaseModel):
    """
    アフィン対称行列制約 F₀ + Σ_j y_j F_j ≺ 0（または ≻ 0）
    F_j は (変数インデックス, 行列) の疎なリストで持つ
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    name: str = Field("block", description="ブロック名（ログ・ダンプ用）")
    sense: BlockSense
    F0: np.ndarray
    terms: List[Tuple[int, np.ndarray]] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_symmetry(self) -> "AffineBlock":
        dim = self.F0.shape[0]
        if self.F0.shape != (dim, dim):
            raise ValueError(f"{self.name}: F0 は正方行列である必要があります")
        for _, mat in [(-1, self.F0), *self.terms]:
            if mat.shape != (dim, dim):
                raise ValueError(f"{self.name}: F_j の次元が F0 と一致しません: {mat.shape}")
            if np.max(np.abs(mat - mat.T), initial=0.0) > 1e-12 * max(1.0, float(np.max(np.abs(mat), initial=0.0))):
                raise ValueError(f"{self.name}: 行列が対称ではありません")
        return self

    @property
    def dim(self) -> int:
        return int(self.F0.shape[0])

    def evaluate(self, y: np.ndarray) -> np.ndarray:
        """F₀ + Σ_j y_j F_j を評価する"""
        value = np.array(self.F0, dtype=float)
        for index, mat in self.terms:
            value += y[index] * mat
        return value


class LmiProblem(BaseModel):
    """
    minimize cᵀy subject to アフィン行列制約ブロック群
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    var_names: List[str]
    objective: np.ndarray
    blocks: List[AffineBlock]

    @field_validator("objective", mode="before")
    @classmethod
    def _coerce_objective(cls, v) -> np.ndarray:
        return np.asarray(v, dtype=float).reshape(-1)

    @model_validator(mode="after")
    def _check_sizes(self) -> "LmiProblem":
        n_vars = len(self.var_names)
        if self.objective.size != n_vars:
            raise ValueError(f"目的関数の長さ {self.objective.size} が変数の数 {n_vars} と一致しません")
        for block in self.blocks:
            for index, _ in block.terms:
                if not 0 <= index < n_vars:
                    raise ValueError(f"{block.name}: 変数インデックス {index} が範囲外です")
        return self

    @property
    def n_vars(self) -> int:
        return len(self.var_names)


class SolverOptions(BaseModel):
    """
    バリア法ソルバーのオプション
    """
    eps_strict: float = Field(default_factory=lambda: settings.LMI_EPS_STRICT, gt=0, description="厳密不等式のマージン")
    tol: float = Field(default_factory=lambda: settings.LMI_TOL, gt=0, description="相対ギャップの許容値")
    max_iter: int = Field(default_factory=lambda: settings.LMI_MAX_ITER, ge=1, description="Phase II のニュートン反復の上限")
    phase1_max_iter: int = Field(default_factory=lambda: settings.LMI_PHASE1_MAX_ITER, ge=1, description="Phase I のニュートン反復の上限")
    barrier_factor: float = Field(default_factory=lambda: settings.LMI_BARRIER_FACTOR, gt=1, description="バリアパラメータの増加率")
    radius: float = Field(default_factory=lambda: settings.LMI_RADIUS, gt=0, description="‖y‖ の上界（目的関数に現れない変数の正則化と非有界性の検出に使う）")


class LmiSolution(BaseModel):
    """
    ソルバーの解
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    y: np.ndarray
    status: LmiStatus
    objective_value: float
    min_margins: List[float] = Field(..., description="各ブロックの定値性境界からの最小固有値距離")
    gap: float = Field(..., description="双対ギャップの代理値（Phase I で終了した場合はスラック）")
    iterations: int = 0
    phase1_iterations: int = 0
