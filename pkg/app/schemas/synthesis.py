from enum import Enum
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.config import settings
from app.schemas.lmi import LmiStatus
from app.services.matkit import MatKit


class Plant(BaseModel):
    """
    異種線形マルチエージェント系のプラント
    全エージェント共通の状態行列 A と、エージェントごとの入力行列 B_i を持つ
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    A: np.ndarray = Field(..., description="n×n 状態行列")
    B: List[np.ndarray] = Field(..., description="エージェントごとの n×m 入力行列")

    @field_validator("A", mode="before")
    @classmethod
    def _coerce_a(cls, v: Any) -> np.ndarray:
        return MatKit.as_mat(v, "A")

    @field_validator("B", mode="before")
    @classmethod
    def _coerce_b(cls, v: Any) -> List[np.ndarray]:
        mats = []
        for i, b in enumerate(v):
            b = np.asarray(b, dtype=float)
            if b.ndim == 1:
                b = b.reshape(-1, 1)
            mats.append(MatKit.as_mat(b, f"B_{i + 1}"))
        return mats

    @model_validator(mode="after")
    def _check_plant(self) -> "Plant":
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError(f"A は正方行列である必要があります: shape={self.A.shape}")
        if not self.B:
            raise ValueError("B_i が1つもありません")
        m = self.B[0].shape[1]
        for i, b in enumerate(self.B):
            if b.shape != (n, m):
                raise ValueError(f"B_{i + 1} の形状 {b.shape} が ({n}, {m}) と一致しません")
            ctrb = np.hstack([np.linalg.matrix_power(self.A, k) @ b for k in range(n)])
            if MatKit.rank(ctrb) != n:
                raise ValueError(f"(A, B_{i + 1}) が可制御ではありません")
        return self

    @property
    def n(self) -> int:
        return int(self.A.shape[0])

    @property
    def m(self) -> int:
        return int(self.B[0].shape[1])

    @property
    def n_agents(self) -> int:
        return len(self.B)

    @classmethod
    def second_order(cls, b_values: Sequence[float]) -> "Plant":
        """
        A = [[0, 1], [0, 0]], B_i = [0, b_i]ᵀ の二次系プラントを作る
        """
        return cls(
            A=[[0.0, 1.0], [0.0, 0.0]],
            B=[np.array([[0.0], [float(b)]]) for b in b_values],
        )


class SynthesisSpec(BaseModel):
    """
    合成条件（減衰係数 ζ、不確かさの上界 δ、厳密不等式のマージン）
    """
    zeta: float = Field(..., gt=0, description="減衰係数 ζ [1/s]")
    delta: float = Field(..., ge=0, description="ゲイン不確かさの上界 δ")
    eps_strict: float = Field(default_factory=lambda: settings.LMI_EPS_STRICT, gt=0, description="ソルバーのマージン")


class GainOrigin(str, Enum):
    """
    ゲインと証明書の出どころ
    EXTRACTED: 同時設計 LMI の解から K_i = B_i⁺𝒫⁻¹Θ_i で取り出した
    REFIT: 取り出したゲインを固定して証明書を解き直した
    REDESIGNED: 𝒫⁻¹ による合同変換 LMI でゲインを設計し直し、固定して証明書を解いた
    """
    EXTRACTED = "extracted"
    REFIT = "refit"
    REDESIGNED = "redesigned"


class SynthesisResult(BaseModel):
    """
    LMI の解から得たリャプノフ行列・ゲイン・送信閾値と検証結果
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    zeta: float
    delta: float
    P_script: np.ndarray = Field(..., description="𝒫（n×n 対称正定値）")
    Theta: List[np.ndarray] = Field(..., description="Θ_i（n×n）")
    tau: Tuple[float, float, float]
    gamma: float
    mu: float
    upsilon: List[float]
    phi: float = Field(..., description="使用する送信閾値 φ（検証で縮小した場合は縮小後の値）")
    phi_lmi: float = Field(..., description="√(τ₃/γ)")
    K: List[np.ndarray] = Field(..., description="K_i = B_i⁺ 𝒫⁻¹ Θ_i（m×n）")
    c: float = Field(..., description="包絡線定数 √(λmax(𝒫)/λmin(𝒫))")
    recon_residual: List[float]
    verified: bool
    verify_margin: float = float("nan")
    solver_status: LmiStatus = LmiStatus.OPTIMAL
    objective_value: float = float("nan")
    min_margins: List[float] = Field(default_factory=list)
    gain_origin: GainOrigin = GainOrigin.EXTRACTED
    nonbinary_weights: bool = False

    @property
    def n_agents(self) -> int:
        return len(self.K)


class CertificateReport(BaseModel):
    """
    保存済み合成結果の証明書を独立に再検査した結果
    """
    ok: bool
    checks: Dict[str, bool]
    details: Dict[str, float] = Field(default_factory=dict)
