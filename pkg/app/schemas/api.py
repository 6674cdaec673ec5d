from typing import Any, Dict, List, Optional

from pydantic import BaseModel, Field

from app.schemas.experiment import ExperimentConfig, GraphConfig, PlantConfig, SimSettings
from app.schemas.synthesis import SynthesisSpec


class SynthesisRequest(BaseModel):
    """
    ゲイン・閾値同時設計のリクエスト
    """
    plant: PlantConfig
    graph: GraphConfig
    dropped_row: Optional[int] = Field(None, ge=0)
    zeta: float = Field(..., gt=0, description="減衰係数 ζ")
    delta: float = Field(..., ge=0, description="ゲイン不確かさの上界 δ")

    def to_config(self, sim: Optional[SimSettings] = None) -> ExperimentConfig:
        return ExperimentConfig(
            name="api",
            plant=self.plant,
            graph=self.graph,
            dropped_row=self.dropped_row,
            spec=SynthesisSpec(zeta=self.zeta, delta=self.delta),
            sim=sim or SimSettings(),
        )


class SynthesisResponse(BaseModel):
    """
    合成結果のレスポンス
    synthesis には /synthesis/verify にそのまま渡せる全項目が入る
    """
    success: bool
    message: str
    phi: float
    phi_lmi: float
    c: float
    K: List[List[List[Optional[float]]]]
    verified: bool
    synthesis: Dict[str, Any]


class VerifyRequest(BaseModel):
    """
    保存済み合成結果の再検査リクエスト
    """
    plant: PlantConfig
    graph: GraphConfig
    dropped_row: Optional[int] = Field(None, ge=0)
    synthesis: Dict[str, Any]


class VerifyResponse(BaseModel):
    """
    再検査結果のレスポンス
    """
    ok: bool
    checks: Dict[str, bool]
    details: Dict[str, float]


class SimulationRequest(SynthesisRequest):
    """
    合成とシミュレーションのリクエスト
    """
    sim: SimSettings = Field(default_factory=SimSettings)


class SimulationResponse(BaseModel):
    """
    シミュレーション結果のレスポンス
    """
    success: bool
    message: str
    phi: float
    TI: int
    AT: float
    ST: float
    Ju: float
    converged: bool
    trigger_counts: List[int]
    zeno_ok: bool
    envelope_ratio: Optional[float] = None
