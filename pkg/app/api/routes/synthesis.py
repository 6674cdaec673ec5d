from fastapi import APIRouter, HTTPException

from app.schemas.api import SynthesisRequest, SynthesisResponse, VerifyRequest, VerifyResponse
from app.schemas.experiment import ExperimentConfig
from app.schemas.synthesis import SynthesisSpec
from app.services.lab import LabService
from app.services.langgraph.pipeline import ConsensusPipelineGraph
from app.services.report import ReportService
from app.services.synthesis import SynthesisService
from app.core.logging import logger
from app.core.exceptions import ConsensusLabError


router = APIRouter(prefix="/synthesis", tags=["synthesis"])


@router.post("/", response_model=SynthesisResponse)
def synthesize(request: SynthesisRequest):
    """
    プラントとグラフから K_i と φ を設計するエンドポイント

    Args:
        request (SynthesisRequest): 合成リクエスト

    Returns:
        SynthesisResponse: 合成結果レスポンス
    """
    try:
        state = ConsensusPipelineGraph().run(request.to_config(), simulate=False, write=False)
        synthesis = state["synthesis"]
        data = ReportService.synthesis_to_dict(synthesis)
        return SynthesisResponse(
            success=True,
            message="合成が完了しました",
            phi=synthesis.phi,
            phi_lmi=synthesis.phi_lmi,
            c=synthesis.c,
            K=data["K"],
            verified=synthesis.verified,
            synthesis=data,
        )

    except ConsensusLabError as e:
        logger.error(f"合成中にエラーが発生: {e.message}")
        raise HTTPException(status_code=e.status_code, detail=e.to_dict())

    except Exception as e:
        logger.error(f"予期しないエラーが発生: {str(e)}")
        raise HTTPException(status_code=500, detail=f"サーバーエラー: {str(e)}")


@router.post("/verify", response_model=VerifyResponse)
def verify(request: VerifyRequest):
    """
    保存済みの合成結果を証明書と閉ループ LMI で再検査するエンドポイント
    """
    try:
        synthesis = ReportService.synthesis_from_dict(request.synthesis)
        cfg = ExperimentConfig(
            name="api",
            plant=request.plant,
            graph=request.graph,
            dropped_row=request.dropped_row,
            spec=SynthesisSpec(zeta=synthesis.zeta, delta=synthesis.delta),
        )
        plant, _, bundle = LabService.prepare(cfg)
        report = SynthesisService.check_certificates(synthesis)
        closed_loop_ok, margin = SynthesisService.verify_closed_loop(plant, bundle, cfg.spec, synthesis)
        return VerifyResponse(
            ok=report.ok and closed_loop_ok,
            checks={**report.checks, "closed_loop": closed_loop_ok},
            details={**report.details, "closed_loop_margin": margin},
        )

    except ConsensusLabError as e:
        logger.error(f"再検査中にエラーが発生: {e.message}")
        raise HTTPException(status_code=e.status_code, detail=e.to_dict())

    except Exception as e:
        logger.error(f"予期しないエラーが発生: {str(e)}")
        raise HTTPException(status_code=500, detail=f"サーバーエラー: {str(e)}")
