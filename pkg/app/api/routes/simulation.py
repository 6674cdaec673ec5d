from fastapi import APIRouter, HTTPException

from app.schemas.api import SimulationRequest, SimulationResponse
from app.services.langgraph.pipeline import ConsensusPipelineGraph
from app.core.logging import logger
from app.core.exceptions import ConsensusLabError


router = APIRouter(prefix="/simulations", tags=["simulations"])


@router.post("/", response_model=SimulationResponse)
def simulate(request: SimulationRequest):
    """
    合成した K_i と φ でイベントトリガ閉ループをシミュレーションするエンドポイント

    Args:
        request (SimulationRequest): 合成条件とシミュレーション設定

    Returns:
        SimulationResponse: 指標 (TI, AT, ST, J_u) と検査結果
    """
    try:
        state = ConsensusPipelineGraph().run(request.to_config(request.sim), simulate=True, write=False)
        sim = state["simulation"]
        return SimulationResponse(
            success=True,
            message="シミュレーションが完了しました",
            phi=sim.phi,
            TI=sim.TI,
            AT=sim.AT,
            ST=sim.ST,
            Ju=sim.Ju,
            converged=sim.converged,
            trigger_counts=sim.trigger_counts,
            zeno_ok=sim.zeno_ok,
            envelope_ratio=state["envelope_ratio"],
        )

    except ConsensusLabError as e:
        logger.error(f"シミュレーション中にエラーが発生: {e.message}")
        raise HTTPException(status_code=e.status_code, detail=e.to_dict())

    except Exception as e:
        logger.error(f"予期しないエラーが発生: {str(e)}")
        raise HTTPException(status_code=500, detail=f"サーバーエラー: {str(e)}")
