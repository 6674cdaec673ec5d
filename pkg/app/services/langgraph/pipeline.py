import time
from enum import Enum
from typing import List, Literal, Optional, Tuple, TypedDict

import numpy as np
from langgraph.graph import StateGraph, END

from app.core.logging import logger
from app.core.exceptions import ConsensusLabError, NoSpanningTreeError
from app.schemas.experiment import ExperimentConfig, LabResults
from app.schemas.lmi import LmiSolution
from app.schemas.simulation import SimResult
from app.schemas.synthesis import Plant, SynthesisResult
from app.schemas.topology import Digraph, LaplacianBundle
from app.services.etsim import EventTriggeredSimulator
from app.services.lab import LabService
from app.services.report import ReportService
from app.services.synthesis import SynthesisService
from app.services.topology import TopologyService


class PipelineState(TypedDict):
    """
    合成・シミュレーショングラフの状態を表す型定義
    LangGraphの状態管理に使用する
    """
    config: ExperimentConfig
    simulate: bool
    write: bool
    plant: Optional[Plant]
    graph: Optional[Digraph]
    L: Optional[np.ndarray]
    dropped_row: Optional[int]
    L_hat: Optional[np.ndarray]
    alpha: Optional[np.ndarray]
    lift: Optional[np.ndarray]
    bundle: Optional[LaplacianBundle]
    solution: Optional[LmiSolution]
    started: Optional[float]
    synthesis: Optional[SynthesisResult]
    simulation: Optional[SimResult]
    envelope_ratio: Optional[float]
    written: List[str]
    error: Optional[str]
    exception: Optional[ConsensusLabError]
    status: str


class PipelineStatus(str, Enum):
    """
    処理状態を表す列挙型
    グラフの流れ制御に使用する
    """
    INIT = "initialized"
    INPUTS_LOADED = "inputs_loaded"
    ROW_DROPPED = "row_dropped"
    REDUCED = "reduced"
    CORRELATED = "correlated"
    LMI_SOLVED = "lmi_solved"
    SYNTHESIZED = "synthesized"
    SIMULATED = "simulated"
    ERROR = "error"
    COMPLETE = "complete"


class ConsensusPipelineGraph:
    """
    実験設定から縮約・LMI求解・実行可能性判定・シミュレーション・レポート出力までを行うLangGraphプロセス
    """

    def __init__(self):
        self.graph = self._build_graph()
        logger.info("ConsensusPipelineGraphを初期化しました")

    @staticmethod
    def _fail(state: PipelineState, error: ConsensusLabError, step: str) -> PipelineState:
        logger.error(f"{step}中にエラーが発生: {error.message}")
        return {
            **state,
            "error": error.message,
            "exception": error,
            "status": PipelineStatus.ERROR,
        }

    def _load_inputs(self, state: PipelineState) -> PipelineState:
        """
        プラントとグラフを構築し、有向全域木の有無を確認するノード
        """
        try:
            cfg = state["config"]
            logger.info(f"入力の構築を開始: {cfg.name}")
            plant = LabService.build_plant(cfg.plant)
            graph = LabService.build_graph(cfg.graph)
            if not TopologyService.has_spanning_tree(graph):
                raise NoSpanningTreeError()
            return {
                **state,
                "plant": plant,
                "graph": graph,
                "L": TopologyService.build_laplacian(graph),
                "status": PipelineStatus.INPUTS_LOADED,
            }
        except ConsensusLabError as e:
            return self._fail(state, e, "入力の構築")

    def _drop_row(self, state: PipelineState) -> PipelineState:
        """
        除く行を決めて縮約ラプラシアン L̂ を作るノード
        """
        try:
            L = state["L"]
            dropped_row = state["config"].dropped_row
            if dropped_row is None:
                dropped_row = TopologyService.admissible_dropped_rows(L)[-1]
            L_hat = TopologyService.reduced_laplacian(L, dropped_row)
            logger.info(f"行 {dropped_row} を除きました")
            return {
                **state,
                "dropped_row": dropped_row,
                "L_hat": L_hat,
                "status": PipelineStatus.ROW_DROPPED,
            }
        except ConsensusLabError as e:
            return self._fail(state, e, "行の削除")

    def _reduce(self, state: PipelineState) -> PipelineState:
        """
        係数 α と持ち上げ行列 𝕃 を計算するノード
        """
        try:
            L, L_hat, d = state["L"], state["L_hat"], state["dropped_row"]
            alpha = TopologyService.dependency_coefficients(L, L_hat, d)
            lift = TopologyService.lift_matrix(L, L_hat, state["plant"].n)
            return {
                **state,
                "alpha": alpha,
                "lift": lift,
                "status": PipelineStatus.REDUCED,
            }
        except ConsensusLabError as e:
            return self._fail(state, e, "縮約")

    def _correlate(self, state: PipelineState) -> PipelineState:
        """
        相関行列 M を計算してラプラシアン一式をまとめるノード
        """
        try:
            L, d = state["L"], state["dropped_row"]
            M = TopologyService.correlation_matrix(L, state["alpha"], d)
            bundle = LaplacianBundle(
                L=L, L_hat=state["L_hat"], dropped_row=d, alpha=state["alpha"],
                M=M, n=state["plant"].n, lift=state["lift"],
            )
            return {
                **state,
                "bundle": bundle,
                "status": PipelineStatus.CORRELATED,
            }
        except ConsensusLabError as e:
            return self._fail(state, e, "相関行列の計算")

    def _solve_lmis(self, state: PipelineState) -> PipelineState:
        """
        LMI を組み立てて解くノード
        """
        try:
            spec = state["config"].spec
            logger.info(f"合成を開始: ζ={spec.zeta}, δ={spec.delta}, N={state['plant'].n_agents}")
            started = time.perf_counter()
            solution = SynthesisService.solve_lmis(state["plant"], state["bundle"], spec)
            return {
                **state,
                "solution": solution,
                "started": started,
                "status": PipelineStatus.LMI_SOLVED,
            }
        except ConsensusLabError as e:
            return self._fail(state, e, "LMI の求解")

    def _check_feasibility(self, state: PipelineState) -> PipelineState:
        """
        実行可能性を判定し、ゲインと φ を取り出して閉ループ検証するノード
        """
        try:
            synthesis = SynthesisService.from_solution(
                state["plant"], state["bundle"], state["config"].spec, state["solution"],
                started=state["started"], nonbinary_weights=not state["graph"].is_binary,
            )
            return {
                **state,
                "synthesis": synthesis,
                "status": PipelineStatus.SYNTHESIZED,
            }
        except ConsensusLabError as e:
            return self._fail(state, e, "実行可能性の判定")

    def _simulate(self, state: PipelineState) -> PipelineState:
        """
        合成した K_i と φ をエージェントに配って閉ループをシミュレーションするノード
        """
        try:
            cfg = state["config"]
            synthesis = state["synthesis"]
            phi = synthesis.phi if cfg.sim.phi is None else cfg.sim.phi
            if phi > synthesis.phi * (1.0 + 1e-12):
                logger.warning(f"指定された φ={phi} は証明された φ*={synthesis.phi:.6g} を超えています")
            logger.info(f"φ={phi:.6g} とゲインを {state['plant'].n_agents} エージェントに配布します")
            simulation = LabService.simulate(state["plant"], state["bundle"], synthesis, cfg.sim, phi)
            _, ratio = EventTriggeredSimulator.check_envelope(simulation, synthesis.zeta, synthesis.c)
            return {
                **state,
                "simulation": simulation,
                "envelope_ratio": ratio,
                "status": PipelineStatus.SIMULATED,
            }
        except ConsensusLabError as e:
            return self._fail(state, e, "シミュレーション")

    def _finalize(self, state: PipelineState) -> PipelineState:
        """
        必要ならレポートを書き出して処理を終えるノード
        """
        try:
            written: List[str] = []
            if state["write"]:
                results = LabResults(
                    config=state["config"],
                    plant=state["plant"],
                    synthesis=state["synthesis"],
                    simulation=state["simulation"],
                )
                written = [str(p) for p in ReportService.emit_report(results)]
            logger.info(f"パイプラインを完了: {state['config'].name}")
            return {
                **state,
                "written": written,
                "status": PipelineStatus.COMPLETE,
            }
        except ConsensusLabError as e:
            return self._fail(state, e, "レポート出力")

    def _should_continue(self, state: PipelineState) -> Literal["continue", "error"]:
        if state["status"] == PipelineStatus.ERROR:
            return "error"
        return "continue"

    def _after_synthesis(self, state: PipelineState) -> Literal["simulate", "finalize", "error"]:
        if state["status"] == PipelineStatus.ERROR:
            return "error"
        return "simulate" if state["simulate"] else "finalize"

    def _build_graph(self) -> StateGraph:
        """
        LangGraphの処理フローを構築する
        """
        graph = StateGraph(PipelineState)

        graph.add_node("load_inputs", self._load_inputs)
        graph.add_node("drop_row", self._drop_row)
        graph.add_node("reduce", self._reduce)
        graph.add_node("correlate", self._correlate)
        graph.add_node("solve_lmis", self._solve_lmis)
        graph.add_node("check_feasibility", self._check_feasibility)
        graph.add_node("simulate", self._simulate)
        graph.add_node("finalize", self._finalize)

        chain = ["load_inputs", "drop_row", "reduce", "correlate", "solve_lmis", "check_feasibility"]
        for current, following in zip(chain, chain[1:]):
            graph.add_conditional_edges(
                current, self._should_continue, {"continue": following, "error": END}
            )
        graph.add_conditional_edges(
            "check_feasibility",
            self._after_synthesis,
            {"simulate": "simulate", "finalize": "finalize", "error": END},
        )
        graph.add_conditional_edges(
            "simulate", self._should_continue, {"continue": "finalize", "error": END}
        )
        graph.add_edge("finalize", END)

        graph.set_entry_point("load_inputs")
        return graph.compile()

    def run(self, cfg: ExperimentConfig, simulate: bool = True, write: bool = True) -> PipelineState:
        """
        設定からパイプラインを実行し、最終状態を返す

        Raises:
            ConsensusLabError: いずれかのノードで発生したエラー（グラフ終了後に再送出する）
        """
        initial_state: PipelineState = {
            "config": cfg,
            "simulate": simulate,
            "write": write,
            "plant": None,
            "graph": None,
            "L": None,
            "dropped_row": None,
            "L_hat": None,
            "alpha": None,
            "lift": None,
            "bundle": None,
            "solution": None,
            "started": None,
            "synthesis": None,
            "simulation": None,
            "envelope_ratio": None,
            "written": [],
            "error": None,
            "exception": None,
            "status": PipelineStatus.INIT,
        }

        logger.info(f"パイプラインを開始: {cfg.name}")
        result = self.graph.invoke(initial_state)

        if result["status"] == PipelineStatus.ERROR:
            logger.error(f"パイプライン中にエラーが発生: {result.get('error', '不明なエラー')}")
            raise result["exception"]
        return result


def run_pipeline(cfg: ExperimentConfig, write: bool = True) -> Tuple[SynthesisResult, SimResult]:
    """
    縮約・合成・シミュレーションを一括で実行する

    Returns:
        Tuple[SynthesisResult, SimResult]: 合成結果とシミュレーション結果
    """
    state = ConsensusPipelineGraph().run(cfg, simulate=True, write=write)
    return state["synthesis"], state["simulation"]
