import math
from concurrent.futures import ProcessPoolExecutor
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ValidationError
from scipy.stats import spearmanr

from app.core.logging import logger
from app.core.exceptions import (
    ConfigurationError,
    DomainError,
    InfeasibleSynthesisError,
    NoSpanningTreeError,
    SimulationDivergedError,
    SynthesisVerificationError,
)
from app.schemas.experiment import (
    ExperimentConfig,
    GraphConfig,
    McCell,
    McSummary,
    MonteCarloConfig,
    PlantConfig,
    SimSettings,
    SweepAxis,
    SweepRow,
    SweepTable,
    TrendCheck,
)
from app.schemas.simulation import SimConfig, SimResult, UncertaintyKind, UncertaintyModel
from app.schemas.synthesis import Plant, SynthesisResult, SynthesisSpec
from app.schemas.topology import Digraph, LaplacianBundle
from app.services.etsim import EventTriggeredSimulator
from app.services.synthesis import SynthesisService
from app.services.topology import TopologyService


EXAMPLE_B_VALUES = [0.9, 1.0, 1.1, 1.2, 1.3, 1.4]
EXAMPLE_LAPLACIAN = [
    [3, 0, 0, -1, -1, -1],
    [0, 2, 0, 0, -1, -1],
    [0, 0, 2, -1, 0, -1],
    [0, -1, 0, 2, 0, -1],
    [-1, -1, 0, -1, 3, 0],
    [-1, -1, -1, 0, 0, 3],
]
TREND_MIN_RHO = 0.8


class TrialOutcome(BaseModel):
    """
    モンテカルロ1試行・1掃引値の結果
    """
    status: str
    clamped: bool = False
    TI: Optional[int] = None
    AT: Optional[float] = None
    ST: Optional[float] = None
    Ju: Optional[float] = None
    phi: Optional[float] = None


class LabService:
    """
    実験ランナー
    設定からのプラント・グラフ構築、φ/δ/ζ 掃引、モンテカルロ実験を担当する
    """

    @staticmethod
    def example_config(output_dir: Optional[str] = None) -> ExperimentConfig:
        """
        6エージェント二次系の決定論的な例題設定を返す
        """
        adjacency = (np.diag(np.diag(EXAMPLE_LAPLACIAN)) - np.array(EXAMPLE_LAPLACIAN, dtype=float)).tolist()
        data = {
            "name": "six_agent_example",
            "plant": {"inertias": EXAMPLE_B_VALUES},
            "graph": {"adjacency": adjacency},
            "spec": {"zeta": 0.4, "delta": 0.02},
            "sim": {"uncertainty": UncertaintyKind.SINUSOID.value},
        }
        if output_dir is not None:
            data["output_dir"] = output_dir
        return ExperimentConfig.model_validate(data)

    @staticmethod
    def load_config(path: str) -> ExperimentConfig:
        """
        JSON の実験設定ファイルを読み込む

        Raises:
            ConfigurationError: ファイルが読めない、または検証に失敗した場合
        """
        try:
            with open(path, "r", encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise ConfigurationError(f"設定ファイルを読めません: {path}: {str(e)}")
        try:
            cfg = ExperimentConfig.model_validate_json(text)
        except ValidationError as e:
            logger.error(f"設定ファイルの検証に失敗: {path}")
            raise ConfigurationError(f"設定ファイルが不正です ({path}): {str(e)}")
        logger.info(f"設定ファイルを読み込みました: {path} ({cfg.name})")
        return cfg

    @staticmethod
    def build_plant(plant_cfg: Optional[PlantConfig]) -> Plant:
        if plant_cfg is None:
            raise ConfigurationError("plant が指定されていません")
        try:
            return plant_cfg.to_plant()
        except ValidationError as e:
            raise ConfigurationError(f"プラント設定が不正です: {str(e)}")

    @staticmethod
    def build_graph(graph_cfg: Optional[GraphConfig]) -> Digraph:
        if graph_cfg is None:
            raise ConfigurationError("graph が指定されていません")
        if graph_cfg.file is not None:
            return TopologyService.load_graph(graph_cfg.file)
        if graph_cfg.random is not None:
            rng = np.random.default_rng(graph_cfg.random.seed)
            return TopologyService.random_rooted_digraph(
                graph_cfg.random.n_agents, graph_cfg.random.edge_probability, rng
            )
        try:
            return Digraph(weights=graph_cfg.adjacency)
        except ValidationError as e:
            raise ConfigurationError(f"隣接行列が不正です: {str(e)}")

    @staticmethod
    def default_initial_states(n_agents: int, n: int) -> List[float]:
        """
        x_i(0) = [i+5, i−2]（i は1始まり）を並べる。二次系以外では明示指定が必要
        """
        if n != 2:
            raise ConfigurationError(f"n={n} のプラントでは sim.initial_states の指定が必要です")
        return [float(v) for i in range(1, n_agents + 1) for v in (i + 5, i - 2)]

    @staticmethod
    def inertia_plant(n_agents: int, rng: np.random.Generator, scale: float = 0.1,
                      floor: float = 0.2) -> Tuple[Plant, List[bool]]:
        """
        慣性 m_i = 1 + scale·𝒳_i（𝒳_i は標準正規）を下限 floor でクリップし、b_i = m_i の二次系を作る

        Returns:
            Tuple[Plant, List[bool]]: プラントと、クリップしたエージェントのフラグ
        """
        inertias = 1.0 + scale * rng.standard_normal(n_agents)
        clamped = (inertias < floor).tolist()
        return Plant.second_order(np.maximum(inertias, floor)), clamped

    @staticmethod
    def sim_config(settings_: SimSettings, plant: Plant, phi: float, delta: float) -> SimConfig:
        """
        実験設定のシミュレーション項目から SimConfig を作る
        """
        initial = settings_.initial_states or LabService.default_initial_states(plant.n_agents, plant.n)
        return SimConfig(
            T_s=settings_.T_s,
            delta_c=settings_.delta_c,
            max_steps=settings_.max_steps,
            phi=phi,
            uncertainty=UncertaintyModel(kind=settings_.uncertainty, bound=delta, amplitudes=settings_.amplitudes),
            integrator=settings_.integrator,
            initial_states=initial,
            seed=settings_.seed,
            decimation=settings_.decimation,
        )

    @staticmethod
    def prepare(cfg: ExperimentConfig) -> Tuple[Plant, Digraph, LaplacianBundle]:
        """
        設定からプラント・グラフ・ラプラシアン一式を作る
        """
        plant = LabService.build_plant(cfg.plant)
        graph = LabService.build_graph(cfg.graph)
        if not TopologyService.has_spanning_tree(graph):
            raise NoSpanningTreeError()
        L = TopologyService.build_laplacian(graph)
        bundle = TopologyService.reduce(L, cfg.dropped_row, plant.n)
        return plant, graph, bundle

    @staticmethod
    def simulate(plant: Plant, bundle: LaplacianBundle, synthesis: SynthesisResult,
                 settings_: SimSettings, phi: Optional[float] = None) -> SimResult:
        phi = synthesis.phi if phi is None else phi
        cfg = LabService.sim_config(settings_, plant, phi, synthesis.delta)
        return EventTriggeredSimulator.run(plant, bundle, synthesis.K, cfg)

    @staticmethod
    def _row(axis_value: float, sim: SimResult, phi: float) -> SweepRow:
        return SweepRow(
            axis_value=axis_value, phi=phi, TI=sim.TI, AT=sim.AT, ST=sim.ST, Ju=sim.Ju,
            converged=sim.converged,
        )

    @staticmethod
    def sweep_phi(cfg: ExperimentConfig, grid: List[float],
                  synthesis: Optional[SynthesisResult] = None) -> SweepTable:
        """
        ゲインを固定したまま φ を変えてシミュレーションを繰り返す

        Args:
            cfg (ExperimentConfig): 実験設定
            grid (List[float]): φ の値（すべて合成した φ* 以下）
            synthesis (Optional[SynthesisResult], optional): 合成結果。省略時は合成する

        Returns:
            SweepTable: 行 (φ, TI, AT, ST, J_u)

        Raises:
            DomainError: φ* を超える値がある場合
        """
        if not grid:
            raise ConfigurationError("掃引グリッドが空です")
        plant, graph, bundle = LabService.prepare(cfg)
        if synthesis is None:
            synthesis = SynthesisService.synthesize(plant, bundle, cfg.spec, nonbinary_weights=not graph.is_binary)
        too_large = [phi for phi in grid if phi < 0.0 or phi > synthesis.phi * (1.0 + 1e-12)]
        if too_large:
            raise DomainError(f"φ の値 {too_large} は証明された範囲 [0, {synthesis.phi:.6g}] の外です")

        rows = []
        for phi in grid:
            logger.info(f"φ 掃引: φ={phi}")
            try:
                sim = LabService.simulate(plant, bundle, synthesis, cfg.sim, phi)
                rows.append(LabService._row(phi, sim, phi))
            except SimulationDivergedError as e:
                rows.append(SweepRow(axis_value=phi, phi=phi, converged=False, note=e.message))
        return SweepTable(axis=SweepAxis.PHI, rows=rows)

    @staticmethod
    def _resynthesis_sweep(cfg: ExperimentConfig, grid: List[float], axis: SweepAxis) -> SweepTable:
        if not grid:
            raise ConfigurationError("掃引グリッドが空です")
        plant, graph, bundle = LabService.prepare(cfg)
        rows = []
        for value in grid:
            update = {"delta": value} if axis is SweepAxis.DELTA else {"zeta": value}
            spec = cfg.spec.model_copy(update=update)
            logger.info(f"{axis.value} 掃引: ζ={spec.zeta}, δ={spec.delta}")
            try:
                synthesis = SynthesisService.synthesize(plant, bundle, spec, nonbinary_weights=not graph.is_binary)
            except (InfeasibleSynthesisError, SynthesisVerificationError) as e:
                rows.append(SweepRow(axis_value=value, feasible=False, converged=False, note=e.message))
                continue
            try:
                sim = LabService.simulate(plant, bundle, synthesis, cfg.sim)
                rows.append(LabService._row(value, sim, synthesis.phi))
            except SimulationDivergedError as e:
                rows.append(SweepRow(axis_value=value, phi=synthesis.phi, converged=False, note=e.message))
        return SweepTable(axis=axis, rows=rows)

    @staticmethod
    def sweep_delta(cfg: ExperimentConfig, grid: List[float]) -> SweepTable:
        """
        ζ を固定して δ ごとに再合成・シミュレーションを行う（行 (δ, φ, TI, AT, ST, J_u)、実行不能は行として記録）
        """
        return LabService._resynthesis_sweep(cfg, grid, SweepAxis.DELTA)

    @staticmethod
    def sweep_zeta(cfg: ExperimentConfig, grid: List[float]) -> SweepTable:
        """
        δ を固定して ζ ごとに再合成・シミュレーションを行う（行 (ζ, φ, TI, AT, ST, J_u)）
        """
        return LabService._resynthesis_sweep(cfg, grid, SweepAxis.ZETA)

    @staticmethod
    def run_sweep(cfg: ExperimentConfig, synthesis: Optional[SynthesisResult] = None) -> SweepTable:
        if cfg.sweep is None:
            raise ConfigurationError("sweep が指定されていません")
        if cfg.sweep.axis is SweepAxis.PHI:
            return LabService.sweep_phi(cfg, cfg.sweep.grid, synthesis)
        if cfg.sweep.axis is SweepAxis.DELTA:
            return LabService.sweep_delta(cfg, cfg.sweep.grid)
        return LabService.sweep_zeta(cfg, cfg.sweep.grid)

    @staticmethod
    def trial_seed(master_seed: int, n_agents: int, trial: int) -> np.random.SeedSequence:
        """(N, 試行番号) ごとにマスターシードから独立なシード列を作る"""
        return np.random.SeedSequence([master_seed, n_agents, trial])

    @staticmethod
    def monte_carlo(cfg: ExperimentConfig) -> McSummary:
        """
        ランダムなネットワークと慣性でモンテカルロ実験を行い、(N, 掃引値) ごとに集計する
        試行は並列・逐次のどちらでも試行番号順に集約するため同じ集計になる

        Returns:
            McSummary: 集計結果と傾向の検定
        """
        mc = cfg.monte_carlo
        if mc is None:
            raise ConfigurationError("monte_carlo が指定されていません")

        tasks = [
            (n_agents, trial, mc, cfg.sim)
            for n_agents in mc.sizes
            for trial in range(mc.trials)
        ]
        logger.info(f"モンテカルロ実験を開始: 大きさ={mc.sizes}, 試行={mc.trials}, 軸={mc.axis.value}, "
                    f"グリッド={mc.grid}, ワーカー={mc.workers}")

        if mc.workers > 1:
            with ProcessPoolExecutor(max_workers=mc.workers) as executor:
                outcomes = list(executor.map(_monte_carlo_trial, tasks))
        else:
            outcomes = [_monte_carlo_trial(task) for task in tasks]

        seeds = {
            f"{n_agents}:{trial}": [int(v) for v in LabService.trial_seed(mc.master_seed, n_agents, trial).entropy]
            for n_agents, trial, _, _ in tasks
        }
        return LabService.summarize(mc, tasks, outcomes, seeds)

    @staticmethod
    def summarize(mc: MonteCarloConfig, tasks, outcomes: List[List[TrialOutcome]],
                  seeds: Dict[str, List[int]]) -> McSummary:
        """
        試行結果を試行番号順に集約する
        """
        cells: List[McCell] = []
        trends: List[TrendCheck] = []
        mean_st_by_size: Dict[int, Optional[float]] = {}
        clamped_trials = 0

        by_size: Dict[int, List[List[TrialOutcome]]] = {size: [] for size in mc.sizes}
        for (n_agents, _, _, _), trial_outcomes in zip(tasks, outcomes):
            by_size[n_agents].append(trial_outcomes)
            clamped_trials += int(any(o.clamped for o in trial_outcomes))

        def mean(values: List[float]) -> Optional[float]:
            return float(np.mean(values)) if values else None

        for size in mc.sizes:
            size_st: List[float] = []
            for g, value in enumerate(mc.grid):
                column = [trial[g] for trial in by_size[size]]
                ok = [o for o in column if o.status == "ok"]
                size_st.extend(o.ST for o in ok)
                cells.append(McCell(
                    n_agents=size,
                    axis_value=value,
                    trials=len(column),
                    successes=len(ok),
                    infeasible=sum(o.status == "infeasible" for o in column),
                    diverged=sum(o.status == "diverged" for o in column),
                    not_converged=sum(o.status == "not_converged" for o in column),
                    feasibility_rate=sum(o.status != "infeasible" for o in column) / len(column),
                    mean_TI=mean([o.TI for o in ok]),
                    mean_AT=mean([o.AT for o in ok]),
                    mean_ST=mean([o.ST for o in ok]),
                    mean_Ju=mean([o.Ju for o in ok]),
                    mean_phi=mean([o.phi for o in ok]),
                    mean_at_ti_ratio=mean([o.AT / o.TI for o in ok if o.TI]),
                ))
            mean_st_by_size[size] = mean(size_st)

            size_cells = [cell for cell in cells if cell.n_agents == size]
            metric, expected = ("mean_TI", -1) if mc.axis is SweepAxis.ZETA else ("mean_Ju", 1)
            trends.append(LabService.trend(size, size_cells, metric, expected))

        summary = McSummary(
            axis=mc.axis,
            cells=cells,
            trends=trends,
            mean_ST_by_size=mean_st_by_size,
            clamped_trials=clamped_trials,
            seeds=seeds,
        )
        logger.info(f"モンテカルロ実験が終了: 傾向={[(t.n_agents, t.rho) for t in trends]}, "
                    f"クリップ試行={clamped_trials}")
        return summary

    @staticmethod
    def trend(n_agents: int, cells: List[McCell], metric: str, expected_sign: int) -> TrendCheck:
        """
        掃引値と平均値のスピアマン相関で傾向を判定する（|ρ| ≥ 0.8 かつ期待どおりの符号）
        """
        pairs = [(cell.axis_value, getattr(cell, metric)) for cell in cells if getattr(cell, metric) is not None]
        rho: Optional[float] = None
        if len(pairs) >= 2 and len({v for _, v in pairs}) > 1:
            rho = float(spearmanr([p[0] for p in pairs], [p[1] for p in pairs])[0])
            if math.isnan(rho):
                rho = None
        ok = rho is not None and rho * expected_sign >= TREND_MIN_RHO
        return TrendCheck(n_agents=n_agents, metric=metric, rho=rho, expected_sign=expected_sign, ok=ok)


def _monte_carlo_trial(task) -> List[TrialOutcome]:
    """
    モンテカルロの1試行（グラフと慣性を1回サンプルし、掃引値ごとに合成・シミュレーション）
    プロセスプールから呼べるようモジュールレベルに置く
    """
    n_agents, trial, mc, sim_settings = task
    rng = np.random.default_rng(LabService.trial_seed(mc.master_seed, n_agents, trial))
    graph = TopologyService.random_rooted_digraph(n_agents, mc.edge_probability, rng)
    plant, clamped_flags = LabService.inertia_plant(n_agents, rng, mc.inertia_scale, mc.inertia_floor)
    clamped = any(clamped_flags)
    L = TopologyService.build_laplacian(graph)
    bundle = TopologyService.reduce(L, None, plant.n)

    outcomes = []
    for value in mc.grid:
        zeta = value if mc.axis is SweepAxis.ZETA else mc.zeta
        delta = value if mc.axis is SweepAxis.DELTA else mc.delta
        spec = SynthesisSpec(zeta=zeta, delta=delta)
        try:
            synthesis = SynthesisService.synthesize(plant, bundle, spec)
        except (InfeasibleSynthesisError, SynthesisVerificationError):
            outcomes.append(TrialOutcome(status="infeasible", clamped=clamped))
            continue
        try:
            sim = LabService.simulate(plant, bundle, synthesis, sim_settings)
        except SimulationDivergedError:
            outcomes.append(TrialOutcome(status="diverged", clamped=clamped, phi=synthesis.phi))
            continue
        outcomes.append(TrialOutcome(
            status="ok" if sim.converged else "not_converged",
            clamped=clamped,
            TI=sim.TI, AT=sim.AT, ST=sim.ST, Ju=sim.Ju, phi=synthesis.phi,
        ))
    logger.debug(f"試行 N={n_agents}, #{trial} が終了: {[o.status for o in outcomes]}")
    return outcomes
