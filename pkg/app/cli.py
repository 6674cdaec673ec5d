import argparse
import json
import sys
from typing import Any, Dict, List, Optional

from pydantic import ValidationError

from app.core.logging import logger
from app.core.exceptions import ConfigurationError, ConsensusLabError
from app.schemas.experiment import ExperimentConfig, LabResults, MonteCarloConfig, SweepAxis, SweepConfig
from app.services.lab import LabService
from app.services.langgraph.pipeline import ConsensusPipelineGraph
from app.services.report import ReportService
from app.services.synthesis import SynthesisService


def _load(args: argparse.Namespace) -> ExperimentConfig:
    cfg = LabService.load_config(args.config) if args.config else LabService.example_config()
    if getattr(args, "out", None):
        cfg = cfg.model_copy(update={"output_dir": args.out})
    return cfg


def _print(data: Dict[str, Any]) -> None:
    print(json.dumps(data, ensure_ascii=False, indent=2))


def _cmd_synth(args: argparse.Namespace) -> int:
    cfg = _load(args)
    state = ConsensusPipelineGraph().run(cfg, simulate=False, write=not args.no_write)
    synthesis = state["synthesis"]
    _print({
        "phi": synthesis.phi,
        "phi_lmi": synthesis.phi_lmi,
        "c": synthesis.c,
        "tau3": synthesis.tau[2],
        "gamma": synthesis.gamma,
        "verify_margin": synthesis.verify_margin,
        "files": state["written"],
    })
    return 0


def _cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _load(args)
    state = ConsensusPipelineGraph().run(cfg, simulate=True, write=not args.no_write)
    sim = state["simulation"]
    _print({
        "phi": sim.phi,
        "TI": sim.TI,
        "AT": sim.AT,
        "ST": sim.ST,
        "Ju": sim.Ju,
        "converged": sim.converged,
        "trigger_counts": sim.trigger_counts,
        "zeno_ok": sim.zeno_ok,
        "envelope_ratio": state["envelope_ratio"],
        "files": state["written"],
    })
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _load(args)
    if args.axis:
        grid = args.grid or (cfg.sweep.grid if cfg.sweep else None)
        if not grid:
            raise ConfigurationError("--grid か設定ファイルの sweep.grid が必要です")
        cfg = cfg.model_copy(update={"sweep": SweepConfig(axis=SweepAxis(args.axis), grid=grid)})
    if cfg.sweep is None:
        raise ConfigurationError("--axis か設定ファイルの sweep が必要です")

    results = LabResults(config=cfg)
    if cfg.sweep.axis is SweepAxis.PHI:
        state = ConsensusPipelineGraph().run(cfg, simulate=True, write=False)
        results = LabResults(
            config=cfg, plant=state["plant"], synthesis=state["synthesis"], simulation=state["simulation"],
        )
        table = LabService.run_sweep(cfg, state["synthesis"])
    else:
        table = LabService.run_sweep(cfg)
    results = results.model_copy(update={"tables": [table]})
    files = [] if args.no_write else [str(p) for p in ReportService.emit_report(results)]
    _print({"axis": table.axis.value, "rows": [row.model_dump() for row in table.rows], "files": files})
    return 0


def _cmd_montecarlo(args: argparse.Namespace) -> int:
    cfg = _load(args)
    mc = cfg.monte_carlo or MonteCarloConfig()
    update = {k: v for k, v in (("workers", args.workers), ("trials", args.trials)) if v is not None}
    if update:
        mc = MonteCarloConfig.model_validate({**mc.model_dump(), **update})
    cfg = cfg.model_copy(update={"monte_carlo": mc})

    summary = LabService.monte_carlo(cfg)
    files = [] if args.no_write else [
        str(p) for p in ReportService.emit_report(LabResults(config=cfg, monte_carlo=summary))
    ]
    _print({
        "trends": [t.model_dump() for t in summary.trends],
        "mean_ST_by_size": summary.mean_ST_by_size,
        "clamped_trials": summary.clamped_trials,
        "files": files,
    })
    return 0


def _cmd_verify(args: argparse.Namespace) -> int:
    cfg = _load(args)
    synthesis = ReportService.load_synthesis(args.synthesis)
    report = SynthesisService.check_certificates(synthesis)
    plant, _, bundle = LabService.prepare(cfg)
    spec = cfg.spec.model_copy(update={"zeta": synthesis.zeta, "delta": synthesis.delta})
    closed_loop_ok, margin = SynthesisService.verify_closed_loop(plant, bundle, spec, synthesis)
    ok = report.ok and closed_loop_ok
    _print({
        "ok": ok,
        "checks": {**report.checks, "closed_loop": closed_loop_ok},
        "details": {**report.details, "closed_loop_margin": margin},
    })
    return 0 if ok else 2


def _parse_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="python -m app.cli",
        description="イベントトリガ合意制御のゲイン・閾値同時設計とシミュレーション",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="実験設定 JSON（省略時は6エージェントの例題）")
        p.add_argument("--out", help="出力ディレクトリ（設定の output_dir を上書き）")
        p.add_argument("--no-write", action="store_true", help="ファイルを書き出さない")

    common(sub.add_parser("synth", help="LMI を解いて K_i と φ を設計する"))
    common(sub.add_parser("simulate", help="合成してイベントトリガ閉ループをシミュレーションする"))

    sweep = sub.add_parser("sweep", help="φ, δ, ζ のいずれかを掃引する")
    common(sweep)
    sweep.add_argument("--axis", choices=[a.value for a in SweepAxis])
    sweep.add_argument("--grid", type=float, nargs="+")

    mc = sub.add_parser("montecarlo", help="ランダムなネットワークでモンテカルロ実験を行う")
    common(mc)
    mc.add_argument("--workers", type=int)
    mc.add_argument("--trials", type=int)

    verify = sub.add_parser("verify", help="保存済みの合成結果を再検査する")
    verify.add_argument("--config", help="プラントとグラフを含む実験設定 JSON（省略時は例題）")
    verify.add_argument("--synthesis", required=True, help="synthesis.json のパス")
    return parser.parse_args(argv)


COMMANDS = {
    "synth": _cmd_synth,
    "simulate": _cmd_simulate,
    "sweep": _cmd_sweep,
    "montecarlo": _cmd_montecarlo,
    "verify": _cmd_verify,
}


def main(argv: Optional[List[str]] = None) -> int:
    """
    コマンドラインのエントリポイント
    終了コード: 0 成功, 1 入力・設定エラー, 2 実行不能・検証失敗, 3 シミュレーション発散
    """
    args = _parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ValidationError as e:
        error = ConfigurationError(f"設定の検証に失敗しました: {str(e)}")
        logger.error(error.message)
        return error.exit_code
    except ConsensusLabError as e:
        logger.error(f"{args.command} が失敗しました: {e.message}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
