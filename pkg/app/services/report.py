import csv
import hashlib
import json
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from app.config import settings
from app.core.logging import logger
from app.core.exceptions import ConfigurationError, ReportIOError
from app.schemas.experiment import LabResults, McSummary, SweepAxis, SweepTable
from app.schemas.lmi import LmiStatus
from app.schemas.simulation import SimResult
from app.schemas.synthesis import GainOrigin, SynthesisResult


SIGNIFICANT_DIGITS = 12

TABLE_FILES = {
    SweepAxis.PHI: ("table1.csv", ["phi", "TI", "AT", "ST", "Ju"]),
    SweepAxis.DELTA: ("table2.csv", ["delta", "phi", "TI", "AT", "ST", "Ju"]),
    SweepAxis.ZETA: ("table3.csv", ["zeta", "phi", "TI", "AT", "ST", "Ju"]),
}


def _round(value: Optional[float]) -> Optional[float]:
    if value is None:
        return None
    value = float(value)
    if not math.isfinite(value):
        return None
    return float(f"{value:.{SIGNIFICANT_DIGITS}g}")


def _matrix(mat: np.ndarray) -> List[List[Optional[float]]]:
    return [[_round(v) for v in row] for row in np.asarray(mat, dtype=float)]


class ReportService:
    """
    実行結果をファイルに出力するサービスクラス
    合成結果・指標の JSON、軌跡とトリガ時刻の CSV、掃引表、マニフェストを書き出す
    """

    @staticmethod
    def synthesis_to_dict(result: SynthesisResult) -> Dict[str, Any]:
        """
        合成結果を有効数字12桁の JSON 互換辞書に変換する
        """
        return {
            "zeta": _round(result.zeta),
            "delta": _round(result.delta),
            "P_script": _matrix(result.P_script),
            "Theta": [_matrix(th) for th in result.Theta],
            "tau": [_round(t) for t in result.tau],
            "gamma": _round(result.gamma),
            "mu": _round(result.mu),
            "upsilon": [_round(u) for u in result.upsilon],
            "phi": _round(result.phi),
            "phi_lmi": _round(result.phi_lmi),
            "K": [_matrix(k) for k in result.K],
            "c": _round(result.c),
            "recon_residual": [_round(r) for r in result.recon_residual],
            "verified": result.verified,
            "verify_margin": _round(result.verify_margin),
            "solver_status": result.solver_status.value,
            "objective_value": _round(result.objective_value),
            "min_margins": [_round(v) for v in result.min_margins],
            "gain_origin": result.gain_origin.value,
            "nonbinary_weights": result.nonbinary_weights,
        }

    @staticmethod
    def synthesis_from_dict(data: Dict[str, Any]) -> SynthesisResult:
        """
        synthesis_to_dict の出力から合成結果を復元する

        Raises:
            ConfigurationError: 必須項目が欠けている場合
        """
        def number(key: str) -> float:
            value = data.get(key)
            return float("nan") if value is None else float(value)

        try:
            return SynthesisResult(
                zeta=data["zeta"],
                delta=data["delta"],
                P_script=np.array(data["P_script"], dtype=float),
                Theta=[np.array(th, dtype=float) for th in data["Theta"]],
                tau=tuple(data["tau"]),
                gamma=data["gamma"],
                mu=data["mu"],
                upsilon=data["upsilon"],
                phi=data["phi"],
                phi_lmi=data["phi_lmi"],
                K=[np.array(k, dtype=float) for k in data["K"]],
                c=data["c"],
                recon_residual=data.get("recon_residual", []),
                verified=data.get("verified", False),
                verify_margin=number("verify_margin"),
                solver_status=LmiStatus(data.get("solver_status", LmiStatus.OPTIMAL.value)),
                objective_value=number("objective_value"),
                min_margins=[v for v in data.get("min_margins", []) if v is not None],
                gain_origin=GainOrigin(data.get("gain_origin", GainOrigin.EXTRACTED.value)),
                nonbinary_weights=data.get("nonbinary_weights", False),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigurationError(f"合成結果の形式が不正です: {str(e)}")

    @staticmethod
    def load_synthesis(path: str) -> SynthesisResult:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"合成結果ファイルを読めません: {path}: {str(e)}")
        return ReportService.synthesis_from_dict(data)

    @staticmethod
    def metrics_to_dict(sim: SimResult) -> Dict[str, Any]:
        return {
            "TI": sim.TI,
            "AT": _round(sim.AT),
            "ST": _round(sim.ST),
            "Ju": _round(sim.Ju),
            "converged": sim.converged,
            "phi": _round(sim.phi),
            "T_s": sim.T_s,
            "delta_c": sim.delta_c,
            "trigger_counts": sim.trigger_counts,
            "min_interevent": [_round(v) for v in sim.min_interevent],
            "zeno_ok": sim.zeno_ok,
            "worst_trigger_excess": _round(sim.worst_trigger_excess),
            "max_state_rate": _round(sim.max_state_rate),
        }

    @staticmethod
    def config_digest(results: LabResults) -> str:
        """設定の正規化 JSON の SHA-256"""
        canonical = json.dumps(results.config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @staticmethod
    def _write_json(path: Path, data: Any) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, ensure_ascii=False, indent=2)

    @staticmethod
    def _write_csv(path: Path, header: List[str], rows: List[List[Any]]) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            writer.writerows(rows)

    @staticmethod
    def _trajectory_rows(sim: SimResult) -> List[List[Any]]:
        rows = []
        for s, t in enumerate(sim.times):
            for i in range(sim.n_agents):
                rows.append(
                    [_round(t), i + 1]
                    + [_round(v) for v in sim.trajectories[s, i]]
                    + [_round(v) for v in sim.inputs[s, i]]
                )
        return rows

    @staticmethod
    def _table_rows(table: SweepTable) -> List[List[Any]]:
        rows = []
        for row in table.rows:
            metrics = [row.TI, _round(row.AT), _round(row.ST), _round(row.Ju)]
            if table.axis is SweepAxis.PHI:
                rows.append([_round(row.axis_value)] + metrics)
            else:
                rows.append([_round(row.axis_value), _round(row.phi)] + metrics)
        return rows

    @staticmethod
    def _monte_carlo_rows(summary: McSummary) -> List[List[Any]]:
        return [
            [
                cell.n_agents, _round(cell.axis_value), cell.trials, cell.successes,
                cell.infeasible, cell.diverged, cell.not_converged, _round(cell.feasibility_rate),
                _round(cell.mean_TI), _round(cell.mean_AT), _round(cell.mean_ST),
                _round(cell.mean_Ju), _round(cell.mean_phi), _round(cell.mean_at_ti_ratio),
            ]
            for cell in summary.cells
        ]

    @staticmethod
    def emit_report(results: LabResults, out_dir: Optional[str] = None) -> List[Path]:
        """
        実行結果を出力ディレクトリに書き出す

        Args:
            results (LabResults): 実行結果一式
            out_dir (Optional[str], optional): 出力先。省略時は設定の output_dir

        Returns:
            List[Path]: 書き出したファイル（マニフェストを含む）

        Raises:
            ConfigurationError: 出力する結果が何もない場合
            ReportIOError: 書き込みに失敗した場合
        """
        if results.synthesis is None and results.simulation is None and not results.tables \
                and results.monte_carlo is None:
            raise ConfigurationError("出力する結果がありません")

        directory = Path(out_dir or results.config.output_dir)
        written: List[Path] = []
        try:
            directory.mkdir(parents=True, exist_ok=True)

            if results.synthesis is not None:
                path = directory / "synthesis.json"
                ReportService._write_json(path, ReportService.synthesis_to_dict(results.synthesis))
                written.append(path)

            sim = results.simulation
            if sim is not None:
                path = directory / "metrics.json"
                ReportService._write_json(path, ReportService.metrics_to_dict(sim))
                written.append(path)

                n, m = sim.trajectories.shape[2], sim.inputs.shape[2]
                path = directory / "trajectories.csv"
                header = ["t", "agent"] + [f"x{k + 1}" for k in range(n)] + [f"u{k + 1}" for k in range(m)]
                ReportService._write_csv(path, header, ReportService._trajectory_rows(sim))
                written.append(path)

                path = directory / "triggers.csv"
                rows = [[i + 1, _round(t)] for i, times in enumerate(sim.trigger_times) for t in times]
                ReportService._write_csv(path, ["agent", "time"], rows)
                written.append(path)

            for table in results.tables:
                name, header = TABLE_FILES[table.axis]
                path = directory / name
                ReportService._write_csv(path, header, ReportService._table_rows(table))
                written.append(path)

            if results.monte_carlo is not None:
                path = directory / "montecarlo.csv"
                header = [
                    "N", results.monte_carlo.axis.value, "trials", "successes", "infeasible", "diverged",
                    "not_converged", "feasibility_rate", "mean_TI", "mean_AT", "mean_ST", "mean_Ju",
                    "mean_phi", "mean_AT_over_TI",
                ]
                ReportService._write_csv(path, header, ReportService._monte_carlo_rows(results.monte_carlo))
                written.append(path)

            manifest = {
                "name": results.config.name,
                "config_sha256": ReportService.config_digest(results),
                "code_version": settings.CODE_VERSION,
                "created_at": datetime.now(timezone.utc).isoformat(),
                "sim_seed": results.config.sim.seed,
                "seeds": results.monte_carlo.seeds if results.monte_carlo is not None else {},
                "files": [p.name for p in written],
            }
            if results.monte_carlo is not None:
                manifest["clamped_trials"] = results.monte_carlo.clamped_trials
                manifest["trends"] = [t.model_dump() for t in results.monte_carlo.trends]
            path = directory / "manifest.json"
            ReportService._write_json(path, manifest)
            written.append(path)
        except OSError as e:
            logger.error(f"レポートの書き込みに失敗: {directory}: {str(e)}")
            raise ReportIOError(f"レポートを書き込めません ({directory}): {str(e)}")

        logger.info(f"レポートを出力しました: {directory} ({len(written)} ファイル)")
        return written
