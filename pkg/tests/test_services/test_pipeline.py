import numpy as np
import pytest

from app.schemas.experiment import ExperimentConfig
from app.services.langgraph.pipeline import ConsensusPipelineGraph, PipelineStatus, run_pipeline
from app.services.lab import LabService
from app.core.exceptions import DomainError, NoSpanningTreeError


@pytest.fixture(scope="module")
def pipeline():
    return ConsensusPipelineGraph()


class TestConsensusPipelineGraph:
    """ConsensusPipelineGraphのテストクラス"""

    def test_synthesis_only(self, pipeline, tmp_path, example_bundle):
        """シミュレーションなしで合成まで進み、縮約の中間結果が状態に残るテスト"""
        cfg = LabService.example_config(output_dir=str(tmp_path))
        state = pipeline.run(cfg, simulate=False, write=True)

        assert state["status"] == PipelineStatus.COMPLETE
        assert state["dropped_row"] == 5
        np.testing.assert_allclose(state["L_hat"], example_bundle.L_hat)
        np.testing.assert_allclose(state["bundle"].M, example_bundle.M)
        assert state["simulation"] is None
        assert state["synthesis"].verified
        assert 0.13 <= state["synthesis"].phi <= 0.20
        assert [p.split("/")[-1] for p in state["written"]] == ["synthesis.json", "manifest.json"]

    def test_no_spanning_tree_is_raised(self, pipeline):
        """全域木のないグラフで最初のノードのエラーが再送出されるテスト"""
        cfg = ExperimentConfig.model_validate({
            "plant": {"inertias": [1.0, 1.0, 1.0]},
            "graph": {"adjacency": [[0, 0, 0], [0, 0, 0], [0, 1, 0]]},
            "spec": {"zeta": 0.4, "delta": 0.0},
        })
        with pytest.raises(NoSpanningTreeError):
            pipeline.run(cfg, simulate=False, write=False)

    def test_inadmissible_dropped_row(self, pipeline):
        """根強連結成分の外の行を指定したときのエラーテスト"""
        cfg = ExperimentConfig.model_validate({
            "plant": {"inertias": [1.0, 1.0, 1.0]},
            "graph": {"adjacency": [[0, 0, 0], [1, 0, 0], [0, 1, 0]]},
            "dropped_row": 2,
            "spec": {"zeta": 0.4, "delta": 0.0},
        })
        with pytest.raises(DomainError):
            pipeline.run(cfg, simulate=False, write=False)

    def test_run_pipeline(self, tmp_path):
        """合成とシミュレーションを一括で実行するテスト"""
        cfg = LabService.example_config(output_dir=str(tmp_path))
        synthesis, simulation = run_pipeline(cfg, write=False)
        assert synthesis.verified
        assert simulation.converged
        assert simulation.phi == synthesis.phi
        assert not (tmp_path / "manifest.json").exists()
