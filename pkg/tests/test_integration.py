import json
from unittest.mock import MagicMock

import numpy as np
import pytest
from fastapi.testclient import TestClient

from app.cli import main
from app.main import app
from app.services.lab import LabService, EXAMPLE_B_VALUES, EXAMPLE_LAPLACIAN
from app.services.report import ReportService


EXAMPLE_ADJACENCY = (np.diag(np.diag(EXAMPLE_LAPLACIAN)) - np.array(EXAMPLE_LAPLACIAN)).tolist()


# テスト用のクライアント
@pytest.fixture
def client():
    with TestClient(app) as test_client:
        yield test_client


def example_request(**extra):
    return {
        "plant": {"inertias": EXAMPLE_B_VALUES},
        "graph": {"adjacency": EXAMPLE_ADJACENCY},
        "zeta": 0.4,
        "delta": 0.02,
        **extra,
    }


# パイプラインのモック
@pytest.fixture
def mock_pipeline(monkeypatch, example_synthesis, example_simulation):
    """ConsensusPipelineGraph.runをモックする"""
    from app.services.langgraph.pipeline import ConsensusPipelineGraph

    mock_run = MagicMock()
    mock_run.return_value = {
        "synthesis": example_synthesis,
        "simulation": example_simulation,
        "envelope_ratio": 0.5,
        "written": [],
    }
    monkeypatch.setattr(ConsensusPipelineGraph, "run", lambda self, *args, **kwargs: mock_run(*args, **kwargs))
    return mock_run


# 統合テスト
class TestIntegration:
    """APIエンドポイントの統合テスト"""

    def test_root_endpoint(self, client):
        """ルートエンドポイントのテスト"""
        response = client.get("/")
        assert response.status_code == 200
        data = response.json()
        assert "message" in data
        assert "version" in data

    def test_health_check(self, client):
        """ヘルスチェックエンドポイントのテスト"""
        response = client.get("/health")
        assert response.status_code == 200
        data = response.json()
        assert data["status"] == "healthy"

    def test_synthesize(self, client, mock_pipeline, example_synthesis):
        """合成エンドポイントのテスト"""
        response = client.post("/api/v1/synthesis/", json=example_request())

        assert response.status_code == 200
        data = response.json()
        assert data["success"] is True
        assert data["phi"] == example_synthesis.phi
        assert data["verified"] is True
        assert len(data["K"]) == 6

        # モックが正しく呼ばれたことを確認
        mock_pipeline.assert_called_once()
        assert mock_pipeline.call_args.kwargs == {"simulate": False, "write": False}

    def test_simulate(self, client, mock_pipeline, example_simulation):
        """シミュレーションエンドポイントのテスト"""
        response = client.post("/api/v1/simulations/", json=example_request(sim={"max_steps": 100000}))

        assert response.status_code == 200
        data = response.json()
        assert data["success"] is True
        assert data["TI"] == example_simulation.TI
        assert data["converged"] is True
        assert data["envelope_ratio"] == 0.5

        cfg = mock_pipeline.call_args.args[0]
        assert cfg.sim.max_steps == 100000
        assert mock_pipeline.call_args.kwargs == {"simulate": True, "write": False}

    def test_verify(self, client, example_synthesis):
        """保存済み合成結果の再検査エンドポイントのテスト"""
        request = {
            "plant": {"inertias": EXAMPLE_B_VALUES},
            "graph": {"adjacency": EXAMPLE_ADJACENCY},
            "synthesis": ReportService.synthesis_to_dict(example_synthesis),
        }
        response = client.post("/api/v1/synthesis/verify", json=request)

        assert response.status_code == 200
        data = response.json()
        assert data["ok"] is True
        assert data["checks"]["closed_loop"] is True

    def test_no_spanning_tree_maps_to_422(self, client):
        """全域木のないグラフが 422 とエラー辞書になるテスト"""
        request = {
            "plant": {"inertias": [1.0, 1.0, 1.0]},
            "graph": {"adjacency": [[0, 0, 0], [0, 0, 0], [0, 1, 0]]},
            "zeta": 0.4,
            "delta": 0.0,
        }
        response = client.post("/api/v1/synthesis/", json=request)

        assert response.status_code == 422
        assert response.json()["detail"]["error"] == "NoSpanningTreeError"

    def test_invalid_request(self, client):
        """不正なリクエストの検証エラーテスト"""
        response = client.post("/api/v1/synthesis/", json=example_request(zeta=-1.0))
        assert response.status_code == 422


class TestCli:
    """コマンドラインのテストクラス"""

    def test_synth_and_verify(self, tmp_path, capsys):
        """synth で保存した結果を verify で再検査できるテスト"""
        assert main(["synth", "--out", str(tmp_path)]) == 0
        printed = json.loads(capsys.readouterr().out)
        assert 0.13 <= printed["phi"] <= 0.20
        assert (tmp_path / "synthesis.json").exists()

        assert main(["verify", "--synthesis", str(tmp_path / "synthesis.json")]) == 0
        assert json.loads(capsys.readouterr().out)["ok"] is True

    def test_verify_tampered_result(self, tmp_path, example_synthesis, capsys):
        """改ざんした合成結果で終了コード 2 になるテスト"""
        data = ReportService.synthesis_to_dict(example_synthesis)
        data["phi"] = 2.0 * data["phi_lmi"]
        path = tmp_path / "synthesis.json"
        path.write_text(json.dumps(data), encoding="utf-8")
        assert main(["verify", "--synthesis", str(path)]) == 2
        assert json.loads(capsys.readouterr().out)["checks"]["phi_within_certificate"] is False

    def test_exit_codes(self, tmp_path):
        """入力エラーと実行不能の終了コードのテスト"""
        assert main(["synth", "--config", str(tmp_path / "missing.json"), "--no-write"]) == 1

        config = tmp_path / "graph.json"
        config.write_text(json.dumps({
            "plant": {"inertias": [1.0, 1.0, 1.0]},
            "graph": {"adjacency": [[0, 0, 0], [0, 0, 0], [0, 1, 0]]},
            "spec": {"zeta": 0.4, "delta": 0.0},
        }), encoding="utf-8")
        assert main(["synth", "--config", str(config), "--no-write"]) == 1

        infeasible = tmp_path / "infeasible.json"
        data = json.loads(LabService.example_config().model_dump_json())
        data["spec"]["delta"] = 0.5
        infeasible.write_text(json.dumps(data), encoding="utf-8")
        assert main(["synth", "--config", str(infeasible), "--no-write"]) == 2

    def test_sweep_requires_axis(self, tmp_path):
        """掃引軸の指定がないと終了コード 1 になるテスト"""
        assert main(["sweep", "--no-write"]) == 1
