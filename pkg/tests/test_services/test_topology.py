import numpy as np
import pytest
import scipy.linalg
from pydantic import ValidationError

from app.schemas.topology import Digraph
from app.services.lab import EXAMPLE_LAPLACIAN
from app.services.topology import TopologyService
from app.core.exceptions import ConfigurationError, DimensionError, DomainError, NoSpanningTreeError


def random_instance(rng: np.random.Generator):
    """重み付きのランダムな根付きグラフと状態次元"""
    n_agents = int(rng.integers(2, 9))
    n = int(rng.integers(1, 4))
    graph = TopologyService.random_rooted_digraph(n_agents, float(rng.uniform(0.0, 0.5)), rng)
    weights = graph.weights * rng.uniform(0.5, 2.0, size=graph.weights.shape)
    return Digraph(weights=weights), n


class TestTopologyService:
    """TopologyServiceのテストクラス"""

    def test_build_laplacian(self, example_graph):
        """ラプラシアン構築のテスト"""
        L = TopologyService.build_laplacian(Digraph(weights=[[0, 1], [1, 0]]))
        np.testing.assert_array_equal(L, [[1, -1], [-1, 1]])

        np.testing.assert_array_equal(TopologyService.build_laplacian(example_graph), EXAMPLE_LAPLACIAN)
        np.testing.assert_array_equal(TopologyService.build_laplacian(Digraph(weights=np.zeros((3, 3)))), np.zeros((3, 3)))

    def test_digraph_validation(self):
        """対角成分と負の重みを拒否するテスト"""
        with pytest.raises(ValidationError):
            Digraph(weights=[[1, 0], [0, 0]])
        with pytest.raises(ValidationError):
            Digraph(weights=[[0, -1], [0, 0]])
        assert not Digraph(weights=[[0, 2.5], [1, 0]]).is_binary

    def test_has_spanning_tree(self, example_graph):
        """全域木判定のテスト"""
        chain = np.zeros((3, 3))
        chain[1, 0] = 1.0
        chain[2, 1] = 1.0
        assert TopologyService.has_spanning_tree(Digraph(weights=chain))
        assert TopologyService.spanning_tree_roots(Digraph(weights=chain)) == [0]
        assert not TopologyService.has_spanning_tree(Digraph(weights=np.zeros((2, 2))))
        assert TopologyService.has_spanning_tree(example_graph)

    def test_reduce_two_agents(self):
        """2エージェントの縮約を手計算と比較するテスト"""
        bundle = TopologyService.reduce([[1.0, -1.0], [-1.0, 1.0]], dropped_row=1, n=1)
        np.testing.assert_allclose(bundle.L_hat, [[1.0, -1.0]])
        np.testing.assert_allclose(bundle.alpha, [-1.0])
        np.testing.assert_allclose(bundle.M, [[2.0]])

    def test_reduce_example_graph(self, example_bundle):
        """例題グラフで最後の行を除いたときの残差のテスト"""
        L = example_bundle.L
        assert example_bundle.dropped_row == 5
        residual = np.linalg.norm(L[5] - example_bundle.alpha @ example_bundle.L_hat)
        assert residual <= 1e-10
        np.testing.assert_allclose(example_bundle.L_hat.sum(axis=1), 0.0, atol=1e-12)
        assert example_bundle.lift.shape == (12, 10)

    def test_reduce_without_spanning_tree(self):
        """全域木がない場合のエラーテスト"""
        L = TopologyService.build_laplacian(Digraph(weights=np.zeros((3, 3))))
        with pytest.raises(NoSpanningTreeError):
            TopologyService.reduce(L)

    def test_reduce_non_root_row_rejected(self):
        """根強連結成分の外の行を除くと縮約できないテスト"""
        chain = np.zeros((3, 3))
        chain[1, 0] = 1.0
        chain[2, 1] = 1.0
        L = TopologyService.build_laplacian(Digraph(weights=chain))
        assert TopologyService.admissible_dropped_rows(L) == [0]
        with pytest.raises(DomainError):
            TopologyService.reduce(L, dropped_row=2)
        assert TopologyService.reduce(L).dropped_row == 0

    def test_disagreement(self, example_graph):
        """X̂_i の計算のテスト"""
        L = np.array([[1.0, -1.0], [-1.0, 1.0]])
        np.testing.assert_allclose(TopologyService.disagreement(L, 1, [1.0, 0.0]), [1.0, -1.0])
        np.testing.assert_allclose(TopologyService.disagreement(L, 2, [3.0, 4.0, 3.0, 4.0]), np.zeros(4))
        with pytest.raises(DimensionError):
            TopologyService.disagreement(L, 2, [1.0, 2.0, 3.0])

        W = example_graph.weights
        x = np.array([[i + 5.0, i - 2.0] for i in range(1, 7)])
        expected = np.array([
            sum(W[i, j] * (x[i] - x[j]) for j in range(6)) for i in range(6)
        ]).reshape(-1)
        L_example = TopologyService.build_laplacian(example_graph)
        np.testing.assert_allclose(TopologyService.disagreement(L_example, 2, x.reshape(-1)), expected)

    def test_structural_identities(self):
        """ランダムな200例で縮約系の恒等式が成り立つテスト"""
        rng = np.random.default_rng(2024)
        for _ in range(200):
            graph, n = random_instance(rng)
            assert TopologyService.has_spanning_tree(graph)
            L = TopologyService.build_laplacian(graph)
            dropped = int(rng.choice(TopologyService.admissible_dropped_rows(L)))
            bundle = TopologyService.reduce(L, dropped, n)
            N = bundle.n_agents
            L_n, L_hat_n, M_n = bundle.L_n(), bundle.L_hat_n(), bundle.M_n()

            np.testing.assert_allclose(L.sum(axis=1), 0.0, atol=1e-12)
            np.testing.assert_allclose(bundle.L_hat.sum(axis=1), 0.0, atol=1e-12)
            np.testing.assert_allclose(L[dropped], bundle.alpha @ bundle.L_hat, atol=1e-10)

            # 合意状態は L̂ の零空間に属し、逆に零空間の元は合意状態
            c = rng.standard_normal(n)
            np.testing.assert_allclose(L_hat_n @ np.kron(np.ones(N), c), 0.0, atol=1e-10)
            null = scipy.linalg.null_space(L_hat_n)
            x = (null @ rng.standard_normal(null.shape[1])).reshape(N, n)
            np.testing.assert_allclose(x, np.tile(x[0], (N, 1)), atol=1e-9)

            A = rng.standard_normal((n, n))
            np.testing.assert_allclose(
                L_hat_n @ np.kron(np.eye(N), A), np.kron(np.eye(N - 1), A) @ L_hat_n, atol=1e-12
            )

            xhat = rng.standard_normal(N * n)
            np.testing.assert_allclose(L_hat_n @ (L_n @ xhat), M_n @ (L_hat_n @ xhat), atol=1e-9)

            np.testing.assert_allclose(bundle.lift @ L_hat_n, L_n, atol=1e-9)

    def test_load_graph_dense_and_edges(self, tmp_path):
        """密行列形式と辺リスト形式のファイル読み込みのテスト"""
        dense = tmp_path / "dense.txt"
        dense.write_text("# 2エージェント\n2\n0, 1\n1 0\n", encoding="utf-8")
        np.testing.assert_array_equal(TopologyService.load_graph(dense).weights, [[0, 1], [1, 0]])

        edges = tmp_path / "edges.txt"
        edges.write_text("edges 3\n0 1\n1 2 0.5\n", encoding="utf-8")
        graph = TopologyService.load_graph(edges)
        assert graph.weights[1, 0] == 1.0
        assert graph.weights[2, 1] == 0.5
        assert TopologyService.has_spanning_tree(graph)

    def test_load_graph_errors(self, tmp_path):
        """不正なグラフファイルのエラーテスト"""
        with pytest.raises(ConfigurationError):
            TopologyService.load_graph(tmp_path / "missing.txt")
        bad = tmp_path / "bad.txt"
        bad.write_text("3\n0 1 0\n1 0 0\n", encoding="utf-8")
        with pytest.raises(ConfigurationError):
            TopologyService.load_graph(bad)

    def test_networkx_view_and_reachability(self):
        """隣接行列の networkx 変換が辺 j → i を張り到達集合と根の候補が一致するテスト"""
        # 0 → 1 → 2、3 は孤立
        weights = np.zeros((4, 4))
        weights[1, 0] = 1.0
        weights[2, 1] = 2.0
        graph = TopologyService.to_networkx(weights)
        assert set(graph.nodes) == {0, 1, 2, 3}
        assert set(graph.edges) == {(0, 1), (1, 2)}
        assert TopologyService.reachable_from(weights, 0) == {0, 1, 2}
        assert TopologyService.reachable_from(weights, 3) == {3}
        assert TopologyService.spanning_tree_roots(Digraph(weights=weights)) == []

        weights[0, 3] = 1.0
        assert TopologyService.spanning_tree_roots(Digraph(weights=weights)) == [3]

    def test_random_tree_root_is_uniform(self):
        """木だけのランダムグラフで根がどのエージェントにも現れるテスト"""
        rng = np.random.default_rng(11)
        roots = set()
        for _ in range(200):
            graph = TopologyService.random_rooted_digraph(4, 0.0, rng)
            candidates = TopologyService.spanning_tree_roots(graph)
            assert len(candidates) == 1
            roots.add(candidates[0])
        assert roots == {0, 1, 2, 3}

    def test_random_rooted_digraph(self):
        """ランダムグラフが常に全域木を持ち、シードで再現できるテスト"""
        for n_agents in (2, 3, 8, 16):
            for p in (0.0, 0.3):
                graph = TopologyService.random_rooted_digraph(n_agents, p, np.random.default_rng(n_agents))
                assert graph.is_binary
                assert TopologyService.has_spanning_tree(graph)
                if p == 0.0:
                    assert graph.weights.sum() == n_agents - 1

        first = TopologyService.random_rooted_digraph(8, 0.25, np.random.default_rng(5))
        second = TopologyService.random_rooted_digraph(8, 0.25, np.random.default_rng(5))
        np.testing.assert_array_equal(first.weights, second.weights)

        with pytest.raises(DomainError):
            TopologyService.random_rooted_digraph(1, 0.1, np.random.default_rng(0))
