from pathlib import Path
from typing import Any, List, Optional, Set, Union

import networkx as nx
import numpy as np

from app.core.logging import logger
from app.core.exceptions import (
    ConfigurationError,
    DimensionError,
    DomainError,
    GraphDiagnosticsError,
    NoSpanningTreeError,
)
from app.schemas.topology import Digraph, LaplacianBundle
from app.services.matkit import MatKit


class TopologyService:
    """
    有向グラフに関する処理を行うサービスクラス
    ラプラシアン構築、全域木判定、縮約ラプラシアン・リフト行列・依存係数・相関行列の計算を担当する
    """

    @staticmethod
    def build_laplacian(g: Digraph) -> np.ndarray:
        """
        L = 𝒟 − 𝒜 を構築する（𝒟 は行和の対角行列）

        Args:
            g (Digraph): 有向グラフ

        Returns:
            np.ndarray: N×N ラプラシアン行列
        """
        w = np.array(g.weights, dtype=float)
        return np.diag(w.sum(axis=1)) - w

    @staticmethod
    def to_networkx(weights: Any) -> nx.DiGraph:
        """
        隣接行列を辺 j → i（a_ij > 0）の networkx 有向グラフに変換する
        """
        weights = np.asarray(weights, dtype=float)
        graph = nx.DiGraph()
        graph.add_nodes_from(range(weights.shape[0]))
        rows, cols = np.nonzero(weights > 0.0)
        graph.add_edges_from((int(j), int(i)) for i, j in zip(rows, cols))
        return graph

    @staticmethod
    def reachable_from(weights: Any, root: int) -> Set[int]:
        """
        root から辺 j → i（a_ij > 0）をたどって到達できる頂点集合を返す
        """
        return {root} | nx.descendants(TopologyService.to_networkx(weights), root)

    @staticmethod
    def spanning_tree_roots(g: Digraph) -> List[int]:
        """全頂点へ有向路を持つ頂点（根の候補）の一覧"""
        graph = TopologyService.to_networkx(g.weights)
        return [
            root for root in range(g.n_agents)
            if len(nx.descendants(graph, root)) == g.n_agents - 1
        ]

    @staticmethod
    def has_spanning_tree(g: Digraph) -> bool:
        """
        有向全域木を持つか判定する
        rank(L) == N−1 と到達可能性探索の両方で判定し、結果を突き合わせる

        Args:
            g (Digraph): 有向グラフ

        Returns:
            bool: 全域木を持てばTrue

        Raises:
            GraphDiagnosticsError: 二つの判定が食い違う場合
        """
        L = TopologyService.build_laplacian(g)
        by_rank = MatKit.rank(L) == g.n_agents - 1
        by_search = len(TopologyService.spanning_tree_roots(g)) > 0
        if by_rank != by_search:
            logger.error(f"全域木判定が一致しません: rank={by_rank}, search={by_search}")
            raise GraphDiagnosticsError(
                f"ランク判定 ({by_rank}) と到達可能性探索 ({by_search}) の結果が一致しません"
            )
        return by_search

    @staticmethod
    def _validate_laplacian(L: Any) -> np.ndarray:
        L = MatKit.as_mat(L, "L")
        if L.shape[0] != L.shape[1]:
            raise DimensionError(f"ラプラシアンは正方行列である必要があります: shape={L.shape}")
        if L.shape[0] < 2:
            raise DomainError("エージェント数は2以上である必要があります")
        return L

    @staticmethod
    def admissible_dropped_rows(L: Any) -> List[int]:
        """
        除いても縮約ラプラシアンのランクが N−1 に保たれる行インデックスの一覧
        ルート強連結成分に属するエージェントの行だけが該当する
        """
        L = TopologyService._validate_laplacian(L)
        n_agents = L.shape[0]
        return [
            d for d in range(n_agents)
            if MatKit.rank(np.delete(L, d, axis=0)) == n_agents - 1
        ]

    @staticmethod
    def reduced_laplacian(L: Any, dropped_row: int) -> np.ndarray:
        """L から dropped_row 行を除いた L̂ を返す"""
        L = TopologyService._validate_laplacian(L)
        if not 0 <= dropped_row < L.shape[0]:
            raise DomainError(f"dropped_row が範囲外です: {dropped_row}")
        return np.delete(L, dropped_row, axis=0)

    @staticmethod
    def dependency_coefficients(L: np.ndarray, L_hat: np.ndarray, dropped_row: int) -> np.ndarray:
        """
        α = l_(d,•) L̂⁺ を計算する

        Raises:
            DomainError: l_(d,•) が L̂ の行空間にない場合
        """
        alpha = L[dropped_row] @ MatKit.pinv(L_hat)
        residual = np.linalg.norm(L[dropped_row] - alpha @ L_hat)
        scale = max(1.0, float(np.linalg.norm(L)))
        if residual > 1e-10 * scale:
            raise DomainError(
                f"行 {dropped_row} は残りの行の線形結合で表せません (残差 {residual:.3e})。別の行を除いてください"
            )
        return alpha

    @staticmethod
    def correlation_matrix(L: np.ndarray, alpha: np.ndarray, dropped_row: int) -> np.ndarray:
        """
        相関行列 M を計算する: m_ij = l_ij + α_j · l_i,d（i, j は残した行）
        """
        kept = np.delete(np.arange(L.shape[0]), dropped_row)
        return L[np.ix_(kept, kept)] + np.outer(L[kept, dropped_row], alpha)

    @staticmethod
    def lift_matrix(L: np.ndarray, L_hat: np.ndarray, n: int) -> np.ndarray:
        """𝕃 = L_⟨n⟩ · L̂_⟨n⟩⁺"""
        eye = np.eye(n)
        return np.kron(L, eye) @ MatKit.pinv(np.kron(L_hat, eye))

    @staticmethod
    def reduce(L: Any, dropped_row: Optional[int] = None, n: int = 1) -> LaplacianBundle:
        """
        縮約系への変換に必要な行列一式を構築する

        Args:
            L (Any): N×N ラプラシアン行列
            dropped_row (Optional[int], optional): 除く行（0始まり）。省略時は最後の行、
                最後の行が使えなければ使える行のうち最大のもの
            n (int, optional): 状態次元

        Returns:
            LaplacianBundle: 縮約系の行列一式

        Raises:
            NoSpanningTreeError: rank(L) < N−1 の場合
            DomainError: 指定した行を除くと縮約ラプラシアンのランクが落ちる場合
        """
        L = TopologyService._validate_laplacian(L)
        if n < 1:
            raise DomainError(f"状態次元 n は1以上である必要があります: {n}")
        n_agents = L.shape[0]

        rank = MatKit.rank(L)
        if rank < n_agents - 1:
            logger.warning(f"ラプラシアンのランクが不足しています: rank={rank}, N={n_agents}")
            raise NoSpanningTreeError()

        if dropped_row is None:
            candidates = TopologyService.admissible_dropped_rows(L)
            dropped_row = candidates[-1]
            if dropped_row != n_agents - 1:
                logger.info(f"最後の行は除けないため行 {dropped_row} を除きます")

        L_hat = TopologyService.reduced_laplacian(L, dropped_row)
        alpha = TopologyService.dependency_coefficients(L, L_hat, dropped_row)
        M = TopologyService.correlation_matrix(L, alpha, dropped_row)
        lift = TopologyService.lift_matrix(L, L_hat, n)

        return LaplacianBundle(
            L=L, L_hat=L_hat, dropped_row=dropped_row, alpha=alpha, M=M, n=n, lift=lift
        )

    @staticmethod
    def disagreement(L: Any, n: int, xhat: Any) -> np.ndarray:
        """
        X̂_i = l_(i,•)⟨n⟩ · x̂ をすべてのエージェントについて並べたベクトルを返す

        Raises:
            DimensionError: x̂ の長さが N·n でない場合
        """
        L = MatKit.as_mat(L, "L")
        xhat = np.asarray(xhat, dtype=float).reshape(-1)
        if xhat.size != L.shape[0] * n:
            raise DimensionError(f"x̂ の長さが不正です: {xhat.size} != {L.shape[0] * n}")
        # (L ⊗ I_n) x̂ を行列形式で計算
        return (L @ xhat.reshape(L.shape[0], n)).reshape(-1)

    @staticmethod
    def load_graph(path: Union[str, Path]) -> Digraph:
        """
        テキストファイルからグラフを読み込む

        密行列形式: 1行目に N、続く N 行に N 個の実数
        辺リスト形式: 1行目に "edges N"、続く各行に "src dst [weight]"（0始まり、src → dst）
        "#" 以降はコメントとして無視する

        Raises:
            ConfigurationError: ファイルが存在しない、または形式が不正な場合
        """
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"グラフファイルが見つかりません: {path}")

        rows = []
        for raw in path.read_text(encoding="utf-8").splitlines():
            line = raw.split("#", 1)[0].strip()
            if line:
                rows.append(line.replace(",", " ").split())
        if not rows:
            raise ConfigurationError(f"グラフファイルが空です: {path}")

        try:
            if rows[0][0].lower() == "edges":
                n_agents = int(rows[0][1])
                weights = np.zeros((n_agents, n_agents))
                for tokens in rows[1:]:
                    if len(tokens) not in (2, 3):
                        raise ValueError(f"辺の行が不正です: {' '.join(tokens)}")
                    src, dst = int(tokens[0]), int(tokens[1])
                    weights[dst, src] = float(tokens[2]) if len(tokens) == 3 else 1.0
            else:
                n_agents = int(rows[0][0])
                if len(rows) - 1 != n_agents or any(len(r) != n_agents for r in rows[1:]):
                    raise ValueError(f"{n_agents}×{n_agents} の行列が必要です")
                weights = np.array(rows[1:], dtype=float)
            graph = Digraph(weights=weights)
        except (ValueError, IndexError) as e:
            logger.error(f"グラフファイルの解析に失敗: {path}: {str(e)}")
            raise ConfigurationError(f"グラフファイルの形式が不正です ({path}): {str(e)}")

        logger.info(f"グラフを読み込みました: {path} (N={graph.n_agents})")
        return graph

    @staticmethod
    def random_rooted_digraph(n_agents: int, edge_probability: float, rng: np.random.Generator) -> Digraph:
        """
        有向全域木を必ず含むランダムな有向グラフを生成する
        一様ランダムなラベル付き有向木（プリューファー列と一様な根）に、残りの各有向辺を確率 p で追加する

        Args:
            n_agents (int): エージェント数 N（2以上）
            edge_probability (float): 追加辺の確率 p
            rng (np.random.Generator): 乱数生成器

        Returns:
            Digraph: 重み1の有向グラフ
        """
        if n_agents < 2:
            raise DomainError("エージェント数は2以上である必要があります")
        if not 0.0 <= edge_probability <= 1.0:
            raise DomainError(f"辺の確率は [0, 1] の範囲である必要があります: {edge_probability}")

        # 一様ランダムなプリューファー列から無向木を復元
        prufer = rng.integers(0, n_agents, size=n_agents - 2)
        tree = nx.from_prufer_sequence([int(v) for v in prufer])

        # 根から外向きに向き付け: 親 → 子 は weights[子, 親] = 1
        root = int(rng.integers(0, n_agents))
        weights = np.zeros((n_agents, n_agents))
        for parent, child in nx.bfs_edges(tree, root):
            weights[child, parent] = 1.0

        extra = rng.random((n_agents, n_agents)) < edge_probability
        np.fill_diagonal(extra, False)
        weights[extra] = 1.0

        return Digraph(weights=weights)
