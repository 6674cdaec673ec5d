from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.services.matkit import MatKit


class Digraph(BaseModel):
    """
    重み付き有向グラフ
    a_ij > 0 はエージェント i がエージェント j から情報を受け取る（辺 j → i）ことを表す
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    weights: np.ndarray = Field(..., description="N×N 非負の隣接行列")

    @field_validator("weights", mode="before")
    @classmethod
    def _coerce_weights(cls, v: Any) -> np.ndarray:
        w = MatKit.as_mat(v, "weights")
        if w.shape[0] != w.shape[1]:
            raise ValueError(f"隣接行列は正方である必要があります: shape={w.shape}")
        if np.any(np.diag(w) != 0.0):
            raise ValueError("隣接行列の対角成分は0である必要があります")
        if np.any(w < 0.0):
            raise ValueError("隣接行列の重みは非負である必要があります")
        w.setflags(write=False)
        return w

    @property
    def n_agents(self) -> int:
        return int(self.weights.shape[0])

    @property
    def is_binary(self) -> bool:
        return bool(np.all(np.isin(self.weights, (0.0, 1.0))))


class LaplacianBundle(BaseModel):
    """
    縮約系の構成に必要なラプラシアン関連の行列一式
    構築後は変更しない
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    L: np.ndarray = Field(..., description="N×N ラプラシアン行列")
    L_hat: np.ndarray = Field(..., description="dropped_row 行を除いた (N−1)×N 縮約ラプラシアン")
    dropped_row: int = Field(..., ge=0, description="除いた行の0始まりインデックス")
    alpha: np.ndarray = Field(..., description="長さ N−1 の依存係数 α")
    M: np.ndarray = Field(..., description="(N−1)×(N−1) 相関行列")
    n: int = Field(..., ge=1, description="リフト行列を構成した状態次元")
    lift: np.ndarray = Field(..., description="𝕃 = L_⟨n⟩ · L̂_⟨n⟩⁺")

    @model_validator(mode="after")
    def _check_shapes(self) -> "LaplacianBundle":
        n_agents = self.L.shape[0]
        if self.L_hat.shape != (n_agents - 1, n_agents):
            raise ValueError(f"L_hat の形状が不正です: {self.L_hat.shape}")
        if self.M.shape != (n_agents - 1, n_agents - 1):
            raise ValueError(f"M の形状が不正です: {self.M.shape}")
        if self.lift.shape != (n_agents * self.n, (n_agents - 1) * self.n):
            raise ValueError(f"lift の形状が不正です: {self.lift.shape}")
        for arr in (self.L, self.L_hat, self.alpha, self.M, self.lift):
            arr.setflags(write=False)
        return self

    @property
    def n_agents(self) -> int:
        return int(self.L.shape[0])

    @property
    def kept_rows(self) -> np.ndarray:
        return np.delete(np.arange(self.n_agents), self.dropped_row)

    def L_n(self) -> np.ndarray:
        """L ⊗ I_n"""
        return np.kron(self.L, np.eye(self.n))

    def L_hat_n(self) -> np.ndarray:
        """L̂ ⊗ I_n"""
        return np.kron(self.L_hat, np.eye(self.n))

    def M_n(self) -> np.ndarray:
        """M ⊗ I_n"""
        return np.kron(self.M, np.eye(self.n))
