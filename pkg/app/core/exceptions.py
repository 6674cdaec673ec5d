from typing import Any, Dict, Optional


class ConsensusLabError(Exception):
    """
    ラボ全体のエラー基底クラス
    HTTPステータスコードとCLI終了コードの両方を保持する
    """

    def __init__(self, message: str, status_code: int = 400, exit_code: int = 1):
        """
        ConsensusLabErrorの初期化メソッド

        Args:
            message (str): エラーメッセージ
            status_code (int, optional): HTTPステータスコード. Defaults to 400.
            exit_code (int, optional): CLI終了コード. Defaults to 1.
        """
        self.message = message
        self.status_code = status_code
        self.exit_code = exit_code
        super().__init__(self.message)

    def to_dict(self) -> Dict[str, Any]:
        """
        例外情報を辞書形式に変換する

        Returns:
            Dict[str, Any]: 例外情報の辞書
        """
        return {
            "error": self.__class__.__name__,
            "message": self.message,
            "status_code": self.status_code
        }


class DimensionError(ConsensusLabError):
    """
    行列・ベクトルの次元不整合エラー
    """

    def __init__(self, message: str, status_code: int = 422):
        super().__init__(message, status_code)


class DomainError(ConsensusLabError):
    """
    入力値の定義域エラー
    非対称行列、非有限値、範囲外のパラメータなどに使用
    """

    def __init__(self, message: str, status_code: int = 422):
        super().__init__(message, status_code)


class NoSpanningTreeError(ConsensusLabError):
    """
    グラフが有向全域木を持たない場合のエラー
    """

    def __init__(self, message: str = "グラフが有向全域木を持ちません (no spanning tree)", status_code: int = 422):
        """
        NoSpanningTreeErrorの初期化メソッド

        Args:
            message (str, optional): エラーメッセージ
            status_code (int, optional): HTTPステータスコード. Defaults to 422.
        """
        super().__init__(message, status_code)


class GraphDiagnosticsError(ConsensusLabError):
    """
    ランク判定と到達可能性探索の結果が食い違った場合のエラー
    """

    def __init__(self, message: str, status_code: int = 500):
        super().__init__(message, status_code)


class InfeasibleSynthesisError(ConsensusLabError):
    """
    与えられた (ζ, δ) に対してLMIが実行不能な場合のエラー
    呼び出し側がパラメータを変えて再試行できるよう組を保持する
    """

    def __init__(self, zeta: float, delta: float, message: Optional[str] = None, status_code: int = 422):
        """
        InfeasibleSynthesisErrorの初期化メソッド

        Args:
            zeta (float): 減衰係数ζ
            delta (float): 不確かさの上界δ
            message (Optional[str], optional): エラーメッセージ
            status_code (int, optional): HTTPステータスコード. Defaults to 422.
        """
        self.zeta = zeta
        self.delta = delta
        message = message or f"(ζ={zeta}, δ={delta}) に対する解がありません。パラメータ {{δ, ζ}} を変更して再実行してください"
        super().__init__(message, status_code, exit_code=2)

    def to_dict(self) -> Dict[str, Any]:
        data = super().to_dict()
        data.update({"zeta": self.zeta, "delta": self.delta})
        return data


class SynthesisVerificationError(ConsensusLabError):
    """
    復元したゲインで閉ループ検証が通らず、φの縮小でも回復できない場合のエラー
    """

    def __init__(self, message: str, status_code: int = 422):
        super().__init__(message, status_code, exit_code=2)


class SimulationDivergedError(ConsensusLabError):
    """
    シミュレーション中に状態が非有限値になった場合のエラー
    """

    def __init__(self, step: int, message: Optional[str] = None, status_code: int = 500):
        """
        SimulationDivergedErrorの初期化メソッド

        Args:
            step (int): 発散を検出したステップ番号
            message (Optional[str], optional): エラーメッセージ
            status_code (int, optional): HTTPステータスコード. Defaults to 500.
        """
        self.step = step
        message = message or f"ステップ {step} で状態が発散しました"
        super().__init__(message, status_code, exit_code=3)

    def to_dict(self) -> Dict[str, Any]:
        data = super().to_dict()
        data["step"] = self.step
        return data


class ConfigurationError(ConsensusLabError):
    """
    実験設定の読み込み・検証に関するエラー
    """

    def __init__(self, message: str, status_code: int = 400):
        super().__init__(message, status_code, exit_code=1)


class ReportIOError(ConsensusLabError):
    """
    結果ファイルの書き込みに関するエラー
    """

    def __init__(self, message: str, status_code: int = 500):
        super().__init__(message, status_code, exit_code=1)
