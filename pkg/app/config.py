from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """
    アプリケーション設定を管理するクラス
    環境変数から設定を読み込み、適切な型に変換する
    """
    # アプリケーション設定
    PROJECT_NAME: str = "Event-Triggered Consensus Lab"
    API_V1_STR: str = "/api/v1"
    CODE_VERSION: str = "1.0.0"

    # ロギング設定
    LOG_LEVEL: str = "INFO"
    LOG_DIR: str = "./logs"
    LOG_TO_FILE: bool = True

    # 出力設定
    OUTPUT_DIR: str = "./results"

    # LMIソルバー設定
    LMI_EPS_STRICT: float = 1e-6
    LMI_TOL: float = 1e-7
    LMI_MAX_ITER: int = 500
    LMI_PHASE1_MAX_ITER: int = 200
    LMI_BARRIER_FACTOR: float = 5.0
    LMI_RADIUS: float = 1e4

    # 閉ループ検証設定
    VERIFY_EPS: float = 1e-8
    PHI_MIN: float = 1e-4

    # シミュレーション設定
    SIM_TS: float = 1e-3
    SIM_DELTA_C: float = 5e-3
    SIM_MAX_STEPS: int = 200_000
    SIM_DECIMATION: int = 10
    ENVELOPE_SLACK: float = 0.05

    # モンテカルロ設定
    MC_WORKERS: int = 1

    class Config:
        env_file = ".env"
        case_sensitive = True


# 設定インスタンスの作成
settings = Settings()
