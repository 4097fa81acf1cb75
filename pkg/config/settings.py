import os
from dotenv import load_dotenv
from pathlib import Path
from pydantic_settings import BaseSettings

load_dotenv()

BASE_DIR: Path = Path(__file__).resolve().parent.parent


class Settings(BaseSettings):
    """Application settings."""

    # Project
    PROJECT_TITLE: str = "vitiac-seg"
    PROJECT_DESCRIPTION: str = (
        "Masked-autoencoder pre-training and fine-tuning of 3D vision transformers "
        "for calcification segmentation on CT-like volumes"
    )
    PROJECT_VERSION: str = "0.3.0"
    DEBUG: bool = os.getenv("DEBUG", "false").lower() == "true"

    # Environment configuration
    ENVIRONMENT: str = os.getenv("ENVIRONMENT", "desk").lower()  # 'desk' or 'cluster'

    # Logging
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "info").upper()

    # Compute
    DEVICE: str = os.getenv("DEVICE", "auto").lower()  # auto | cpu | cuda | cuda:N
    NUM_WORKERS: int = int(os.getenv("NUM_WORKERS") or 1)
    DETERMINISTIC: bool = os.getenv("DETERMINISTIC", "true").lower() == "true"
    TORCH_THREADS: int = int(os.getenv("TORCH_THREADS") or 0)

    # Outputs
    RUNS_DIR: Path = Path(os.getenv("RUNS_DIR", str(BASE_DIR / "runs")))
    DEFAULT_SEED: int = int(os.getenv("DEFAULT_SEED") or 0)

    # Evaluation defaults
    BOOTSTRAP_RESAMPLES: int = int(os.getenv("BOOTSTRAP_RESAMPLES") or 1000)
    SPACING_WARN_MM: float = float(os.getenv("SPACING_WARN_MM") or 10.0)

    class Config:
        env_file: str = ".env"
        env_file_encoding: str = "utf-8"
        case_sensitive = True
        extra = "ignore"


settings = Settings()
