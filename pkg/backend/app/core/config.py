"""
Core configuration settings for the Adaptive SNMPC Workbench.
Uses Pydantic Settings for environment variable validation.
"""
from pathlib import Path
from typing import List
from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict
import os

BACKEND_DIR = Path(__file__).resolve().parents[2]


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    # Application
    APP_NAME: str = "Adaptive SNMPC Workbench"
    APP_VERSION: str = "1.0.0"
    ENVIRONMENT: str = "development"
    DEBUG: bool = False
    LOG_LEVEL: str = "INFO"
    LOG_DIR: str = "./logs"

    # API
    API_V1_PREFIX: str = "/api/v1"
    BACKEND_CORS_ORIGINS: List[str] = ["http://localhost:3000"]

    # Paths
    TRACKS_PATH: str = str(BACKEND_DIR / "data" / "tracks")
    EXPERIMENTS_PATH: str = str(BACKEND_DIR / "data" / "experiments")
    OUTPUT_DIR: str = "./data/runs"
    CHECKPOINT_DIR: str = "./data/checkpoints"

    # Compute
    MAX_CONCURRENT_TASKS: int = 4
    TORCH_NUM_THREADS: int = 1

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore"
    )

    @field_validator("BACKEND_CORS_ORIGINS", mode="before")
    @classmethod
    def assemble_cors_origins(cls, v):
        if isinstance(v, str):
            return [i.strip() for i in v.split(",")]
        return v

    def ensure_directories(self):
        """Create necessary directories if they don't exist."""
        directories = [
            self.OUTPUT_DIR,
            self.CHECKPOINT_DIR,
            self.LOG_DIR,
        ]
        for directory in directories:
            os.makedirs(directory, exist_ok=True)


# Global settings instance
settings = Settings()
settings.ensure_directories()
