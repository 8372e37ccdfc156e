from pydantic_settings import BaseSettings
from pydantic import field_validator
import os


class Settings(BaseSettings):
    PROJECT_NAME: str = "deepca"
    VERSION: str = "1.0.0"

    DEEPCA_THREADS: int = os.cpu_count() or 1

    LOG_LEVEL: str = "INFO"
    LOG_JSON: bool = False

    DEFAULT_RHO: float = 1.0
    SIZE_CAP: int = 10_000
    PRIMAL_TOL: float = 1e-8

    @field_validator("DEEPCA_THREADS")
    @classmethod
    def validate_threads(cls, v: int) -> int:
        return max(1, v)

    @field_validator("LOG_LEVEL")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        return v.upper()

    class Config:
        env_file = ".env"
        case_sensitive = True
        extra = "ignore"


settings = Settings()
