"""
Configuration settings for the FVIN toolkit
Centralized Pydantic settings with environment variable loading
"""
from functools import lru_cache

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-level settings loaded from environment variables (prefix FVIN_)"""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="FVIN_",
        case_sensitive=False,
        extra="ignore"
    )

    # Application Configuration
    app_env: str = "dev"
    log_level: str = "INFO"
    log_config_path: str = "core/log_config.yaml"

    # Run Artifacts
    runs_dir: str = "runs"
    metrics_enabled: bool = True
    default_seed: int = 0

    @property
    def is_production(self) -> bool:
        """JSON logs in production, console logs otherwise"""
        return self.app_env.lower() in ("prod", "production")


@lru_cache
def get_settings() -> Settings:
    """Cached settings accessor"""
    return Settings()


settings = get_settings()
