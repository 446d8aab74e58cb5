from typing import List

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.models import FitOptions, HardFitConfig, ProtocolConfig, SoftFitConfig


class Settings(BaseSettings):
    """Application settings using Pydantic.

    Nested groups are overridable from the environment, e.g.
    ``EDGEFIT_HARD__ICEF_ITERS=4`` or ``EDGEFIT_PROTOCOL__SUBJECTS=2``.
    """

    model_config = SettingsConfigDict(
        env_prefix="EDGEFIT_",
        env_file=".env",
        env_file_encoding="utf-8",
        env_nested_delimiter="__",
        extra="ignore",
    )

    # Edge detection
    canny_sigma: float = Field(1.4, gt=0)
    canny_low: float = Field(0.05, ge=0, le=1)
    canny_high: float = Field(0.15, ge=0, le=1)

    # Fitting
    landmark_fit: FitOptions = Field(default_factory=FitOptions)
    hard: HardFitConfig = Field(default_factory=HardFitConfig)
    soft: SoftFitConfig = Field(default_factory=SoftFitConfig)

    # Evaluation
    protocol: ProtocolConfig = Field(default_factory=ProtocolConfig)
    methods: List[str] = Field(
        default_factory=lambda: ["mean-shape", "landmarks", "icef", "hard", "soft"]
    )
    jobs: int = Field(1, ge=1)
    record_walltime: bool = False

    log_level: str = "INFO"


settings = Settings()
