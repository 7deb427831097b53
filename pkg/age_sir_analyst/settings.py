"""Runtime settings, read from AGE_SIR_* environment variables and .env."""

import os
from functools import lru_cache

from dotenv import load_dotenv
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class AgeSirSettings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="AGE_SIR_", env_file=".env", extra="ignore")

    # where the agent tools resolve relative paths and write results
    workspace: str = Field(default_factory=os.getcwd)
    agent_model: str = "gemini-2.0-flash"
    log_level: str = "INFO"
    n_jobs: int = 1

    nnls_tol: float = 1e-8
    lambda_reg: float = 1e-5

    window: int = 30
    step: int = 5
    eps: float = 1e-4
    delta: float = 3.0
    min_phase: int = 20

    recovery_days: int = 14
    smoothing_window: int = 15


@lru_cache(maxsize=1)
def get_settings() -> AgeSirSettings:
    load_dotenv()
    return AgeSirSettings()
