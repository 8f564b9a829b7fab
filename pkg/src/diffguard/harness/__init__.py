"""Configuration, orchestration and result files for reproducible experiments."""

from .config import ConfigError, config_hash, load_config, validate
from .runner import EvalReport, ablation_suite, execute, run

__all__ = ["ConfigError", "EvalReport", "ablation_suite", "config_hash", "execute", "load_config", "run", "validate"]
