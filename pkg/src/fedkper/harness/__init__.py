from .config import ExperimentConfig, parse_config
from .runner import compare, run, run_seed, score

__all__ = ["ExperimentConfig", "compare", "parse_config", "run", "run_seed", "score"]
