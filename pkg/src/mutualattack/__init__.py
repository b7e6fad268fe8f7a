# mutualattack/__init__.py
__version__ = "0.1.0"

from .config import RunConfig, load_config, save_config
from .models import PromptTemplate, TransferReport
from .trainer import MutualTrainer, run, run_attack_only, run_random_prompt

__all__ = [
    "MutualTrainer",
    "PromptTemplate",
    "RunConfig",
    "TransferReport",
    "load_config",
    "run",
    "run_attack_only",
    "run_random_prompt",
    "save_config",
]
