"""Anti-personalization image protection by erasing subject-token cross-attention."""

from disdiff.attack import AttackConfig, run_disdiff
from disdiff.backend import PromptSpec, ToyBackend

__version__ = "0.1.0"

__all__ = ["AttackConfig", "PromptSpec", "ToyBackend", "run_disdiff", "__version__"]
