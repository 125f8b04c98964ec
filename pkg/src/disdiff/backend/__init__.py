from disdiff.backend.base import (
    DiffusionBackend,
    ForwardResult,
    LatentState,
    LossSpec,
    PromptSpec,
    combine_dreambooth,
    sample_noise,
    sample_timestep,
    squared_error,
    tokenize,
)
from disdiff.backend.toy import ToyBackend, ToyConfig, cosine_alpha_bar
from disdiff.backend.weights import load_weights, read_weights, save_weights


def load_adapter(target: str, **kwargs) -> DiffusionBackend:
    """Instantiate an external backend from ``"package.module:factory"``."""
    import importlib

    from disdiff.errors import ConfigurationError

    module_name, _, attr = target.partition(":")
    if not module_name or not attr:
        raise ConfigurationError(f"adapter must look like 'module:factory', got {target!r}")
    try:
        factory = getattr(importlib.import_module(module_name), attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigurationError(f"cannot load adapter {target!r}: {exc}") from None
    backend = factory(**kwargs)
    if not isinstance(backend, DiffusionBackend):
        raise ConfigurationError(f"adapter {target!r} did not return a DiffusionBackend")
    return backend


__all__ = [
    "DiffusionBackend",
    "ForwardResult",
    "LatentState",
    "LossSpec",
    "PromptSpec",
    "ToyBackend",
    "ToyConfig",
    "combine_dreambooth",
    "cosine_alpha_bar",
    "load_adapter",
    "load_weights",
    "read_weights",
    "sample_noise",
    "sample_timestep",
    "save_weights",
    "squared_error",
    "tokenize",
]
