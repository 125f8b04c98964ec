"""Timestep-aware step-size multipliers h(t) for the PGD update."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

from disdiff.errors import ConfigurationError, InvalidInputError

VARIANTS = ("cosine", "log", "alpha_bar", "none")


def _check_range(t, T):
    if T < 1:
        raise ConfigurationError(f"max timestep must be >= 1, got {T}")
    if not 0 <= t <= T:
        raise InvalidInputError(f"timestep {t} outside [0, {T}]")


def h_cosine(t, T) -> float:
    _check_range(t, T)
    return 0.5 * (math.cos(math.pi * t / T) + 1.0)


def h_log(t, T) -> float:
    _check_range(t, T)
    return 1.0 - math.log(t + 1) / math.log(T + 1)


def h_alpha_bar(t, backend) -> float:
    alpha_bar = getattr(backend, "alpha_bar", None)
    if alpha_bar is None:
        raise ConfigurationError("backend exposes no alpha_bar schedule")
    _check_range(t, len(alpha_bar) - 1)
    return float(alpha_bar[int(t)])


@dataclass(frozen=True)
class SchedulerSpec:
    variant: str = "cosine"
    T: int = 50

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown scheduler {self.variant!r}; expected one of {VARIANTS}")
        if self.T < 1:
            raise ConfigurationError(f"max timestep must be >= 1, got {self.T}")


def make_scheduler(spec: SchedulerSpec, backend=None) -> Callable[[int], float]:
    """Return h as a one-argument function of the diffusion timestep."""
    if spec.variant == "cosine":
        return lambda t: h_cosine(t, spec.T)
    if spec.variant == "log":
        return lambda t: h_log(t, spec.T)
    if spec.variant == "alpha_bar":
        if backend is None or getattr(backend, "alpha_bar", None) is None:
            raise ConfigurationError("alpha_bar scheduler needs a backend with an alpha_bar schedule")
        return lambda t: h_alpha_bar(t, backend)

    def constant(t):
        _check_range(t, spec.T)
        return 1.0

    return constant
