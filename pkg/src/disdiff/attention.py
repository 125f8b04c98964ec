"""Cross-attention aggregation, subject-token energy and the erasure loss.

All functions operate on float64 torch tensors so the erasure loss can be
back-propagated to the input image. Numpy arrays are accepted and converted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import torch

from disdiff.errors import ConfigurationError, DegenerateInputError, InvalidInputError
from disdiff.numerics import GaussianKernel, gaussian_smooth


def _tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


@dataclass
class AttentionLayer:
    """Attention probabilities of one cross-attention layer.

    ``probs`` has shape (heads, patches, tokens); each (head, patch) row is a
    distribution over prompt tokens.
    """

    name: str
    resolution: int
    probs: torch.Tensor

    def __post_init__(self):
        self.probs = _tensor(self.probs)
        if self.probs.ndim != 3:
            raise InvalidInputError(f"layer {self.name}: probs must be (heads, patches, tokens)")
        if self.probs.shape[1] != self.resolution * self.resolution:
            raise InvalidInputError(
                f"layer {self.name}: {self.probs.shape[1]} patches do not form a {self.resolution}x{self.resolution} grid"
            )


@dataclass
class AttentionBundle:
    layers: list[AttentionLayer]
    tokens: tuple[str, ...] = ()

    def resolutions(self) -> list[int]:
        return sorted({layer.resolution for layer in self.layers})

    def at_resolution(self, resolution: int) -> list[AttentionLayer]:
        return [layer for layer in self.layers if layer.resolution == resolution]


@dataclass
class AggregatedMaps:
    """One square spatial map per prompt token, shape (tokens, r, r)."""

    maps: torch.Tensor
    tokens: tuple[str, ...] = ()

    def __post_init__(self):
        self.maps = _tensor(self.maps)
        if self.maps.ndim != 3:
            raise InvalidInputError("maps must have shape (tokens, r, r)")

    @property
    def n_tokens(self) -> int:
        return self.maps.shape[0]


@dataclass
class EnergyReport:
    energies: torch.Tensor
    relative: torch.Tensor
    subject_index: int
    tokens: tuple[str, ...] = field(default_factory=tuple)

    @property
    def subject_energy(self) -> float:
        return float(self.relative[self.subject_index])


def aggregate(bundle: AttentionBundle, resolution: int) -> AggregatedMaps:
    """Average every layer and head at ``resolution`` into one map per token."""
    layers = bundle.at_resolution(resolution)
    if not layers:
        raise ConfigurationError(
            f"no attention layer at resolution {resolution}; available: {bundle.resolutions()}"
        )
    stacked = torch.cat([layer.probs for layer in layers], dim=0)  # (all heads, P, n)
    mean = stacked.mean(dim=0)
    n = mean.shape[1]
    maps = mean.transpose(0, 1).reshape(n, resolution, resolution)
    return AggregatedMaps(maps=maps, tokens=tuple(bundle.tokens))


def smooth_all(maps: AggregatedMaps, kernel: GaussianKernel) -> AggregatedMaps:
    return AggregatedMaps(maps=gaussian_smooth(maps.maps, kernel), tokens=maps.tokens)


def relative_energy(maps: AggregatedMaps, subject_index: int) -> EnergyReport:
    if not 0 <= subject_index < maps.n_tokens:
        raise InvalidInputError(f"subject index {subject_index} out of range for {maps.n_tokens} tokens")
    energies = (maps.maps**2).sum(dim=(-2, -1))
    total = energies.sum()
    if not total > 0:
        raise DegenerateInputError("attention maps carry zero total energy")
    return EnergyReport(
        energies=energies,
        relative=energies / total,
        subject_index=subject_index,
        tokens=maps.tokens,
    )


def cae_from_energy(energy):
    """(1 - E)^2 for a relative energy E in [0, 1]."""
    if isinstance(energy, torch.Tensor):
        return (1.0 - energy) ** 2
    if not 0.0 <= energy <= 1.0 or math.isnan(energy):
        raise InvalidInputError(f"relative energy must lie in [0, 1], got {energy}")
    return (1.0 - energy) ** 2


def cae_loss(maps: AggregatedMaps, subject_index: int) -> torch.Tensor:
    report = relative_energy(maps, subject_index)
    return cae_from_energy(report.relative[subject_index])


def subject_maps(bundle: AttentionBundle, resolution: int, kernel: GaussianKernel) -> AggregatedMaps:
    """Aggregate then smooth; the maps the energy is measured on."""
    return smooth_all(aggregate(bundle, resolution), kernel)
