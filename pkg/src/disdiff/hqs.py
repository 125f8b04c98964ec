"""Per-timestep gradient diagnostics: L1 magnitude, softmax entropy and the
combined quality score used to compare step-size schedules."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from disdiff.backend.base import LossSpec, PromptSpec, sample_noise
from disdiff.errors import InvalidInputError
from disdiff.numerics import gaussian_kernel, minmax_normalize

CSV_COLUMNS = ("t", "N", "H", "norm_N", "norm_H", "hqs")


def _finite(grad) -> np.ndarray:
    g = np.asarray(grad, dtype=np.float64).ravel()
    if not np.all(np.isfinite(g)):
        raise InvalidInputError("gradient contains non-finite values")
    return g


def grad_l1(grad) -> float:
    return float(np.abs(_finite(grad)).sum())


def grad_entropy(grad) -> float:
    """Shannon entropy (nats) of the softmax over the flattened signed gradient."""
    g = _finite(grad)
    if g.size < 2:
        raise InvalidInputError("entropy needs at least two gradient entries")
    shifted = g - g.max()
    log_z = np.log(np.exp(shifted).sum())
    log_p = shifted - log_z
    p = np.exp(log_p)
    return float(max(-(p * log_p).sum(), 0.0))


def hqs_scores(N, H) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    norm_n = minmax_normalize(np.asarray(N, dtype=np.float64))
    norm_h = minmax_normalize(np.asarray(H, dtype=np.float64))
    return norm_n, norm_h, norm_n - norm_h


@dataclass
class HQSProfile:
    timesteps: np.ndarray
    N: np.ndarray
    H: np.ndarray
    norm_N: np.ndarray
    norm_H: np.ndarray
    hqs: np.ndarray

    @classmethod
    def from_measurements(cls, timesteps, N, H) -> "HQSProfile":
        timesteps, N, H = (np.asarray(a) for a in (timesteps, N, H))
        if not len(timesteps) == len(N) == len(H):
            raise InvalidInputError("timesteps, N and H must have equal length")
        norm_n, norm_h, hqs = hqs_scores(N, H)
        return cls(timesteps, N.astype(np.float64), H.astype(np.float64), norm_n, norm_h, hqs)

    def rows(self):
        for i, t in enumerate(self.timesteps):
            yield int(t), float(self.N[i]), float(self.H[i]), float(self.norm_N[i]), float(self.norm_H[i]), float(self.hqs[i])

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for row in self.rows():
                w.writerow([row[0], *(repr(v) for v in row[1:])])


def profile(
    backend,
    image,
    prompt: PromptSpec,
    timesteps=None,
    term: str = "diffusion",
    lam: float = 0.1,
    seed: int = 0,
    resolution=None,
    kernel=None,
    reduction: str = "sum",
) -> HQSProfile:
    """Image-gradient statistics of ``term`` at each timestep.

    Each timestep gets its own noise draw from a generator seeded with
    ``seed``, so a profile is reproducible and independent of evaluation order.
    """
    if timesteps is None:
        timesteps = range(1, backend.T + 1)
    timesteps = [int(t) for t in timesteps]
    if len(timesteps) < 2:
        raise InvalidInputError("a profile needs at least two timesteps")
    rng = np.random.default_rng(seed)
    noises = [sample_noise(rng, backend.latent_shape) for _ in timesteps]
    N, H = [], []
    for t, eps in zip(timesteps, noises):
        spec = LossSpec(
            term=term,
            prompt=prompt,
            t=t,
            epsilon=eps,
            lam=lam,
            resolution=resolution,
            kernel=kernel or gaussian_kernel(),
            reduction=reduction,
        )
        g = backend.loss_gradient_wrt_image(image, spec)
        N.append(grad_l1(g))
        H.append(grad_entropy(g))
    return HQSProfile.from_measurements(timesteps, N, H)
