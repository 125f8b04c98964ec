"""The denoiser contract the attack is written against.

A backend is an immutable handle on one set of model parameters. Every
fine-tuning step returns a new handle; forward passes never mutate state, so a
frozen handle can be shared by concurrent readers.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass, field

import numpy as np
import torch

from disdiff.attention import AttentionBundle, cae_from_energy, relative_energy, subject_maps
from disdiff.errors import ConfigurationError, InvalidInputError, UnsupportedError
from disdiff.numerics import GaussianKernel, gaussian_kernel

DTYPE = torch.float64


def tokenize(text: str) -> tuple[str, ...]:
    return tuple(text.split())


@dataclass(frozen=True)
class PromptSpec:
    tokens: tuple[str, ...]
    subject_index: int
    class_index: int

    def __post_init__(self):
        n = len(self.tokens)
        if n < 2:
            raise InvalidInputError("a prompt needs at least two tokens")
        if not 0 <= self.subject_index < n or not 0 <= self.class_index < n:
            raise InvalidInputError("subject/class index out of range")
        if self.subject_index == self.class_index:
            raise InvalidInputError("subject and class token must differ")

    @classmethod
    def from_text(cls, text: str, subject_token: str = "sks", class_token: str = "person") -> "PromptSpec":
        tokens = tokenize(text)
        try:
            s = tokens.index(subject_token)
            c = tokens.index(class_token)
        except ValueError:
            raise InvalidInputError(
                f"prompt {text!r} must contain subject token {subject_token!r} and class token {class_token!r}"
            ) from None
        return cls(tokens=tokens, subject_index=s, class_index=c)

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    @property
    def subject_token(self) -> str:
        return self.tokens[self.subject_index]


def prompt_tokens(prompt) -> tuple[str, ...]:
    if isinstance(prompt, PromptSpec):
        return prompt.tokens
    if isinstance(prompt, str):
        return tokenize(prompt)
    return tuple(prompt)


@dataclass
class LatentState:
    z: torch.Tensor
    t: int
    epsilon: torch.Tensor


@dataclass
class ForwardResult:
    predicted_noise: torch.Tensor
    attention: AttentionBundle


LOSS_TERMS = ("diffusion", "cae", "combined")


@dataclass(frozen=True)
class LossSpec:
    """Which image-space loss to differentiate, at a fixed (t, epsilon).

    ``combined`` is the diffusion term plus ``lam`` times the erasure loss.
    ``reduction`` applies to the diffusion term only: "sum" is the squared
    L2 norm, "mean" divides it by the number of latent elements (MSE).
    """

    term: str
    prompt: PromptSpec
    t: int
    epsilon: torch.Tensor
    lam: float = 0.1
    resolution: int | None = None
    kernel: GaussianKernel = field(default_factory=gaussian_kernel)
    reduction: str = "sum"

    def __post_init__(self):
        if self.reduction not in ("sum", "mean"):
            raise ConfigurationError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")
        if self.term not in LOSS_TERMS:
            raise UnsupportedError(f"unknown loss term {self.term!r}; expected one of {LOSS_TERMS}")
        if self.lam < 0:
            raise ConfigurationError("lambda must be non-negative")


def as_image_tensor(image) -> torch.Tensor:
    """HxWxC array in [0, 1] to a float64 tensor (gradients preserved)."""
    if isinstance(image, torch.Tensor):
        x = image if image.dtype == DTYPE else image.to(DTYPE)
    else:
        x = torch.as_tensor(np.asarray(image, dtype=np.float64))
    if x.ndim != 3:
        raise InvalidInputError(f"image must be HxWxC, got shape {tuple(x.shape)}")
    return x


def sample_timestep(rng: np.random.Generator, T: int) -> int:
    """Uniform over the diffusion steps 1..T."""
    return int(rng.integers(1, T + 1))


def sample_noise(rng: np.random.Generator, shape) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal(tuple(shape)))


class DiffusionBackend(abc.ABC):
    """Operations the attack needs from a latent text-to-image denoiser."""

    #: attention resolution carrying the semantic maps for this model family
    default_resolution: int = 16

    @property
    @abc.abstractmethod
    def T(self) -> int: ...

    @property
    @abc.abstractmethod
    def alpha_bar(self) -> np.ndarray: ...

    @property
    @abc.abstractmethod
    def image_shape(self) -> tuple[int, int, int]: ...

    @property
    @abc.abstractmethod
    def latent_shape(self) -> tuple[int, ...]: ...

    @abc.abstractmethod
    def encode(self, image) -> torch.Tensor: ...

    @abc.abstractmethod
    def predict_noise(self, state: LatentState, prompt) -> ForwardResult: ...

    @abc.abstractmethod
    def finetune_step(self, loss: torch.Tensor, lr: float) -> "DiffusionBackend":
        """One gradient-descent step on ``loss``; returns a new handle."""

    def decode(self, latent) -> torch.Tensor:
        raise UnsupportedError(f"{type(self).__name__} has no decoder")

    def add_noise(self, z0, t: int, epsilon) -> LatentState:
        if not 0 <= t <= self.T:
            raise InvalidInputError(f"timestep {t} outside [0, {self.T}]")
        z0 = torch.as_tensor(z0, dtype=DTYPE)
        epsilon = torch.as_tensor(epsilon, dtype=DTYPE)
        if epsilon.shape != z0.shape:
            raise InvalidInputError(f"noise shape {tuple(epsilon.shape)} != latent shape {tuple(z0.shape)}")
        ab = float(self.alpha_bar[t])
        z_t = ab**0.5 * z0 + (1.0 - ab) ** 0.5 * epsilon
        return LatentState(z=z_t, t=int(t), epsilon=epsilon)

    def diffusion_loss(self, state: LatentState, prompt) -> torch.Tensor:
        """Squared L2 error of the noise prediction, summed over elements."""
        pred = self.predict_noise(state, prompt).predicted_noise
        return squared_error(state.epsilon, pred)

    def image_loss(self, image, spec: LossSpec) -> tuple[torch.Tensor, dict]:
        """Evaluate ``spec`` on ``image``; returns (total, parts).

        ``parts`` holds the diffusion term, the erasure loss and the subject
        relative energy, each as a tensor still attached to the graph.
        """
        x = as_image_tensor(image)
        state = self.add_noise(self.encode(x), spec.t, spec.epsilon)
        result = self.predict_noise(state, spec.prompt)
        diff = squared_error(state.epsilon, result.predicted_noise)
        if spec.reduction == "mean":
            diff = diff / state.epsilon.numel()
        resolution = spec.resolution or self.default_resolution
        maps = subject_maps(result.attention, resolution, spec.kernel)
        energy = relative_energy(maps, spec.prompt.subject_index).relative[spec.prompt.subject_index]
        cae = cae_from_energy(energy)
        if spec.term == "diffusion":
            total = diff
        elif spec.term == "cae":
            total = cae
        else:
            total = diff + spec.lam * cae
        return total, {"diffusion": diff, "cae": cae, "energy": energy}

    def loss_gradient_wrt_image(self, image, spec: LossSpec) -> np.ndarray:
        x = as_image_tensor(image).detach().clone().requires_grad_(True)
        total, _ = self.image_loss(x, spec)
        if not total.requires_grad:
            return np.zeros(tuple(x.shape))
        (grad,) = torch.autograd.grad(total, x, allow_unused=True)
        if grad is None:
            return np.zeros(tuple(x.shape))
        return grad.detach().numpy()

    def dreambooth_loss(
        self,
        subject_batch,
        class_batch,
        prompts,
        lambda_db: float,
        rng: np.random.Generator,
    ) -> torch.Tensor:
        """Subject term plus ``lambda_db`` times the prior-preservation term.

        Each image draws its own (t, epsilon); each term is the batch mean of
        the summed squared error.
        """
        subject_prompt, class_prompt = prompts
        if len(subject_batch) == 0:
            raise ConfigurationError("subject batch is empty")
        if lambda_db > 0 and len(class_batch) == 0:
            raise ConfigurationError("prior-preservation weight > 0 requires class images")
        subject_term = self._batch_term(subject_batch, subject_prompt, rng)
        if lambda_db == 0:
            return subject_term
        prior_term = self._batch_term(class_batch, class_prompt, rng)
        return combine_dreambooth(subject_term, prior_term, lambda_db)

    def _batch_term(self, batch, prompt, rng) -> torch.Tensor:
        terms = []
        for image in batch:
            z0 = self.encode(image)
            t = sample_timestep(rng, self.T)
            eps = sample_noise(rng, z0.shape)
            terms.append(self.diffusion_loss(self.add_noise(z0, t, eps), prompt))
        return torch.stack(terms).mean()


def squared_error(epsilon, predicted) -> torch.Tensor:
    return ((torch.as_tensor(epsilon, dtype=DTYPE) - predicted) ** 2).sum()


def combine_dreambooth(subject_term, prior_term, lambda_db: float):
    return subject_term + lambda_db * prior_term
