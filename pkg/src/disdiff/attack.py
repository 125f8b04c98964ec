"""Attention-erasure PGD with a timestep-aware step size, alternated with
surrogate DreamBooth fine-tuning."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from disdiff.backend.base import (
    DiffusionBackend,
    LossSpec,
    PromptSpec,
    as_image_tensor,
    sample_noise,
    sample_timestep,
)
from disdiff.errors import ConfigurationError, InvalidInputError, RunAborted
from disdiff.numerics import clamp, gaussian_kernel, sign
from disdiff.scheduler import VARIANTS, SchedulerSpec, make_scheduler

log = logging.getLogger(__name__)

ADV_LOSS_MODES = ("subject_only", "full_db")


@dataclass
class AttackConfig:
    eta: float = 0.05
    gamma: float = 0.005
    epochs: int = 50
    t1: int = 3
    t2: int = 6
    lam: float = 0.1
    adv_reduction: str = "mean"
    lambda_db: float = 1.0
    lr_db: float = 1e-4
    scheduler: str = "cosine"
    p_norm: str = "inf"
    seed: int = 0
    adv_loss: str = "subject_only"
    accumulate_timesteps: int = 1
    resolution: int | None = None
    kernel_size: int = 3
    kernel_sigma: float = 0.5

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigurationError("eta must be positive")
        if not self.gamma > 0:
            raise ConfigurationError("gamma must be positive")
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.t1 < 1 or self.t2 < 1:
            raise ConfigurationError("t1 and t2 must be >= 1")
        if self.lam < 0 or self.lambda_db < 0:
            raise ConfigurationError("lambda and lambda_db must be non-negative")
        if self.lr_db < 0:
            raise ConfigurationError("lr_db must be non-negative")
        if self.scheduler not in VARIANTS:
            raise ConfigurationError(f"scheduler must be one of {VARIANTS}")
        if str(self.p_norm) not in ("inf", "linf"):
            raise ConfigurationError("only the l-infinity budget ('inf') is supported")
        if self.adv_loss not in ADV_LOSS_MODES:
            raise ConfigurationError(f"adv_loss must be one of {ADV_LOSS_MODES}")
        if self.adv_reduction not in ("sum", "mean"):
            raise ConfigurationError("adv_reduction must be 'sum' or 'mean'")
        if self.accumulate_timesteps < 1:
            raise ConfigurationError("accumulate_timesteps must be >= 1")

    @property
    def kernel(self):
        return gaussian_kernel(self.kernel_size, self.kernel_sigma)


@dataclass
class PerturbationState:
    x0: np.ndarray
    x_adv: np.ndarray
    step_log: list[dict] = field(default_factory=list)

    @classmethod
    def start(cls, images) -> "PerturbationState":
        x0 = np.stack([np.asarray(im, dtype=np.float64) for im in images])
        return cls(x0=x0, x_adv=x0.copy())

    def linf(self) -> np.ndarray:
        return np.abs(self.x_adv - self.x0).reshape(len(self.x0), -1).max(axis=1)


def project(candidate, x0, eta: float):
    """Clip into the eta-ball around ``x0`` and then into the pixel range."""
    if np.shape(candidate) != np.shape(x0):
        raise InvalidInputError(f"shape mismatch: {np.shape(candidate)} vs {np.shape(x0)}")
    return clamp(clamp(candidate, x0 - eta, x0 + eta), 0.0, 1.0)


def disdiff_loss(
    backend: DiffusionBackend,
    x_adv,
    prompt: PromptSpec,
    t: int,
    epsilon,
    lam: float,
    resolution=None,
    kernel=None,
    prior=None,
    reduction: str = "mean",
):
    """Adversarial objective on one image: diffusion term + lam * erasure loss.

    ``prior`` is an optional ``(class_images, class_prompt, lambda_db, rng)``
    tuple adding the prior-preservation term. It does not depend on the
    image, so it changes the reported value but not the gradient.
    """
    spec = LossSpec(
        term="combined",
        prompt=prompt,
        t=t,
        epsilon=torch.as_tensor(epsilon),
        lam=lam,
        resolution=resolution,
        kernel=kernel or gaussian_kernel(),
        reduction=reduction,
    )
    total, parts = backend.image_loss(x_adv, spec)
    if prior is not None:
        class_images, class_prompt, lambda_db, rng = prior
        prior_term = backend._batch_term(class_images, class_prompt, rng).detach()
        parts["prior"] = prior_term
        total = total + lambda_db * prior_term
    parts["total"] = total
    return total, parts


def pgd_update(state: PerturbationState, gradient, h: float, config: AttackConfig) -> PerturbationState:
    """Ascent step of size gamma * h along sign(gradient), then project.

    A non-finite gradient leaves the state untouched.
    """
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != state.x_adv.shape:
        raise InvalidInputError(f"gradient shape {g.shape} != image shape {state.x_adv.shape}")
    if not np.all(np.isfinite(g)):
        log.warning("non-finite gradient; PGD step skipped")
        return state
    candidate = state.x_adv + (config.gamma * h) * sign(g)
    x_adv = project(candidate, state.x0, config.eta)
    return PerturbationState(x0=state.x0, x_adv=x_adv, step_log=state.step_log)


def db_step(
    backend: DiffusionBackend,
    batch,
    prompts,
    lr: float,
    lambda_db: float,
    rng: np.random.Generator,
    class_batch=(),
):
    """One surrogate fine-tuning step; returns (new backend, loss value)."""
    if len(batch) == 0:
        raise InvalidInputError("db_step needs a non-empty batch")
    loss = backend.dreambooth_loss(batch, class_batch, prompts, lambda_db, rng)
    return backend.finetune_step(loss, lr), float(loss.detach())


def _perturbation_gradient(backend, x_adv, prompt, draws, config, kernel, prior):
    """Gradient of the summed adversarial loss for every image, plus mean loss parts."""
    x = torch.as_tensor(x_adv).clone().requires_grad_(True)
    total = 0.0
    sums: dict[str, float] = {}
    for t, eps in draws:
        for i in range(x.shape[0]):
            loss, parts = disdiff_loss(
                backend, x[i], prompt, t, eps, config.lam, config.resolution, kernel, prior, config.adv_reduction
            )
            total = total + loss
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
    (grad,) = torch.autograd.grad(total, x)
    n = len(draws) * x.shape[0]
    return grad.numpy(), {k: v / n for k, v in sums.items()}


def measure_subject_energy(backend, images, prompt, t, epsilon, resolution=None, kernel=None) -> list[float]:
    """Relative energy of the subject token for each image at a fixed (t, epsilon)."""
    spec = LossSpec(
        term="cae",
        prompt=prompt,
        t=t,
        epsilon=torch.as_tensor(epsilon),
        resolution=resolution,
        kernel=kernel or gaussian_kernel(),
    )
    out = []
    with torch.no_grad():
        for image in images:
            _, parts = backend.image_loss(image, spec)
            out.append(float(parts["energy"]))
    return out


@dataclass
class AttackResult:
    protected: np.ndarray
    backend: DiffusionBackend
    state: PerturbationState
    report: dict


def _check_disjoint(clean_set, protect_set):
    clean = {np.asarray(im, dtype=np.float64).tobytes() for im in clean_set}
    if any(np.asarray(im, dtype=np.float64).tobytes() in clean for im in protect_set):
        raise InvalidInputError("clean and protected image sets must be disjoint")


def run_disdiff(
    backend: DiffusionBackend,
    clean_set,
    protect_set,
    prompt: PromptSpec,
    config: AttackConfig,
    class_set=(),
    class_prompt=None,
    perturb: bool = True,
    check_invariants: bool = False,
) -> AttackResult:
    """Alternate surrogate fine-tuning and PGD for ``config.epochs`` epochs.

    Per epoch: t1 surrogate steps on the clean set, t2 PGD steps on the
    protected set, then t1 surrogate steps on the protected set. With
    ``perturb=False`` the PGD steps are skipped while the surrogate follows
    the same random stream, which gives a paired unprotected baseline.
    """
    if len(clean_set) == 0 or len(protect_set) == 0:
        raise InvalidInputError("clean and protected sets must be non-empty")
    _check_disjoint(clean_set, protect_set)
    if config.lambda_db > 0 and len(class_set) == 0:
        raise ConfigurationError("lambda_db > 0 requires class images")
    if class_prompt is None:
        class_prompt = tuple(tok for i, tok in enumerate(prompt.tokens) if i != prompt.subject_index)
    prompts = (prompt, class_prompt)
    kernel = config.kernel
    h_of = make_scheduler(SchedulerSpec(config.scheduler, backend.T), backend)

    db_rng, pgd_rng, probe_rng, prior_rng = [
        np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(4)
    ]
    probe_t = backend.T // 2
    probe_eps = sample_noise(probe_rng, backend.latent_shape)

    state = PerturbationState.start(protect_set)
    clean = [as_image_tensor(im) for im in clean_set]
    prior = (class_set, class_prompt, config.lambda_db, prior_rng) if config.adv_loss == "full_db" else None
    report = {
        "config": asdict(config),
        "prompt": prompt.text,
        "perturb": perturb,
        "probe_t": probe_t,
        "energy_pre": measure_subject_energy(
            backend, state.x0, prompt, probe_t, probe_eps, config.resolution, kernel
        ),
        "epochs": [],
        "steps": state.step_log,
    }

    try:
        for epoch in range(config.epochs):
            clean_losses, adv_losses = [], []
            for _ in range(config.t1):
                backend, loss = db_step(backend, clean, prompts, config.lr_db, config.lambda_db, db_rng, class_set)
                clean_losses.append(loss)

            step_parts = []
            for k in range(config.t2):
                draws = []
                for _ in range(config.accumulate_timesteps):
                    t = sample_timestep(pgd_rng, backend.T)
                    draws.append((t, sample_noise(pgd_rng, backend.latent_shape)))
                if not perturb:
                    continue
                h = float(np.mean([h_of(t) for t, _ in draws]))
                grad, parts = _perturbation_gradient(backend, state.x_adv, prompt, draws, config, kernel, prior)
                skipped = not np.all(np.isfinite(grad))
                state = pgd_update(state, grad, h, config)
                if check_invariants:
                    _assert_state(state, config.eta)
                record = {"epoch": epoch, "step": k, "t": [t for t, _ in draws], "h": h, "skipped": skipped}
                record.update(parts)
                state.step_log.append(record)
                step_parts.append(parts)

            adv = [torch.as_tensor(im) for im in state.x_adv]
            for _ in range(config.t1):
                backend, loss = db_step(backend, adv, prompts, config.lr_db, config.lambda_db, db_rng, class_set)
                adv_losses.append(loss)

            summary = {
                "epoch": epoch,
                "db_clean_loss": float(np.mean(clean_losses)),
                "db_adv_loss": float(np.mean(adv_losses)),
            }
            for key in ("diffusion", "cae", "energy", "total"):
                if step_parts:
                    summary[key] = float(np.mean([p[key] for p in step_parts]))
            report["epochs"].append(summary)
            log.info("epoch %d: %s", epoch, summary)
    except Exception as exc:
        report["error"] = f"{type(exc).__name__}: {exc}"
        report["protected_so_far"] = state.x_adv
        raise RunAborted(f"protection run aborted in epoch {len(report['epochs'])}: {exc}", partial=report) from exc

    report["linf"] = state.linf().tolist()
    report["energy_post"] = measure_subject_energy(
        backend, state.x_adv, prompt, probe_t, probe_eps, config.resolution, kernel
    )
    return AttackResult(protected=state.x_adv, backend=backend, state=state, report=report)


def _assert_state(state: PerturbationState, eta: float):
    dev = np.abs(state.x_adv - state.x0).max()
    if dev > eta + 1e-9 or state.x_adv.min() < 0 or state.x_adv.max() > 1:
        raise AssertionError(f"perturbation left the feasible set (linf={dev})")


def linf_budget_pixels(eta: float) -> int:
    """Largest 8-bit deviation a quantized output can show for budget ``eta``."""
    return int(math.floor(eta * 255 + 0.5))
