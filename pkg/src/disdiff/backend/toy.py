"""A deterministic desk-scale latent denoiser with real cross-attention.

Layout: 8x8x3 images, a per-pixel linear encoder to a (4, 8, 8) latent, and a
small conditional denoiser with three cross-attention layers (2 heads each):
one at 8x8 and two at 4x4. Text conditioning is a hashed token embedding
plus a positional embedding. All parameters are float64.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

from disdiff.attention import AttentionBundle, AttentionLayer
from disdiff.backend.base import DTYPE, DiffusionBackend, ForwardResult, LatentState, as_image_tensor, prompt_tokens
from disdiff.errors import InvalidInputError, TrainingDivergenceError
from disdiff.numerics import softmax_rows

FROZEN = ("enc_w", "enc_b")


@dataclass(frozen=True)
class ToyConfig:
    image_size: int = 8
    image_channels: int = 3
    latent_channels: int = 4
    hidden: int = 16
    embed_dim: int = 16
    heads: int = 2
    head_dim: int = 8
    vocab_size: int = 97
    max_tokens: int = 16
    T: int = 50
    query_gain: float = 2.0


# name, spatial resolution
ATTENTION_LAYERS = (("down8", 8), ("mid4", 4), ("up4", 4))


def cosine_alpha_bar(T: int, s: float = 0.008, max_beta: float = 0.999) -> np.ndarray:
    """Cumulative signal rates for t = 0..T; alpha_bar[0] == 1, strictly decreasing."""
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos((steps / T + s) / (1 + s) * math.pi / 2) ** 2
    raw = f / f[0]
    betas = np.clip(1.0 - raw[1:] / raw[:-1], 0.0, max_beta)
    return np.concatenate([[1.0], np.cumprod(1.0 - betas)])


def token_id(token: str, vocab_size: int) -> int:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % vocab_size


def timestep_embedding(t: int, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=DTYPE) / half)
    angles = float(t) * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)])


def init_params(config: ToyConfig, seed: int) -> dict[str, torch.Tensor]:
    rng = np.random.default_rng(seed)

    def normal(*shape, fan_in, gain=1.0):
        return torch.from_numpy(rng.standard_normal(shape) * gain / math.sqrt(fan_in))

    c, e, inner = config.hidden, config.embed_dim, config.heads * config.head_dim
    params = {
        "enc_w": normal(config.latent_channels, config.image_channels, fan_in=config.image_channels),
        "enc_b": torch.zeros(config.latent_channels, dtype=DTYPE),
        "in_w": normal(c, config.latent_channels, fan_in=config.latent_channels),
        "in_b": torch.zeros(c, dtype=DTYPE),
        "time_w": normal(c, c, fan_in=c),
        "tok_emb": normal(config.vocab_size, e, fan_in=1),
        "pos_emb": normal(config.max_tokens, e, fan_in=1, gain=0.5),
        "mid_w": normal(c, c, fan_in=c),
        "mid_b": torch.zeros(c, dtype=DTYPE),
        "out_w": normal(config.latent_channels, c, fan_in=c),
        "out_b": torch.zeros(config.latent_channels, dtype=DTYPE),
    }
    for name, _ in ATTENTION_LAYERS:
        params[f"{name}.wq"] = normal(inner, c, fan_in=c, gain=config.query_gain)
        params[f"{name}.wk"] = normal(inner, e, fan_in=e)
        params[f"{name}.wv"] = normal(inner, e, fan_in=e)
        params[f"{name}.wo"] = normal(c, inner, fan_in=inner)
    return params


class ToyBackend(DiffusionBackend):
    default_resolution = 4

    def __init__(self, params: dict[str, torch.Tensor], config: ToyConfig = ToyConfig(), alpha_bar=None):
        self.config = config
        self.params = {k: v.detach().clone().to(DTYPE).requires_grad_(k not in FROZEN) for k, v in params.items()}
        if alpha_bar is None:
            alpha_bar = cosine_alpha_bar(config.T)
        self._alpha_bar = np.asarray(alpha_bar, dtype=np.float64)
        self._alpha_bar.setflags(write=False)
        if len(self._alpha_bar) != config.T + 1 or not np.all(np.diff(self._alpha_bar) < 0):
            raise InvalidInputError("alpha_bar must hold T+1 strictly decreasing values")

    @classmethod
    def create(cls, seed: int = 0, config: ToyConfig = ToyConfig()) -> "ToyBackend":
        return cls(init_params(config, seed), config)

    @property
    def T(self) -> int:
        return self.config.T

    @property
    def alpha_bar(self) -> np.ndarray:
        return self._alpha_bar

    @property
    def image_shape(self):
        return (self.config.image_size, self.config.image_size, self.config.image_channels)

    @property
    def latent_shape(self):
        return (self.config.latent_channels, self.config.image_size, self.config.image_size)

    def encode(self, image) -> torch.Tensor:
        x = as_image_tensor(image)
        if tuple(x.shape) != self.image_shape:
            raise InvalidInputError(f"expected image of shape {self.image_shape}, got {tuple(x.shape)}")
        chw = (2.0 * x - 1.0).permute(2, 0, 1)
        w, b = self.params["enc_w"], self.params["enc_b"]
        return torch.einsum("oc,chw->ohw", w, chw) + b[:, None, None]

    def decode(self, latent) -> torch.Tensor:
        z = torch.as_tensor(latent, dtype=DTYPE)
        w, b = self.params["enc_w"].detach(), self.params["enc_b"].detach()
        chw = torch.einsum("co,ohw->chw", torch.linalg.pinv(w), z - b[:, None, None])
        return ((chw + 1.0) / 2.0).permute(1, 2, 0)

    def text_embedding(self, tokens) -> torch.Tensor:
        tokens = prompt_tokens(tokens)
        if not 1 <= len(tokens) <= self.config.max_tokens:
            raise InvalidInputError(f"prompt must have 1..{self.config.max_tokens} tokens")
        ids = torch.tensor([token_id(tok, self.config.vocab_size) for tok in tokens])
        return self.params["tok_emb"][ids] + self.params["pos_emb"][: len(tokens)]

    def _cross_attention(self, name: str, x: torch.Tensor, text: torch.Tensor):
        c, r, _ = x.shape
        heads, dh = self.config.heads, self.config.head_dim
        feats = x.reshape(c, r * r).T  # (P, C)
        feats = (feats - feats.mean(dim=1, keepdim=True)) / torch.sqrt(feats.var(dim=1, keepdim=True, unbiased=False) + 1e-6)
        q = (feats @ self.params[f"{name}.wq"].T).reshape(r * r, heads, dh).transpose(0, 1)
        k = (text @ self.params[f"{name}.wk"].T).reshape(-1, heads, dh).transpose(0, 1)
        v = (text @ self.params[f"{name}.wv"].T).reshape(-1, heads, dh).transpose(0, 1)
        probs = softmax_rows(q @ k.transpose(1, 2) / math.sqrt(dh))  # (H, P, n)
        out = (probs @ v).transpose(0, 1).reshape(r * r, heads * dh) @ self.params[f"{name}.wo"].T
        return out.T.reshape(c, r, r), AttentionLayer(name=name, resolution=r, probs=probs)

    def predict_noise(self, state: LatentState, prompt) -> ForwardResult:
        if not 0 <= state.t <= self.T:
            raise InvalidInputError(f"timestep {state.t} outside [0, {self.T}]")
        z = torch.as_tensor(state.z, dtype=DTYPE)
        if tuple(z.shape) != self.latent_shape:
            raise InvalidInputError(f"expected latent of shape {self.latent_shape}, got {tuple(z.shape)}")
        tokens = prompt_tokens(prompt)
        p = self.params
        text = self.text_embedding(tokens)
        temb = torch.tanh(p["time_w"] @ timestep_embedding(state.t, self.config.hidden))

        h = torch.einsum("oc,chw->ohw", p["in_w"], z) + (p["in_b"] + temb)[:, None, None]
        layers = []
        out, layer = self._cross_attention("down8", h, text)
        h = h + out
        layers.append(layer)

        g = F.avg_pool2d(h[None], 2)[0]
        out, layer = self._cross_attention("mid4", g, text)
        g = g + out
        layers.append(layer)
        g = g + torch.tanh(torch.einsum("oc,chw->ohw", p["mid_w"], g) + p["mid_b"][:, None, None])
        out, layer = self._cross_attention("up4", g, text)
        g = g + out
        layers.append(layer)

        y = h + F.interpolate(g[None], scale_factor=2, mode="nearest")[0]
        eps_hat = torch.einsum("oc,chw->ohw", p["out_w"], torch.tanh(y)) + p["out_b"][:, None, None]
        return ForwardResult(predicted_noise=eps_hat, attention=AttentionBundle(layers=layers, tokens=tokens))

    def trainable(self) -> list[str]:
        return [k for k in self.params if k not in FROZEN]

    def finetune_step(self, loss: torch.Tensor, lr: float) -> "ToyBackend":
        if lr < 0:
            raise InvalidInputError("learning rate must be non-negative")
        names = self.trainable()
        grads = torch.autograd.grad(loss, [self.params[k] for k in names], allow_unused=True)
        new = {k: v.detach() for k, v in self.params.items()}
        for name, grad in zip(names, grads):
            if grad is None:
                continue
            if not torch.isfinite(grad).all():
                raise TrainingDivergenceError(f"non-finite gradient for parameter {name}")
            new[name] = new[name] - lr * grad
        return ToyBackend(new, self.config, self._alpha_bar)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.detach().numpy().copy() for k, v in self.params.items()}

    def config_dict(self) -> dict:
        return asdict(self.config)
