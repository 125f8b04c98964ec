"""Small numeric primitives shared by the rest of the package.

Everything works in float64. ``softmax_rows``, ``gaussian_smooth`` and ``clamp``
also accept torch tensors and stay differentiable in that case, since the
attack losses are built from them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from disdiff.errors import ConfigurationError, InvalidInputError

DEFAULT_KERNEL_SIZE = 3
DEFAULT_KERNEL_SIGMA = 0.5


def _is_tensor(x) -> bool:
    return isinstance(x, torch.Tensor)


def _to_numpy(x) -> np.ndarray:
    return x.detach().cpu().numpy() if _is_tensor(x) else np.asarray(x, dtype=np.float64)


def _as_float_array(x, name="input") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def softmax_rows(logits):
    """Softmax over the last axis, stabilized by subtracting the row max."""
    if _is_tensor(logits):
        if not torch.isfinite(logits).all():
            raise InvalidInputError("logits contain non-finite values")
        shifted = logits - logits.amax(dim=-1, keepdim=True).detach()
        e = torch.exp(shifted)
        return e / e.sum(dim=-1, keepdim=True)
    x = _as_float_array(logits, "logits")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class GaussianKernel:
    size: int
    sigma: float
    weights: np.ndarray

    def as_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.weights.copy())


def gaussian_kernel(size: int = DEFAULT_KERNEL_SIZE, sigma: float = DEFAULT_KERNEL_SIGMA) -> GaussianKernel:
    """Normalized, separable discrete Gaussian of odd ``size``."""
    if size < 1 or size % 2 == 0:
        raise ConfigurationError(f"kernel size must be a positive odd integer, got {size}")
    if not sigma > 0:
        raise ConfigurationError(f"kernel sigma must be positive, got {sigma}")
    half = size // 2
    offsets = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(offsets**2) / (2.0 * sigma**2))
    g /= g.sum()
    w = np.outer(g, g)
    w /= w.sum()
    w.setflags(write=False)
    return GaussianKernel(size=size, sigma=float(sigma), weights=w)


def identity_kernel() -> GaussianKernel:
    w = np.ones((1, 1))
    w.setflags(write=False)
    return GaussianKernel(size=1, sigma=1e-12, weights=w)


def gaussian_smooth(grid, kernel: GaussianKernel):
    """Convolve the trailing two axes with ``kernel`` using reflect padding.

    Leading axes are treated as a batch, so a stack of token maps can be
    smoothed in one call.
    """
    if _is_tensor(grid):
        h, w = grid.shape[-2:]
    else:
        grid = _as_float_array(grid, "map")
        if grid.ndim < 2:
            raise InvalidInputError("map must be at least 2-D")
        h, w = grid.shape[-2:]
    if kernel.size > min(h, w):
        raise ConfigurationError(f"kernel of size {kernel.size} does not fit a {h}x{w} map")
    pad = kernel.size // 2
    if kernel.size == 1:
        return grid * float(kernel.weights[0, 0])

    if _is_tensor(grid):
        lead = grid.shape[:-2]
        x = grid.reshape(-1, 1, h, w)
        x = F.pad(x, (pad, pad, pad, pad), mode="reflect")
        k = kernel.as_tensor().to(dtype=grid.dtype).reshape(1, 1, kernel.size, kernel.size)
        return F.conv2d(x, k).reshape(*lead, h, w)

    padded = np.pad(grid, [(0, 0)] * (grid.ndim - 2) + [(pad, pad), (pad, pad)], mode="reflect")
    out = np.zeros_like(grid)
    for i in range(kernel.size):
        for j in range(kernel.size):
            out += kernel.weights[i, j] * padded[..., i : i + h, j : j + w]
    return out


def minmax_normalize(seq) -> np.ndarray:
    """Rescale to [0, 1]. A constant sequence maps to all zeros."""
    x = _as_float_array(seq, "sequence").ravel()
    if x.size == 0:
        raise InvalidInputError("cannot normalize an empty sequence")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def cosine_similarity(a, b) -> float:
    a = _as_float_array(a, "a").ravel()
    b = _as_float_array(b, "b").ravel()
    if a.size == 0 or a.size != b.size:
        raise InvalidInputError(f"vectors must have equal positive length, got {a.size} and {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InvalidInputError("cosine similarity is undefined for a zero-norm vector")
    c = float(np.dot(a, b) / (na * nb))
    return max(-1.0, min(1.0, c))


def clamp(values, lo, hi):
    """Elementwise clip. ``lo``/``hi`` may be scalars or arrays broadcastable to ``values``."""
    if np.any(_to_numpy(lo) > _to_numpy(hi)):
        raise ConfigurationError("clamp bounds require lo <= hi")
    if _is_tensor(values):
        lo_t = lo if _is_tensor(lo) else torch.as_tensor(lo, dtype=values.dtype)
        hi_t = hi if _is_tensor(hi) else torch.as_tensor(hi, dtype=values.dtype)
        return torch.minimum(torch.maximum(values, lo_t), hi_t)
    return np.minimum(np.maximum(np.asarray(values, dtype=np.float64), lo), hi)


def sign(x):
    """Sign with sgn(0) = 0."""
    if _is_tensor(x):
        return torch.sign(x)
    return np.sign(x)
