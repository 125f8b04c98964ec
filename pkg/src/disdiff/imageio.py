"""PNG ingestion/persistence and seeded toy fixtures."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from disdiff.errors import InvalidInputError

IMAGE_SUFFIXES = (".png",)


def read_image(path) -> np.ndarray:
    """8-bit RGB PNG to an HxWx3 float64 array in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise InvalidInputError(f"cannot read image {path}: {exc}") from None
    return arr.astype(np.float64) / 255.0


def quantize(image) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    return np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_image(path, image) -> None:
    Image.fromarray(quantize(image), mode="RGB").save(path, format="PNG", optimize=False, compress_level=6)


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise InvalidInputError(f"not a directory: {directory}")
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def load_dir(directory) -> tuple[list[Path], list[np.ndarray]]:
    paths = list_images(directory)
    return paths, [read_image(p) for p in paths]


def toy_face(rng: np.random.Generator, identity: np.random.Generator | None = None, size: int = 8) -> np.ndarray:
    """A small face-like image: skin-toned oval with darker eyes on a plain background.

    ``identity`` fixes the per-subject traits (skin tone, eye spacing); ``rng``
    drives per-photo variation (background, lighting, jitter).
    """
    ident = identity if identity is not None else rng
    skin = ident.uniform([0.55, 0.35, 0.25], [0.95, 0.75, 0.6])
    eye_gap = int(ident.integers(1, 3))
    background = rng.uniform(0.05, 0.95, size=3)
    light = rng.uniform(0.85, 1.1)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2 + rng.uniform(-0.4, 0.4, size=2)
    oval = ((yy - c[0]) / (size * 0.42)) ** 2 + ((xx - c[1]) / (size * 0.34)) ** 2 <= 1.0
    img = np.where(oval[..., None], skin * light, background)
    eye_row = size // 2 - 1
    mid = size // 2
    for col in (mid - eye_gap, mid + eye_gap - 1):
        img[eye_row, col] = skin * 0.25
    img[size // 2 + 2, mid - 1 : mid + 1] = skin * 0.5
    img = img + rng.normal(0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def make_fixture(out_dir, n_clean: int = 4, n_protect: int = 4, n_class: int = 4, seed: int = 0) -> dict[str, Path]:
    """Write a seeded subject (clean + protect split) and class image set as PNGs."""
    root = Path(out_dir)
    rng = np.random.default_rng(seed)
    subject_seed = int(rng.integers(2**32))
    dirs = {}
    for name, count, shared in (("clean", n_clean, True), ("protect", n_protect, True), ("class", n_class, False)):
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            ident = np.random.default_rng(subject_seed) if shared else None
            write_image(d / f"{name}_{i:02d}.png", toy_face(rng, ident))
        dirs[name] = d
    return dirs
