"""Protection metrics over pluggable face detector and identity embedder."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from disdiff.errors import InvalidInputError
from disdiff.imageio import list_images, read_image
from disdiff.numerics import cosine_similarity


class Detector(Protocol):
    def detect(self, image: np.ndarray) -> bool: ...


class Embedder(Protocol):
    def embed(self, image: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class ToyDetector:
    """Reports a face when the central patch has enough luminance variation."""

    tau: float = 0.002
    patch: int = 4

    def detect(self, image) -> bool:
        img = np.asarray(image, dtype=np.float64)
        h, w = img.shape[:2]
        p = min(self.patch, h, w)
        y, x = (h - p) // 2, (w - p) // 2
        centre = img[y : y + p, x : x + p]
        luma = centre.mean(axis=-1) if centre.ndim == 3 else centre
        return bool(luma.var() > self.tau)


@dataclass(frozen=True)
class ToyEmbedder:
    """Block-average to a ``size`` x ``size`` grid, flatten, unit-normalize."""

    size: int = 8

    def embed(self, image) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        h, w = img.shape[:2]
        if h % self.size or w % self.size:
            raise InvalidInputError(f"image size {h}x{w} is not a multiple of {self.size}")
        blocks = img.reshape(self.size, h // self.size, self.size, w // self.size, -1).mean(axis=(1, 3))
        v = blocks.ravel()
        norm = np.linalg.norm(v)
        if norm == 0:
            raise InvalidInputError("cannot embed an all-black image")
        return v / norm


def fdfr(images, detector: Detector) -> float:
    images = list(images)
    if not images:
        raise InvalidInputError("face detection failure rate needs at least one image")
    missed = sum(1 for im in images if not detector.detect(im))
    return missed / len(images)


def mean_embedding(images, embedder: Embedder) -> np.ndarray:
    images = list(images)
    if not images:
        raise InvalidInputError("clean set is empty")
    mean = np.mean([embedder.embed(im) for im in images], axis=0)
    norm = np.linalg.norm(mean)
    if norm == 0:
        raise InvalidInputError("clean embeddings cancel out")
    return mean / norm


def similarities(images, reference: np.ndarray, embedder: Embedder) -> list[float]:
    return [cosine_similarity(embedder.embed(im), reference) for im in images]


def ism(images, clean_set, embedder: Embedder, detector: Detector | None = None) -> float | None:
    """Mean cosine similarity to the renormalized mean clean embedding.

    With a detector, images without a detected face are left out. Returns
    None when no image is left to score.
    """
    images = list(images)
    if not images:
        raise InvalidInputError("no images to score")
    if detector is not None:
        images = [im for im in images if detector.detect(im)]
    if not images:
        return None
    ref = mean_embedding(clean_set, embedder)
    return float(np.mean(similarities(images, ref, embedder)))


@dataclass
class EvalRow:
    image: str
    detected: bool | None
    similarity: float | None
    error: str | None = None


@dataclass
class EvalReport:
    fdfr: float
    ism: float | None
    n: int
    n_detected: int
    rows: list[EvalRow] = field(default_factory=list)

    @property
    def unreadable(self) -> list[str]:
        return [r.image for r in self.rows if r.error is not None]

    def summary(self) -> dict:
        return {"fdfr": self.fdfr, "ism": self.ism, "n": self.n}

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["image", "detected", "similarity"])
            for r in self.rows:
                detected = "" if r.detected is None else str(r.detected).lower()
                sim = "" if r.similarity is None else repr(r.similarity)
                w.writerow([r.image, detected, sim])

    def write_json(self, path) -> None:
        doc = self.summary() | {"n_detected": self.n_detected, "unreadable": self.unreadable}
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def evaluate(generated_dir, clean_dir, detector: Detector, embedder: Embedder) -> EvalReport:
    """Score every PNG in ``generated_dir`` against the clean identity.

    Files that fail to load appear in the rows with an error and do not
    count toward either rate.
    """
    paths = list_images(generated_dir)
    if not paths:
        raise InvalidInputError(f"no PNG images in {generated_dir}")
    clean_paths = list_images(clean_dir)
    if not clean_paths:
        raise InvalidInputError(f"no PNG images in {clean_dir}")
    ref = mean_embedding([read_image(p) for p in clean_paths], embedder)

    rows, detected_sims = [], []
    for p in paths:
        try:
            img = read_image(p)
        except InvalidInputError as exc:
            rows.append(EvalRow(p.name, None, None, str(exc)))
            continue
        found = detector.detect(img)
        sim = cosine_similarity(embedder.embed(img), ref) if found else None
        if found:
            detected_sims.append(sim)
        rows.append(EvalRow(p.name, found, sim))

    scored = [r for r in rows if r.error is None]
    if not scored:
        raise InvalidInputError(f"no readable images in {generated_dir}")
    n_detected = len(detected_sims)
    return EvalReport(
        fdfr=(len(scored) - n_detected) / len(scored),
        ism=float(np.mean(detected_sims)) if detected_sims else None,
        n=len(scored),
        n_detected=n_detected,
        rows=rows,
    )
