"""Seeded image sets shared by the evaluation and acceptance tests."""

import numpy as np

from disdiff.imageio import toy_face, write_image

N_FACES = 5
FLAT_COLOURS = ((0.2, 0.4, 0.6), (0.9, 0.9, 0.9), (0.5, 0.3, 0.1))


def eval_fixture(root, seed=0):
    """Five toy faces and three flat colour cards, PNG-encoded.

    A flat card has zero variance everywhere, so a variance-threshold
    detector cannot fire on it; every face carries dark eye pixels on skin
    in the central patch. Expected: 5 detected, 3 missed.
    """
    gen = root / "generated"
    clean = root / "clean"
    gen.mkdir(parents=True)
    clean.mkdir(parents=True)
    rng = np.random.default_rng(seed)
    ident = int(rng.integers(2**32))
    for i in range(N_FACES):
        write_image(gen / f"img_{i:02d}.png", toy_face(rng, np.random.default_rng(ident)))
    for j, colour in enumerate(FLAT_COLOURS):
        write_image(gen / f"img_{N_FACES + j:02d}.png", np.broadcast_to(colour, (8, 8, 3)))
    for i in range(3):
        write_image(clean / f"clean_{i:02d}.png", toy_face(rng, np.random.default_rng(ident)))
    return gen, clean


def luma_variance_oracle(image, patch=4):
    h, w = image.shape[:2]
    y0, x0 = (h - patch) // 2, (w - patch) // 2
    vals = []
    for y in range(y0, y0 + patch):
        for x in range(x0, x0 + patch):
            vals.append(sum(float(c) for c in image[y, x]) / image.shape[2])
    mean = sum(vals) / len(vals)
    return sum((v - mean) ** 2 for v in vals) / len(vals)


def embed_oracle(image, size=8):
    h, w, c = image.shape
    by, bx = h // size, w // size
    out = []
    for i in range(size):
        for j in range(size):
            for ch in range(c):
                acc = 0.0
                for y in range(i * by, (i + 1) * by):
                    for x in range(j * bx, (j + 1) * bx):
                        acc += float(image[y, x, ch])
                out.append(acc / (by * bx))
    norm = sum(v * v for v in out) ** 0.5
    return [v / norm for v in out]
