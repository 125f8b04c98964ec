"""Flat weight files: an 8-byte little-endian header length, a UTF-8 JSON
header naming each block and its shape, then every block as little-endian
float64 in header order."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from disdiff.backend.toy import ToyBackend, ToyConfig
from disdiff.errors import InvalidInputError

FORMAT = "disdiff-toy-weights"
VERSION = 1


def save_weights(backend: ToyBackend, path) -> None:
    blocks = dict(backend.state_dict())
    blocks["alpha_bar"] = np.asarray(backend.alpha_bar)
    header = {
        "format": FORMAT,
        "version": VERSION,
        "config": backend.config_dict(),
        "blocks": [{"name": k, "shape": list(v.shape)} for k, v in blocks.items()],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for arr in blocks.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_weights(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise InvalidInputError(f"{path}: truncated weight file")
    (n,) = struct.unpack("<Q", data[:8])
    try:
        header = json.loads(data[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"{path}: bad header: {exc}") from None
    if header.get("format") != FORMAT:
        raise InvalidInputError(f"{path}: not a {FORMAT} file")
    offset = 8 + n
    blocks = {}
    for block in header["blocks"]:
        count = int(np.prod(block["shape"], dtype=np.int64))
        end = offset + 8 * count
        if end > len(data):
            raise InvalidInputError(f"{path}: block {block['name']} runs past end of file")
        blocks[block["name"]] = np.frombuffer(data[offset:end], dtype="<f8").reshape(block["shape"]).copy()
        offset = end
    if offset != len(data):
        raise InvalidInputError(f"{path}: {len(data) - offset} trailing bytes")
    return header, blocks


def load_weights(path) -> ToyBackend:
    import torch

    header, blocks = read_weights(path)
    alpha_bar = blocks.pop("alpha_bar")
    params = {k: torch.from_numpy(v) for k, v in blocks.items()}
    return ToyBackend(params, ToyConfig(**header["config"]), alpha_bar=alpha_bar)
