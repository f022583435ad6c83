"""PNG and run-length mask helpers shared by the pipeline stages."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def read_rgb(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_rgb(path: str | Path, pixels: np.ndarray) -> None:
    Image.fromarray(np.asarray(pixels, dtype=np.uint8), mode="RGB").save(path, format="PNG")


def read_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) > 127).astype(np.uint8)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def write_gray(path: str | Path, values: np.ndarray) -> None:
    """Write a [0,1] float map as an 8-bit grayscale PNG."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(v * 255).astype(np.uint8), mode="L").save(path, format="PNG")


def rle_encode(mask: np.ndarray) -> dict:
    """Row-major run lengths, starting with a run of zeros (possibly empty)."""
    flat = (np.asarray(mask).ravel() > 0).astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        counts = [0] + counts
    return {"size": list(np.asarray(mask).shape), "counts": counts}


def rle_decode(rle: dict) -> np.ndarray:
    shape = tuple(rle["size"])
    flat = np.zeros(int(np.prod(shape)), dtype=np.uint8)
    pos, val = 0, 0
    for c in rle["counts"]:
        if val:
            flat[pos : pos + c] = 1
        pos += c
        val ^= 1
    if pos != flat.size:
        raise ValueError(f"RLE covers {pos} pixels, expected {flat.size}")
    return flat.reshape(shape)
