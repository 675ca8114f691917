"""Gradient sign-map rendering: per-pixel sign of an input gradient mapped
to a three-level image (-1 -> 0, 0 -> 128, +1 -> 255) and written as binary
PGM (one per channel) plus a merged binary PPM when there are 3 channels.

The zero-gradient level sits at 128: the natural midpoint 0.5 would be
127.5 in 8-bit output, which rounds ambiguously, so 128 is fixed once and
tested bit-exactly.
"""

import os
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import ShapeMismatchError

_LEVELS = {-1: 0, 0: 128, 1: 255}


@dataclass
class SignMap:
    """(H,W,C) int8 array over {-1, 0, +1}."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int8)
        if self.values.ndim != 3:
            raise ShapeMismatchError(f"sign map must be (H,W,C), got {self.values.shape}")
        if not np.isin(self.values, (-1, 0, 1)).all():
            raise ValueError("sign map values must lie in {-1, 0, +1}")

    def to_pixels(self) -> np.ndarray:
        px = np.empty(self.values.shape, dtype=np.uint8)
        for sign, level in _LEVELS.items():
            px[self.values == sign] = level
        return px


def sign_map(grad) -> SignMap:
    """Per-pixel sign of an (H,W,C) gradient."""
    arr = grad.data if isinstance(grad, Tensor) else np.asarray(grad)
    if arr.ndim != 3:
        raise ShapeMismatchError(f"gradient must have image shape (H,W,C), got {arr.shape}")
    return SignMap(np.sign(arr).astype(np.int8))


def sign_entropy(sm: SignMap) -> float:
    """Entropy in bits of the empirical {-1,0,+1} distribution over one map."""
    counts = np.array([(sm.values == s).sum() for s in (-1, 0, 1)], dtype=np.float64)
    p = counts / counts.sum()
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def per_pixel_sign_entropy(maps) -> float:
    """Mean over pixels of the sign entropy across a set of maps.

    This is the dispersion statistic for comparing concealed vs vanilla
    gradients: a vanilla model produces spatially structured signs that
    repeat across images (low per-pixel entropy), while a concealed model
    flips each pixel pseudo-randomly per image (entropy near 1 bit).
    """
    maps = list(maps)
    if not maps:
        raise ValueError("need at least one sign map")
    stack = np.stack([m.values for m in maps])        # (M,H,W,C)
    m = float(stack.shape[0])
    h = np.zeros(stack.shape[1:], dtype=np.float64)
    for s in (-1, 0, 1):
        p = (stack == s).sum(axis=0) / m
        nz = p > 0
        h[nz] -= p[nz] * np.log2(p[nz])
    return float(h.mean())


def write_pgm(pixels: np.ndarray, path) -> None:
    """Binary PGM (P5), 8-bit grayscale."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 2:
        raise ShapeMismatchError(f"pgm wants (H,W), got {pixels.shape}")
    h, w = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def write_ppm(pixels: np.ndarray, path) -> None:
    """Binary PPM (P6), 8-bit RGB."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeMismatchError(f"ppm wants (H,W,3), got {pixels.shape}")
    h, w, _ = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def render_sign_map(grad, out_path) -> list:
    """Render a gradient's sign map to image files and return the paths.

    Single-channel gradients produce one PGM at out_path (given a .pgm
    suffix if missing). Three-channel gradients produce one PGM per channel
    (suffixes _r/_g/_b) plus the merged PPM.
    """
    sm = sign_map(grad)
    px = sm.to_pixels()
    out_path = str(out_path)
    base, ext = os.path.splitext(out_path)
    written = []
    if px.shape[2] == 1:
        path = out_path if ext == ".pgm" else base + ".pgm"
        write_pgm(px[:, :, 0], path)
        written.append(path)
    elif px.shape[2] == 3:
        for i, tag in enumerate("rgb"):
            path = f"{base}_{tag}.pgm"
            write_pgm(px[:, :, i], path)
            written.append(path)
        path = out_path if ext == ".ppm" else base + ".ppm"
        write_ppm(px, path)
        written.append(path)
    else:
        for i in range(px.shape[2]):
            path = f"{base}_c{i}.pgm"
            write_pgm(px[:, :, i], path)
            written.append(path)
    return written
