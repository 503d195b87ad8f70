"""PFM and PNG image I/O plus sRGB transfer functions."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c: np.ndarray) -> np.ndarray:
    c = np.clip(np.asarray(c, dtype=np.float64), 0.0, 1.0)
    return np.where(c <= 0.0031308, c * 12.92, 1.055 * c ** (1 / 2.4) - 0.055)


def read_pfm(path) -> np.ndarray:
    """Read a PFM file into a float64 (H, W, 3) or (H, W) array, top row first."""
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file (header {header!r})")
        channels = 3 if header == b"PF" else 1
        dims = fh.readline().split()
        while not dims:
            dims = fh.readline().split()
        width, height = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        endian = "<" if scale < 0 else ">"
        data = np.frombuffer(fh.read(), dtype=endian + "f4")
    expected = width * height * channels
    if data.size != expected:
        raise ValueError(f"{path}: expected {expected} floats, found {data.size}")
    shape = (height, width, 3) if channels == 3 else (height, width)
    # PFM scanlines run bottom to top
    return np.flipud(data.reshape(shape)).astype(np.float64)


def write_pfm(path, image: np.ndarray) -> None:
    """Write a little-endian PFM (``PF`` for RGB, ``Pf`` for greyscale)."""
    img = np.asarray(image, dtype="<f4")
    if img.ndim == 3 and img.shape[2] == 3:
        header = b"PF"
    elif img.ndim == 2:
        header = b"Pf"
    else:
        raise ValueError(f"cannot write image of shape {img.shape} as PFM")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(np.flipud(img)).tobytes())


def read_png(path, srgb: bool = False) -> np.ndarray:
    """Read an 8/16-bit PNG as float64 in [0, 1]; RGB images get 3 channels."""
    with Image.open(path) as im:
        mode = im.mode
        if mode in ("I;16", "I;16B", "I"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        elif mode in ("L", "1"):
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        else:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return srgb_to_linear(arr) if srgb else arr


def write_png(path, image: np.ndarray, srgb: bool = False) -> None:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if srgb:
        img = linear_to_srgb(img)
    Image.fromarray(np.round(img * 255.0).astype(np.uint8)).save(path)


def read_image(path, srgb: bool = False) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    return read_png(path, srgb=srgb)


def read_mask(path) -> np.ndarray:
    """Single-channel mask; 8-bit values >= 128 are object."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr >= 128


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(path)

