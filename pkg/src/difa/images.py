"""PNG I/O and the single conversion point between 8-bit files and [-1, 1] tensors."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """``(B, 3, H, W)`` in [-1, 1] to ``(B, H, W, 3)`` uint8."""
    x = images.detach().cpu().double().numpy()
    x = np.nan_to_num(x, nan=-1.0)  # a diverged generator still yields a (black) image
    x = np.rint((x + 1.0) * 127.5).clip(0, 255).astype(np.uint8)
    return x.transpose(0, 2, 3, 1)


def from_uint8(pixels: np.ndarray) -> torch.Tensor:
    """``(B, H, W, 3)`` or ``(H, W, 3)`` uint8 to float64 ``(B, 3, H, W)`` in [-1, 1]."""
    if pixels.ndim == 3:
        pixels = pixels[None]
    x = pixels.astype(np.float64) / 127.5 - 1.0
    return torch.from_numpy(np.ascontiguousarray(x.transpose(0, 3, 1, 2)))


def quantize(images: torch.Tensor) -> torch.Tensor:
    """Round-trip through 8-bit, exactly as saving and reloading a PNG would."""
    return from_uint8(to_uint8(images))


def save_png(path: str | Path, image: torch.Tensor) -> None:
    if image.ndim == 3:
        image = image[None]
    Image.fromarray(to_uint8(image)[0]).save(path, format="PNG")


def load_png(path: str | Path) -> torch.Tensor:
    """Decode an image file to ``(1, 3, H, W)`` in [-1, 1]."""
    with Image.open(path) as im:
        return from_uint8(np.asarray(im.convert("RGB")))


def load_reference(path: str | Path, size: int) -> torch.Tensor:
    """Center-crop to a square, resize to ``size`` (bicubic) and map to [-1, 1]."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        w, h = im.size
        side = min(w, h)
        left, top = (w - side) // 2, (h - side) // 2
        im = im.crop((left, top, left + side, top + side))
        if side != size:
            im = im.resize((size, size), Image.BICUBIC)
        return from_uint8(np.asarray(im))


def save_grid(path: str | Path, images: torch.Tensor, rows: int = 2, cols: int = 4) -> None:
    if images.shape[0] != rows * cols:
        raise ValueError(f"grid of {rows}x{cols} needs {rows * cols} images, got {images.shape[0]}")
    tiles = to_uint8(images)
    h, w = tiles.shape[1:3]
    grid = tiles.reshape(rows, cols, h, w, 3).transpose(0, 2, 1, 3, 4).reshape(rows * h, cols * w, 3)
    Image.fromarray(grid).save(path, format="PNG")


def list_images(directory: str | Path) -> list[Path]:
    exts = {".png", ".jpg", ".jpeg", ".bmp"}
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in exts)
