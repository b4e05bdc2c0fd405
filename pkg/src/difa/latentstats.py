"""W+ latent queues, the inter-domain shift between their centers, and channel masks."""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch

from difa.core import LayerRange, RangeError, ShapeError, StateError


class LatentQueue:
    """Bounded FIFO of W+ codes.

    The center is recomputed from the entries on demand, so it is a pure
    function of the queue contents (no accumulated running-sum drift).
    """

    def __init__(self, capacity: int, shape: tuple[int, int]):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = capacity
        self.shape = tuple(shape)
        self.entries: deque[torch.Tensor] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self.entries)

    def push(self, w: torch.Tensor) -> LatentQueue:
        if tuple(w.shape) != self.shape:
            raise ShapeError(f"queue holds codes of shape {self.shape}, got {tuple(w.shape)}")
        self.entries.append(w.detach().clone())
        return self

    def extend(self, codes: Iterable[torch.Tensor]) -> LatentQueue:
        for w in codes:
            self.push(w)
        return self

    @property
    def center(self) -> torch.Tensor:
        if not self.entries:
            raise StateError("latent queue is empty")
        return torch.stack(tuple(self.entries)).mean(dim=0)

    def as_tensor(self) -> torch.Tensor:
        """Entries stacked oldest-first, ``(len, L, D_w)``."""
        if not self.entries:
            return torch.zeros((0, *self.shape), dtype=torch.float64)
        return torch.stack(tuple(self.entries))

    @classmethod
    def from_tensor(cls, capacity: int, entries: torch.Tensor) -> LatentQueue:
        q = cls(capacity, tuple(entries.shape[1:]))
        return q.extend(entries)


def push(q: LatentQueue, w: torch.Tensor) -> LatentQueue:
    return q.push(w)


def compute_delta_w(q_a: LatentQueue, q_b: LatentQueue) -> torch.Tensor:
    """Center of ``q_b`` minus center of ``q_a``, outside any autograd graph."""
    if q_a.shape != q_b.shape:
        raise ShapeError(f"queue shapes differ: {q_a.shape} vs {q_b.shape}")
    if not len(q_a) or not len(q_b):
        raise StateError("compute_delta_w called before both queues received a code")
    return (q_b.center - q_a.center).detach()


def layers_for_ranges(layer_resolutions: Sequence[int], ranges: LayerRange = LayerRange()) -> list[int]:
    """Indices of the layers whose resolution falls in the coarse or middle interval."""
    return [i for i, r in enumerate(layer_resolutions) if ranges.contains(r)]


@dataclass(frozen=True)
class SelectionMask:
    values: torch.Tensor
    active_layers: tuple[int, ...]
    alpha: float

    @property
    def count(self) -> int:
        return int(self.values.sum().item())


def build_mask(delta_w: torch.Tensor, alpha: float, active_layers: Sequence[int]) -> SelectionMask:
    """Keep the ``floor(alpha * N)`` active entries with the smallest ``|delta_w|``.

    ``N`` counts entries in active layers only. Ties are broken towards the
    smaller flat index (layer-major, channel-minor); inactive layers are 0.
    """
    if not 0.0 <= alpha <= 1.0:
        raise RangeError(f"alpha must lie in [0, 1], got {alpha}")
    if delta_w.ndim != 2:
        raise ShapeError(f"delta_w must be (L, D_w), got {tuple(delta_w.shape)}")
    n_layers, width = delta_w.shape
    layers = sorted(set(int(i) for i in active_layers))
    if any(not 0 <= i < n_layers for i in layers):
        raise RangeError(f"active layers {layers} outside [0, {n_layers})")

    values = torch.zeros_like(delta_w, dtype=delta_w.dtype)
    if layers:
        magnitudes = delta_w.detach()[layers].abs().reshape(-1)
        keep = math.floor(alpha * magnitudes.numel())
        order = torch.sort(magnitudes, stable=True).indices[:keep]
        flat = torch.zeros_like(magnitudes)
        flat[order] = 1.0
        values[layers] = flat.reshape(len(layers), width)
    return SelectionMask(values, tuple(layers), float(alpha))


def dump_mask_csv(path: str | Path, iteration: int, delta_w: torch.Tensor, mask: SelectionMask) -> None:
    """Append ``iteration,layer,channel,abs_delta,mask`` rows for one iteration."""
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as f:
        writer = csv.writer(f)
        if new:
            writer.writerow(["iteration", "layer", "channel", "abs_delta", "mask"])
        mag = delta_w.detach().abs()
        for layer in range(mag.shape[0]):
            for ch in range(mag.shape[1]):
                writer.writerow([iteration, layer, ch, repr(float(mag[layer, ch])), int(mask.values[layer, ch])])
