"""Interfaces for the three pretrained components used during adaptation."""

from __future__ import annotations

import copy
from typing import Sequence

import numpy as np
import torch
from torch import nn

from difa.core import ShapeError, fingerprint


class Generator(nn.Module):
    """Style-based generator: ``z -> W+ -> image``.

    Subclasses set ``z_dim``, ``num_layers``, ``w_dim``, ``layer_resolutions``
    and ``image_shape`` (C, H, W) and implement :meth:`mapping` and
    :meth:`synthesis`. Images are in [-1, 1].
    """

    z_dim: int
    num_layers: int
    w_dim: int
    layer_resolutions: tuple[int, ...]
    image_shape: tuple[int, int, int]

    def mapping(self, z: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def synthesis(self, wplus: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def mapping_parameters(self) -> list[nn.Parameter]:
        return []

    def generate(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 2 or z.shape[1] != self.z_dim or z.shape[0] < 1:
            raise ShapeError(f"expected z of shape (B>=1, {self.z_dim}), got {tuple(z.shape)}")
        return self.synthesis(self.mapping(z))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.generate(z)

    def check_wplus(self, wplus: torch.Tensor) -> None:
        if wplus.ndim != 3 or wplus.shape[1:] != (self.num_layers, self.w_dim):
            raise ShapeError(
                f"expected W+ codes of shape (B, {self.num_layers}, {self.w_dim}), "
                f"got {tuple(wplus.shape)}"
            )

    def freeze(self) -> Generator:
        self.requires_grad_(False)
        return self

    def weights(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.state_dict().items()}

    def load_weights(self, weights: dict[str, np.ndarray]) -> None:
        self.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in weights.items()})


class Encoder(nn.Module):
    """Feed-forward inversion into W+ space; always frozen, differentiable in its input."""

    image_shape: tuple[int, int, int]
    num_layers: int
    w_dim: int

    def invert(self, images: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def check_images(self, images: torch.Tensor) -> None:
        if images.ndim != 4 or tuple(images.shape[1:]) != tuple(self.image_shape):
            raise ShapeError(
                f"encoder expects images of shape (B, {', '.join(map(str, self.image_shape))}), "
                f"got {tuple(images.shape)}"
            )


class Embedder(nn.Module):
    """Joint image/text embedder with access to intermediate image tokens.

    ``embed_image`` and ``embed_text`` return unit-norm rows of width
    ``embed_dim``; ``extract_tokens(images, k)`` returns ``(B, n_k, D_t)``
    for ``1 <= k <= depth``.
    """

    embed_dim: int
    depth: int
    input_size: int
    vocabulary: Sequence[str]

    def embed_image(self, images: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def extract_tokens(self, images: torch.Tensor, k: int) -> torch.Tensor:
        raise NotImplementedError

    def embed_text(self, texts: Sequence[str]) -> torch.Tensor:
        raise NotImplementedError

    def vocabulary_embeddings(self) -> torch.Tensor:
        return self.embed_text(list(self.vocabulary))


def clone_generator(g: Generator) -> Generator:
    """Independent trainable copy of ``g`` with equal parameter values."""
    clone = copy.deepcopy(g)
    clone.requires_grad_(True)
    return clone


def parameter_hash(module: nn.Module) -> str:
    return fingerprint({k: v.detach().cpu().numpy() for k, v in module.state_dict().items()})
