"""Deterministic miniature backbones for desk-scale runs and gradient checks.

Everything here is float64 and built from a seed; no pretrained assets.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from difa.backbones.base import Embedder, Encoder, Generator
from difa.core import RangeError, ShapeError, derive_seed

DTYPE = torch.float64

TOY_VOCABULARY = (
    "a", "an", "the", "photo", "painting", "sketch", "drawing", "render",
    "red", "green", "blue", "yellow", "orange", "purple", "pink", "brown",
    "black", "white", "gray", "gold", "silver", "cyan", "magenta", "teal",
    "bright", "dark", "pale", "vivid", "warm", "cold", "soft", "sharp",
    "shape", "circle", "square", "stripe", "dot", "blob", "grid", "wave",
    "smooth", "rough", "noisy", "glossy", "matte", "furry", "metal", "glass",
    "cat", "dog", "tiger", "fox", "wolf", "face", "car", "church",
    "style", "texture", "pattern", "color", "light", "shadow", "pixel", "art",
)


def _randn(gen: torch.Generator, *shape: int, scale: float = 1.0) -> torch.Tensor:
    return torch.randn(*shape, generator=gen, dtype=DTYPE) * scale


def _torch_gen(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed % (2**63))


class ToyGenerator(Generator):
    """Four-layer style-based generator with a 4x4 constant input.

    Mapping: two affine layers with a tanh in between, broadcast to every
    synthesis layer. Synthesis layer ``l`` runs at resolution ``4 * 2**l``:
    the style (channels ``1:`` of its code) scales the feature maps before a
    3x3 convolution and tanh; each layer adds a to-RGB skip. Channel 0 of
    every layer code is a brightness control: its layer mean, times a fixed
    positive gain, is added to all pixels before the output tanh, so mean
    brightness is strictly increasing in it.

    Weights are stored with unit variance and scaled by ``1/sqrt(fan_in)``
    in the forward pass (equalized learning rate), so an optimizer step has
    the same relative effect on every layer.
    """

    def __init__(self, seed: int = 0, z_dim: int = 8, w_dim: int = 8, channels: int = 8,
                 hidden: int = 16, brightness_gain: float = 1.0):
        super().__init__()
        self.z_dim = z_dim
        self.w_dim = w_dim
        self.num_layers = 4
        self.layer_resolutions = (4, 8, 16, 32)
        self.image_shape = (3, 32, 32)
        self.channels = channels
        self._map1_gain = 1 / math.sqrt(z_dim)
        self._map2_gain = 1 / math.sqrt(hidden)
        self._style_gain = 0.5 / math.sqrt(w_dim - 1)
        self._conv_gain = 1 / math.sqrt(9 * channels)
        self._rgb_gain = 0.5 / math.sqrt(channels)

        g = _torch_gen(seed)
        self.map1 = nn.Parameter(_randn(g, hidden, z_dim))
        self.map1_b = nn.Parameter(_randn(g, hidden, scale=0.1))
        self.map2 = nn.Parameter(_randn(g, w_dim, hidden))
        self.map2_b = nn.Parameter(_randn(g, w_dim, scale=0.1))
        self.const = nn.Parameter(_randn(g, channels, 4, 4))
        self.style_w = nn.ParameterList()
        self.style_b = nn.ParameterList()
        self.conv_w = nn.ParameterList()
        self.conv_b = nn.ParameterList()
        self.rgb_w = nn.ParameterList()
        self.rgb_b = nn.ParameterList()
        for _ in range(self.num_layers):
            self.style_w.append(nn.Parameter(_randn(g, channels, w_dim - 1)))
            self.style_b.append(nn.Parameter(torch.ones(channels, dtype=DTYPE)))
            self.conv_w.append(nn.Parameter(_randn(g, channels, channels, 3, 3)))
            self.conv_b.append(nn.Parameter(_randn(g, channels, scale=0.1)))
            self.rgb_w.append(nn.Parameter(_randn(g, 3, channels)))
            self.rgb_b.append(nn.Parameter(_randn(g, 3, scale=0.1)))
        self.register_buffer("brightness_gain", torch.tensor(brightness_gain, dtype=DTYPE))

    def mapping_parameters(self) -> list[nn.Parameter]:
        return [self.map1, self.map1_b, self.map2, self.map2_b]

    def mapping(self, z: torch.Tensor) -> torch.Tensor:
        h = torch.tanh(z @ (self._map1_gain * self.map1).T + self.map1_b)
        w = h @ (self._map2_gain * self.map2).T + self.map2_b
        return w[:, None, :].expand(-1, self.num_layers, -1)

    def synthesis(self, wplus: torch.Tensor) -> torch.Tensor:
        self.check_wplus(wplus)
        size = self.image_shape[1]
        x = self.const.expand(wplus.shape[0], -1, -1, -1)
        rgb = 0
        for l, res in enumerate(self.layer_resolutions):
            if x.shape[-1] != res:
                x = F.interpolate(x, size=(res, res), mode="nearest")
            style = wplus[:, l, 1:] @ (self._style_gain * self.style_w[l]).T + self.style_b[l]
            x = F.conv2d(x * style[:, :, None, None], self._conv_gain * self.conv_w[l], self.conv_b[l], padding=1)
            x = torch.tanh(x)
            y = torch.einsum("oc,bchw->bohw", self._rgb_gain * self.rgb_w[l], x)
            y = y + self.rgb_b[l][None, :, None, None]
            rgb = rgb + F.interpolate(y, size=(size, size), mode="nearest")
        brightness = self.brightness_gain * wplus[:, :, 0].mean(dim=1)
        return torch.tanh(rgb + brightness[:, None, None, None])


class ToyEncoder(Encoder):
    """Affine map from flattened pixels to W+ codes.

    :meth:`fit` solves a ridge regression from generated images to their
    W+ codes, giving an approximate (lossy) left inverse of a generator.
    """

    def __init__(self, image_shape=(3, 32, 32), num_layers: int = 4, w_dim: int = 8):
        super().__init__()
        self.image_shape = tuple(image_shape)
        self.num_layers = num_layers
        self.w_dim = w_dim
        n_in = math.prod(self.image_shape)
        self.weight = nn.Parameter(torch.zeros(n_in, num_layers * w_dim, dtype=DTYPE), requires_grad=False)
        self.bias = nn.Parameter(torch.zeros(num_layers * w_dim, dtype=DTYPE), requires_grad=False)

    @classmethod
    @torch.no_grad()
    def fit(cls, generator: Generator, seed: int = 0, n_samples: int = 512, ridge: float = 1.0) -> ToyEncoder:
        enc = cls(generator.image_shape, generator.num_layers, generator.w_dim)
        z = torch.from_numpy(np.random.default_rng(seed).standard_normal((n_samples, generator.z_dim)))
        codes = generator.mapping(z)
        x = generator.synthesis(codes).reshape(n_samples, -1)
        y = codes.reshape(n_samples, -1)
        x_mean, y_mean = x.mean(0), y.mean(0)
        xc, yc = x - x_mean, y - y_mean
        # dual-form ridge: A = Xc^T (Xc Xc^T + r I)^-1 Yc
        gram = xc @ xc.T + ridge * torch.eye(n_samples, dtype=DTYPE)
        weight = xc.T @ torch.linalg.solve(gram, yc)
        enc.weight.copy_(weight)
        enc.bias.copy_(y_mean - x_mean @ weight)
        return enc

    def invert(self, images: torch.Tensor) -> torch.Tensor:
        self.check_images(images)
        codes = images.reshape(images.shape[0], -1) @ self.weight + self.bias
        return codes.reshape(-1, self.num_layers, self.w_dim)


class ToyEmbedder(Embedder):
    """Patch-token image encoder plus a lookup-table text encoder.

    Token layers (32x32 input, 8x8 patches):

    ====  ======================================  ======
    k     operation                               tokens
    ====  ======================================  ======
    1     per-patch affine + tanh                 16
    2     residual per-token affine + tanh        16
    3     merge 2x2 neighbours, affine + tanh     4
    4     residual per-token affine + tanh        4
    ====  ======================================  ======

    The image embedding is the token mean of layer 4, projected to
    ``embed_dim`` and L2-normalized. A text is the normalized sum of its
    whitespace-separated word vectors; words outside the vocabulary get a
    vector seeded from the word itself.
    """

    def __init__(self, seed: int = 0, token_dim: int = 16, embed_dim: int = 16,
                 vocabulary: Sequence[str] = TOY_VOCABULARY, word_vectors: torch.Tensor | None = None):
        super().__init__()
        self.seed = seed
        self.image_shape = (3, 32, 32)
        self.input_size = 32
        self.patch = 8
        self.token_dim = token_dim
        self.embed_dim = embed_dim
        self.depth = 4
        g = _torch_gen(seed)
        d = token_dim
        patch_dim = 3 * self.patch * self.patch
        self.w1 = nn.Parameter(_randn(g, d, patch_dim, scale=1 / math.sqrt(patch_dim)))
        self.b1 = nn.Parameter(_randn(g, d, scale=0.1))
        self.w2 = nn.Parameter(_randn(g, d, d, scale=1 / math.sqrt(d)))
        self.b2 = nn.Parameter(_randn(g, d, scale=0.1))
        self.w3 = nn.Parameter(_randn(g, d, 4 * d, scale=1 / math.sqrt(4 * d)))
        self.b3 = nn.Parameter(_randn(g, d, scale=0.1))
        self.w4 = nn.Parameter(_randn(g, d, d, scale=1 / math.sqrt(d)))
        self.b4 = nn.Parameter(_randn(g, d, scale=0.1))
        self.proj = nn.Parameter(_randn(g, embed_dim, d, scale=1 / math.sqrt(d)))
        self.proj_b = nn.Parameter(_randn(g, embed_dim, scale=0.1))

        self.vocabulary = tuple(vocabulary)
        if word_vectors is None:
            word_vectors = F.normalize(_randn(g, len(self.vocabulary), embed_dim), dim=1)
        word_vectors = torch.as_tensor(word_vectors, dtype=DTYPE)
        if word_vectors.shape != (len(self.vocabulary), embed_dim):
            raise ShapeError(f"word_vectors must be ({len(self.vocabulary)}, {embed_dim})")
        self.word_vectors = nn.Parameter(word_vectors.clone(), requires_grad=False)
        self._word_index = {w: i for i, w in enumerate(self.vocabulary)}
        self.requires_grad_(False)

    def _check(self, images: torch.Tensor) -> None:
        if images.ndim != 4 or tuple(images.shape[1:]) != self.image_shape:
            raise ShapeError(f"embedder expects images (B, 3, 32, 32), got {tuple(images.shape)}")

    def _tokens(self, images: torch.Tensor, upto: int) -> torch.Tensor:
        self._check(images)
        b, p = images.shape[0], self.patch
        grid = self.image_shape[1] // p
        patches = images.unfold(2, p, p).unfold(3, p, p)  # b, c, gh, gw, p, p
        patches = patches.permute(0, 2, 3, 1, 4, 5).reshape(b, grid * grid, -1)
        t = torch.tanh(patches @ self.w1.T + self.b1)
        if upto == 1:
            return t
        t = t + torch.tanh(t @ self.w2.T + self.b2)
        if upto == 2:
            return t
        d = self.token_dim
        t = t.reshape(b, grid // 2, 2, grid // 2, 2, d).permute(0, 1, 3, 2, 4, 5).reshape(b, (grid // 2) ** 2, 4 * d)
        t = torch.tanh(t @ self.w3.T + self.b3)
        if upto == 3:
            return t
        return t + torch.tanh(t @ self.w4.T + self.b4)

    def extract_tokens(self, images: torch.Tensor, k: int) -> torch.Tensor:
        if not 1 <= k <= self.depth:
            raise RangeError(f"token layer must be in [1, {self.depth}], got {k}")
        return self._tokens(images, k)

    def pooled_features(self, images: torch.Tensor) -> torch.Tensor:
        return self._tokens(images, self.depth).mean(dim=1)

    def embed_image(self, images: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.pooled_features(images) @ self.proj.T + self.proj_b, dim=1)

    def word_vector(self, word: str) -> torch.Tensor:
        idx = self._word_index.get(word)
        if idx is not None:
            return self.word_vectors[idx]
        g = _torch_gen(derive_seed(self.seed, "word", word))
        return F.normalize(_randn(g, self.embed_dim), dim=0)

    def embed_text(self, texts: Sequence[str]) -> torch.Tensor:
        if isinstance(texts, str):
            raise TypeError("embed_text expects a sequence of strings")
        rows = []
        for text in texts:
            words = text.split()
            if not words:
                raise ValueError("cannot embed an empty text")
            rows.append(torch.stack([self.word_vector(w) for w in words]).sum(0))
        return F.normalize(torch.stack(rows), dim=1)


def build_toy(seed: int = 0) -> tuple[ToyGenerator, ToyEncoder, ToyEmbedder]:
    """Source generator (frozen), its fitted encoder and an embedder."""
    generator = ToyGenerator(derive_seed(seed, "toy", "generator")).freeze()
    encoder = ToyEncoder.fit(generator, seed=derive_seed(seed, "toy", "encoder"))
    embedder = ToyEmbedder(derive_seed(seed, "toy", "embedder"))
    return generator, encoder, embedder
