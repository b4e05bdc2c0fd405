"""FID and KID between feature sets of synthesized and real images."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from difa.backbones import Embedder, Generator, generator_from_checkpoint
from difa.core import Checkpoint
from difa.images import load_png, quantize
from difa.trainer import sample_z


class SampleSizeError(ValueError):
    pass


class CompatibilityError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSet:
    features: np.ndarray
    extractor_id: str

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim == 1:
            f = f[:, None]
        if f.ndim != 2 or f.shape[0] < 1:
            raise ValueError(f"features must be (count >= 1, D), got shape {f.shape}")
        object.__setattr__(self, "features", f)

    @property
    def count(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def _check_pair(a: FeatureSet, b: FeatureSet) -> None:
    if a.extractor_id != b.extractor_id:
        raise CompatibilityError(f"feature sets come from different extractors: {a.extractor_id!r} vs {b.extractor_id!r}")
    if a.dim != b.dim:
        raise CompatibilityError(f"feature widths differ: {a.dim} vs {b.dim}")
    if a.count < 2 or b.count < 2:
        raise SampleSizeError(f"need at least 2 samples per set, got {a.count} and {b.count}")


def sqrtm_psd(s: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix by eigendecomposition.

    Negative eigenvalues (round-off on near-singular input) are clamped to
    zero; a warning is issued if any is larger than round-off.
    """
    s = (s + s.T) / 2
    vals, vecs = np.linalg.eigh(s)
    scale = max(float(np.abs(vals).max(initial=0.0)), 1e-300)
    if vals.min(initial=0.0) < -1e-8 * scale:
        warnings.warn(f"clamping negative eigenvalue {vals.min():.3e} in matrix square root", RuntimeWarning)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def sqrtm_product(sigma_a: np.ndarray, sigma_b: np.ndarray) -> np.ndarray:
    """A matrix ``M`` with ``M @ M = sigma_a @ sigma_b`` for PSD ``sigma_a``, ``sigma_b``.

    ``M = A^1/2 (A^1/2 B A^1/2)^1/2 A^-1/2``; the inner matrix is symmetric,
    so only symmetric eigendecompositions are needed.
    """
    root_a = sqrtm_psd(sigma_a)
    inner = sqrtm_psd(root_a @ sigma_b @ root_a)
    return root_a @ inner @ np.linalg.pinv(root_a, hermitian=True)


def trace_sqrt_product(sigma_a: np.ndarray, sigma_b: np.ndarray) -> float:
    """``trace((sigma_a sigma_b)^1/2)``, equal to the trace of the symmetric inner root."""
    root_a = sqrtm_psd(sigma_a)
    inner = root_a @ sigma_b @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    return float(np.sqrt(np.clip(vals, 0.0, None)).sum())


def fid(a: FeatureSet, b: FeatureSet) -> float:
    """Frechet distance between Gaussians fitted to two feature sets (sample statistics)."""
    _check_pair(a, b)
    mu_a, mu_b = a.features.mean(0), b.features.mean(0)
    sigma_a = np.atleast_2d(np.cov(a.features, rowvar=False))
    sigma_b = np.atleast_2d(np.cov(b.features, rowvar=False))
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(sigma_a) + np.trace(sigma_b)
                  - 2.0 * trace_sqrt_product(sigma_a, sigma_b))
    if value < 0.0:
        if value < -1e-6:
            warnings.warn(f"negative FID {value:.3e} clamped to 0", RuntimeWarning)
        value = 0.0
    return value


@dataclass(frozen=True)
class PolynomialKernel:
    degree: int = 3
    gamma: float | None = None  # None -> 1 / D
    coef0: float = 1.0

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        gamma = 1.0 / x.shape[1] if self.gamma is None else self.gamma
        return (gamma * (x @ y.T) + self.coef0) ** self.degree

    def describe(self) -> str:
        gamma = "1/D" if self.gamma is None else repr(self.gamma)
        return f"poly(degree={self.degree},gamma={gamma},coef0={self.coef0!r})"


@dataclass(frozen=True)
class LinearKernel:
    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return x @ y.T

    def describe(self) -> str:
        return "linear"


def _mmd2_unbiased(x: np.ndarray, y: np.ndarray, kernel: Callable) -> float:
    n, m = x.shape[0], y.shape[0]
    k_xx, k_yy, k_xy = kernel(x, x), kernel(y, y), kernel(x, y)
    sum_xx = k_xx.sum() - np.trace(k_xx)
    sum_yy = k_yy.sum() - np.trace(k_yy)
    return float(sum_xx / (n * (n - 1)) + sum_yy / (m * (m - 1)) - 2.0 * k_xy.mean())


def kid(a: FeatureSet, b: FeatureSet, kernel: Callable = PolynomialKernel(), *,
        n_subsets: int | None = None, subset_size: int | None = None, seed: int = 0) -> float:
    """Unbiased kernel MMD^2; may be negative.

    With ``n_subsets`` set, returns the mean over that many random subsets
    of ``subset_size`` (default: the smaller set size) drawn from each set.
    """
    _check_pair(a, b)
    if n_subsets is None:
        return _mmd2_unbiased(a.features, b.features, kernel)
    size = subset_size or min(a.count, b.count)
    if size < 2 or size > min(a.count, b.count):
        raise SampleSizeError(f"subset size {size} invalid for sets of {a.count} and {b.count}")
    rng = np.random.default_rng(seed)
    values = [
        _mmd2_unbiased(a.features[rng.choice(a.count, size, replace=False)],
                       b.features[rng.choice(b.count, size, replace=False)], kernel)
        for _ in range(n_subsets)
    ]
    return float(np.mean(values))


class ToyFeatureExtractor:
    """Pooled last-layer tokens of the toy embedder."""

    extractor_id = "toy-pooled"

    def __init__(self, embedder: Embedder):
        self.embedder = embedder

    @torch.no_grad()
    def __call__(self, images: torch.Tensor) -> np.ndarray:
        return self.embedder.pooled_features(images).cpu().numpy()


class InceptionFeatureExtractor:
    """2048-d pool features of torchvision's Inception-v3; weights must be supplied."""

    extractor_id = "inception-v3-pool3"

    def __init__(self, weights_path: str | Path | None = None):
        from torchvision.models import inception_v3

        model = inception_v3(weights=None, aux_logits=False, init_weights=weights_path is None)
        if weights_path is not None:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            model.load_state_dict({k: v for k, v in state.items() if not k.startswith("AuxLogits")})
        model.fc = torch.nn.Identity()
        self.model = model.eval().requires_grad_(False)

    @torch.no_grad()
    def __call__(self, images: torch.Tensor) -> np.ndarray:
        x = torch.nn.functional.interpolate(images.float(), size=(299, 299), mode="bilinear", align_corners=False)
        # torchvision's transform_input convention expects ImageNet-normalized input
        mean = torch.tensor([0.485, 0.456, 0.406])[None, :, None, None]
        std = torch.tensor([0.229, 0.224, 0.225])[None, :, None, None]
        x = ((x + 1) / 2 - mean) / std
        return self.model(x).double().numpy()


def _extract(extractor, images_iter) -> np.ndarray:
    return np.concatenate([extractor(batch) for batch in images_iter])


def sample_to_features(generator: Generator | Checkpoint, n: int, extractor, seed: int,
                       batch: int = 64) -> FeatureSet:
    """Features of ``n`` seeded samples, quantized to 8 bits as if saved to disk."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if isinstance(generator, Checkpoint):
        generator = generator_from_checkpoint(generator)
    z = sample_z(seed, n, generator.z_dim)

    def batches():
        with torch.no_grad():
            for i in range(0, n, batch):
                yield quantize(generator.generate(z[i:i + batch]))

    return FeatureSet(_extract(extractor, batches()), extractor.extractor_id)


def images_to_features(paths: Sequence[str | Path], extractor, batch: int = 64) -> FeatureSet:
    paths = list(paths)
    if not paths:
        raise SampleSizeError("no images given")

    def batches():
        for i in range(0, len(paths), batch):
            yield torch.cat([load_png(p) for p in paths[i:i + batch]])

    return FeatureSet(_extract(extractor, batches()), extractor.extractor_id)


def metric_report(metric: str, value: float, n_real: int, n_fake: int, extractor_id: str,
                  kernel: str | None = None) -> dict:
    report = {"metric": metric, "value": value, "n_real": n_real, "n_fake": n_fake,
              "extractor_id": extractor_id, "kernel": kernel}
    if metric == "kid":
        # published KID tables are commonly scaled by 1000
        report["value_x1000"] = value * 1000.0
    return report
