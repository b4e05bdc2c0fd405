"""Backbone interfaces, the toy stack and a name-keyed plug-in registry.

Registry roles: ``generator`` factories take the backbone seed, ``encoder``
factories take ``(generator, seed)`` (an encoder is fitted to or paired
with a source generator) and ``embedder`` factories take the seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from difa.backbones.base import Embedder, Encoder, Generator, clone_generator, parameter_hash
from difa.backbones.toy import ToyEmbedder, ToyEncoder, ToyGenerator, build_toy
from difa.core import Checkpoint, derive_seed

__all__ = [
    "Backbones", "BackboneUnavailable", "Embedder", "Encoder", "Generator", "ToyEmbedder",
    "ToyEncoder", "ToyGenerator", "build_toy", "clone_generator", "generator_from_checkpoint",
    "load_backbones", "parameter_hash", "register_backbone",
]


class BackboneUnavailable(LookupError):
    pass


@dataclass
class Backbones:
    generator: Generator
    encoder: Encoder
    embedder: Embedder
    name: str
    seed: int


_REGISTRY: dict[str, dict[str, Callable]] = {"generator": {}, "encoder": {}, "embedder": {}}


def register_backbone(role: str, name: str, factory: Callable) -> None:
    if role not in _REGISTRY:
        raise ValueError(f"unknown backbone role {role!r}")
    _REGISTRY[role][name] = factory


def _unavailable(name: str, what: str) -> Callable:
    def factory(*_args):
        raise BackboneUnavailable(
            f"{name!r} needs pretrained {what} weights which are not bundled; "
            f"register a factory with register_backbone(..., {name!r}, factory)"
        )
    return factory


def _clip_factory(name: str) -> Callable:
    def factory(_seed):
        from difa.backbones.clip import CLIPEmbedder

        try:
            return CLIPEmbedder.from_pretrained(name)
        except Exception as e:  # missing package, weights or network
            raise BackboneUnavailable(f"cannot load {name!r}: {e}") from e
    return factory


def _toy_generator(seed):
    return ToyGenerator(derive_seed(seed, "toy", "generator")).freeze()


def _toy_encoder(generator, seed):
    return ToyEncoder.fit(generator, seed=derive_seed(seed, "toy", "encoder"))


def _toy_embedder(seed):
    return ToyEmbedder(derive_seed(seed, "toy", "embedder"))


register_backbone("generator", "toy", _toy_generator)
register_backbone("encoder", "toy", _toy_encoder)
register_backbone("embedder", "toy", _toy_embedder)
register_backbone("generator", "stylegan2", _unavailable("stylegan2", "StyleGAN2"))
register_backbone("encoder", "e4e", _unavailable("e4e", "e4e encoder"))
register_backbone("encoder", "pSp", _unavailable("pSp", "pSp encoder"))
for _name in ("clip-vit-b16", "clip-vit-b32"):
    register_backbone("embedder", _name, _clip_factory(_name))


def _lookup(role: str, name: str) -> Callable:
    try:
        return _REGISTRY[role][name]
    except KeyError:
        known = ", ".join(sorted(_REGISTRY[role]))
        raise BackboneUnavailable(f"no {role} named {name!r} (known: {known})") from None


def load_generator(name: str, seed: int) -> Generator:
    return _lookup("generator", name)(seed)


def load_backbones(name: str = "toy", seed: int = 0, encoder: str | None = None,
                   embedder: str | None = None) -> Backbones:
    """Frozen source generator, encoder and embedder; encoder/embedder default to ``name``."""
    generator = load_generator(name, seed)
    enc = _lookup("encoder", encoder or name)(generator, seed)
    emb = _lookup("embedder", embedder or name)(seed)
    return Backbones(generator, enc, emb, name, seed)


def generator_from_checkpoint(ckpt: Checkpoint) -> Generator:
    """Rebuild the adapted generator stored in a checkpoint (frozen)."""
    g = load_generator(ckpt.backbone, ckpt.backbone_seed)
    g.load_weights(ckpt.generator_weights)
    return g.freeze()
