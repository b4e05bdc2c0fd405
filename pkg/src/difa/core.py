"""Shared types, configuration, seeding and on-disk formats.

Embeddings, directions, token sets and W+ codes are plain tensors throughout
the package:

* embedding / direction: ``(D_e,)`` or batched ``(B, D_e)``
* token set: ``(n, D_t)`` or batched ``(B, n, D_t)``
* W+ code: ``(L, D_w)`` or batched ``(B, L, D_w)``
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

ONE_SHOT = "one-shot"
ZERO_SHOT = "zero-shot"
MODES = (ONE_SHOT, ZERO_SHOT)

# lambda_scc_max used when the config leaves it unset
DEFAULT_LAMBDA_SCC_MAX = {ONE_SHOT: 1.0, ZERO_SHOT: 4.0}


class ConfigError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class RangeError(ValueError):
    pass


class DegenerateError(ValueError):
    """A direction, token or mean collapsed to (numerically) zero norm."""


class NumericError(ArithmeticError):
    pass


class StateError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    pass


class CheckpointIOError(OSError):
    pass


def derive_seed(master: int, *path: str | int) -> int:
    """Derive an independent 63-bit seed for a named subsystem.

    The seed is the first 8 bytes (little-endian) of
    ``blake2b("<master>/<p0>/<p1>/...")`` with the top bit cleared, so
    ``derive_seed(7, "noise", 3)`` is stable across platforms and Python
    versions and unrelated to ``derive_seed(7, "noise", 4)``.
    """
    key = "/".join(str(p) for p in (master, *path)).encode()
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return int.from_bytes(digest, "little") & (2**63 - 1)


@dataclass(frozen=True)
class LayerRange:
    """Resolution intervals (inclusive) whose synthesis layers SCC may touch."""

    coarse: tuple[int, int] = (4, 8)
    middle: tuple[int, int] = (16, 32)

    def __post_init__(self):
        for lo, hi in (self.coarse, self.middle):
            if lo > hi:
                raise ConfigError(f"empty resolution interval [{lo}, {hi}]")
        if self.coarse[1] >= self.middle[0]:
            raise ConfigError("coarse and middle intervals must be disjoint and ordered")

    def contains(self, resolution: int) -> bool:
        return any(lo <= resolution <= hi for lo, hi in (self.coarse, self.middle))


@dataclass(frozen=True)
class AdaptConfig:
    alpha: float = 0.5
    lambda_local: float = 2.0
    lambda_scc_max: float | None = None
    warmup_iters: int = 0
    total_iters: int = 350
    token_layer: int = 4
    batch_size: int = 2
    learning_rate: float = 0.02
    queue_capacity: int = 64
    mean_embed_samples: int = 256
    seed: int = 0
    mode: str = ONE_SHOT
    n_vocab_words: int = 50
    freeze_mapping: bool = False
    grid_every: int = 50
    log_timing: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (0.0 <= self.alpha <= 1.0) or math.isnan(self.alpha):
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lambda_local < 0:
            raise ConfigError("lambda_local must be >= 0")
        if self.lambda_scc_max is not None and self.lambda_scc_max < 0:
            raise ConfigError("lambda_scc_max must be >= 0")
        if self.total_iters < 0:
            raise ConfigError("total_iters must be >= 0")
        if self.warmup_iters < 0:
            raise ConfigError("warmup_iters must be >= 0")
        if self.total_iters > 0 and self.warmup_iters >= self.total_iters:
            raise ConfigError(
                f"warmup_iters ({self.warmup_iters}) must be < total_iters ({self.total_iters})"
            )
        if self.token_layer < 1:
            raise ConfigError("token_layer must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.queue_capacity < 1:
            raise ConfigError("queue_capacity must be >= 1")
        if self.mean_embed_samples < 1:
            raise ConfigError("mean_embed_samples must be >= 1")
        if self.n_vocab_words < 1:
            raise ConfigError("n_vocab_words must be >= 1")
        if self.grid_every < 1:
            raise ConfigError("grid_every must be >= 1")

    @property
    def lambda_scc(self) -> float:
        """Effective maximum SCC weight for this mode."""
        if self.lambda_scc_max is None:
            return DEFAULT_LAMBDA_SCC_MAX[self.mode]
        return self.lambda_scc_max

    def replace(self, **changes) -> AdaptConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> AdaptConfig:
        unknown = sorted(set(data) - set(cls.field_names()))
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path: str | Path) -> AdaptConfig:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def fingerprint(weights: Mapping[str, np.ndarray]) -> str:
    """SHA-256 over names, dtypes, shapes and raw bytes of a parameter set."""
    h = hashlib.sha256()
    for name in sorted(weights):
        arr = np.ascontiguousarray(weights[name])
        h.update(name.encode())
        h.update(arr.dtype.str.encode())
        h.update(repr(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


@dataclass(eq=False)
class Checkpoint:
    """Generator weights plus everything needed to resume or re-sample.

    ``trainer_state`` carries optimizer moments and latent queue contents;
    it is empty for checkpoints that are not meant to be resumed.
    """

    generator_weights: dict[str, np.ndarray]
    config: AdaptConfig
    iteration: int
    source_fingerprint: str
    backbone: str = "toy"
    backbone_seed: int = 0
    trainer_state: dict[str, np.ndarray] = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.config == other.config
            and self.iteration == other.iteration
            and self.source_fingerprint == other.source_fingerprint
            and self.backbone == other.backbone
            and self.backbone_seed == other.backbone_seed
            and _bundles_equal(self.generator_weights, other.generator_weights)
            and _bundles_equal(self.trainer_state, other.trainer_state)
        )


def _bundles_equal(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> bool:
    if a.keys() != b.keys():
        return False
    for k in a:
        x, y = np.asarray(a[k]), np.asarray(b[k])
        if x.dtype != y.dtype or x.shape != y.shape or x.tobytes() != y.tobytes():
            return False
    return True


# Checkpoint container:
#   magic (8 bytes) | version (u32 LE) | section count (u32 LE)
#   per section: name length (u32 LE) | name (utf-8) | payload length (u64 LE) | payload
# Sections: config (canonical JSON), meta (JSON), then for each tensor bundle a
# "<bundle>.manifest" JSON list of {name, dtype, shape} followed by "<bundle>"
# holding the little-endian raw bytes concatenated in manifest order.
CHECKPOINT_MAGIC = b"DIFACKPT"
CHECKPOINT_VERSION = 1
_BUNDLES = ("weights", "state")


def _encode_bundle(bundle: Mapping[str, np.ndarray]) -> tuple[bytes, bytes]:
    manifest, blobs = [], []
    for name in sorted(bundle):
        arr = np.asarray(bundle[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        manifest.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(le).tobytes())
    return json.dumps(manifest, separators=(",", ":")).encode(), b"".join(blobs)


def _decode_bundle(manifest_raw: bytes, blob: bytes) -> dict[str, np.ndarray]:
    out, offset = {}, 0
    for entry in json.loads(manifest_raw):
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * math.prod(shape)
        if offset + nbytes > len(blob):
            raise CheckpointFormatError(f"tensor {entry['name']!r} truncated")
        arr = np.frombuffer(blob, dtype=dtype, count=math.prod(shape), offset=offset)
        out[entry["name"]] = arr.reshape(shape).astype(dtype.newbyteorder("="))
        offset += nbytes
    if offset != len(blob):
        raise CheckpointFormatError("trailing bytes after tensor data")
    return out


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    meta = {
        "iteration": ckpt.iteration,
        "source_fingerprint": ckpt.source_fingerprint,
        "backbone": ckpt.backbone,
        "backbone_seed": ckpt.backbone_seed,
    }
    sections = [
        ("config", ckpt.config.canonical_json().encode()),
        ("meta", json.dumps(meta, sort_keys=True).encode()),
    ]
    for name, bundle in zip(_BUNDLES, (ckpt.generator_weights, ckpt.trainer_state)):
        manifest, blob = _encode_bundle(bundle)
        sections += [(f"{name}.manifest", manifest), (name, blob)]

    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(sections))]
    for name, payload in sections:
        raw = name.encode()
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<Q", len(payload)), payload]
    try:
        with open(path, "wb") as f:
            f.write(b"".join(parts))
    except OSError as e:
        raise CheckpointIOError(e.errno, f"cannot write checkpoint {path}: {e.strerror}") from e


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    header = len(CHECKPOINT_MAGIC) + 8
    if len(data) < header or data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported checkpoint version {version}")

    sections, offset = {}, header
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", data, offset)
            offset += 4
            name = data[offset:offset + name_len].decode()
            offset += name_len
            (size,) = struct.unpack_from("<Q", data, offset)
            offset += 8
            if offset + size > len(data):
                raise CheckpointFormatError(f"{path}: section {name!r} truncated")
            sections[name] = data[offset:offset + size]
            offset += size
    except (struct.error, UnicodeDecodeError) as e:
        raise CheckpointFormatError(f"{path}: corrupt section table") from e
    if offset != len(data):
        raise CheckpointFormatError(f"{path}: trailing bytes")

    required = ["config", "meta"] + [s for b in _BUNDLES for s in (f"{b}.manifest", b)]
    missing = [s for s in required if s not in sections]
    if missing:
        raise CheckpointFormatError(f"{path}: missing section(s) {missing}")
    try:
        config = AdaptConfig.from_dict(json.loads(sections["config"]))
        meta = json.loads(sections["meta"])
        for key in ("iteration", "source_fingerprint", "backbone", "backbone_seed"):
            if key not in meta:
                raise CheckpointFormatError(f"{path}: meta lacks {key!r}")
    except (json.JSONDecodeError, ConfigError, TypeError) as e:
        raise CheckpointFormatError(f"{path}: bad config/meta: {e}") from e
    weights = _decode_bundle(sections["weights.manifest"], sections["weights"])
    state = _decode_bundle(sections["state.manifest"], sections["state"])
    return Checkpoint(
        generator_weights=weights,
        config=config,
        iteration=meta["iteration"],
        source_fingerprint=meta["source_fingerprint"],
        backbone=meta["backbone"],
        backbone_seed=meta["backbone_seed"],
        trainer_state=state,
    )


class MetricsLog:
    """Append-only JSON-lines log, one object per training iteration."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def write(self, record: Mapping[str, Any]) -> None:
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps(dict(record)) + "\n")

    def read(self) -> list[dict[str, Any]]:
        if not self.path.exists():
            return []
        with open(self.path, encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]
