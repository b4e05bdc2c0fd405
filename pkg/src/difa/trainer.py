"""One-shot / zero-shot adaptation loop and latent editing of real images."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from difa.backbones import Embedder, Encoder, Generator, clone_generator, generator_from_checkpoint
from difa.core import (
    ONE_SHOT,
    ZERO_SHOT,
    AdaptConfig,
    Checkpoint,
    DegenerateError,
    MetricsLog,
    NumericError,
    ShapeError,
    derive_seed,
    fingerprint,
    save_checkpoint,
)
from difa.images import save_grid
from difa.latentstats import LatentQueue, build_mask, compute_delta_w, dump_mask_csv, layers_for_ranges
from difa.losses import (
    DEGENERATE_SQ_NORM,
    LossBreakdown,
    attentive_style_loss,
    combine_losses,
    global_direction_loss,
    lambda_scc_schedule,
    scc_loss,
    weighted_total,
)

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)


class TrainingAborted(RuntimeError):
    pass


def sample_z(seed: int, n: int, z_dim: int) -> torch.Tensor:
    """Standard-normal noise; the first ``k`` rows do not depend on ``n``."""
    return torch.from_numpy(np.random.default_rng(seed).standard_normal((n, z_dim)))


@torch.no_grad()
def source_embeddings(generator: Generator, embedder: Embedder, n_samples: int, seed: int,
                      chunk: int = 64) -> torch.Tensor:
    z = sample_z(seed, n_samples, generator.z_dim)
    return torch.cat([embedder.embed_image(generator.generate(z[i:i + chunk]))
                      for i in range(0, n_samples, chunk)])


def estimate_source_embedding(generator: Generator, embedder: Embedder, n_samples: int, seed: int) -> torch.Tensor:
    """Unit-normalized mean embedding of ``n_samples`` source images."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    mean = source_embeddings(generator, embedder, n_samples, seed).mean(dim=0)
    norm_sq = float(mean @ mean)
    if norm_sq < DEGENERATE_SQ_NORM:
        raise DegenerateError("source embeddings average to ~zero; mean direction undefined")
    return mean / mean.norm()


@torch.no_grad()
def closest_words(embedder: Embedder, v_src: torch.Tensor, n_words: int) -> list[int]:
    """Indices of the ``n_words`` vocabulary entries most cosine-similar to ``v_src``.

    Sorted by decreasing similarity; ties keep vocabulary order.
    """
    if n_words < 1:
        raise ValueError("n_words must be >= 1")
    vocab = embedder.vocabulary_embeddings()
    if n_words > vocab.shape[0]:
        raise ValueError(f"n_words={n_words} exceeds vocabulary size {vocab.shape[0]}")
    sims = (vocab @ v_src) / (vocab.norm(dim=1) * v_src.norm())
    order = torch.sort(-sims, stable=True).indices
    return order[:n_words].tolist()


@torch.no_grad()
def prepare_domain_direction(embedder: Embedder, v_src: torch.Tensor, *, reference: torch.Tensor | None = None,
                             prompt: str | None = None, n_words: int = 50) -> torch.Tensor:
    """Target embedding minus source embedding.

    One-shot: ``embed(reference) - v_src``. Zero-shot: ``embed_text(prompt)``
    minus the plain mean of the ``n_words`` vocabulary embeddings closest to
    ``v_src``.
    """
    if (reference is None) == (prompt is None):
        raise ValueError("pass exactly one of reference or prompt")
    if reference is not None:
        if reference.ndim == 3:
            reference = reference[None]
        direction = embedder.embed_image(reference)[0] - v_src
    else:
        if not prompt or not prompt.strip():
            raise ValueError("prompt must be a non-empty string")
        target = embedder.embed_text([prompt])[0]
        idx = closest_words(embedder, v_src, n_words)
        words = [embedder.vocabulary[i] for i in idx]
        direction = target - embedder.embed_text(words).mean(dim=0)
    if float(direction @ direction) < DEGENERATE_SQ_NORM:
        raise DegenerateError(
            "target and source embeddings coincide; use a different reference image or prompt"
        )
    return direction


@dataclass
class AdaptSession:
    source: Generator
    generator: Generator
    encoder: Encoder
    embedder: Embedder
    cfg: AdaptConfig
    dir_dom: torch.Tensor
    target_tokens: torch.Tensor | None
    queue_a: LatentQueue
    queue_b: LatentQueue
    optimizer: torch.optim.Optimizer
    active_layers: list[int]
    backbone: str = "toy"
    backbone_seed: int = 0
    iteration: int = 0
    source_fingerprint: str = ""
    debug_dir: Path | None = None
    v_src: torch.Tensor | None = field(default=None, repr=False)

    @classmethod
    def create(cls, source: Generator, encoder: Encoder, embedder: Embedder, cfg: AdaptConfig, *,
               reference: torch.Tensor | None = None, prompt: str | None = None,
               backbone: str = "toy", backbone_seed: int | None = None,
               debug_dir: str | Path | None = None) -> AdaptSession:
        if cfg.mode == ONE_SHOT and reference is None:
            raise ValueError("one-shot adaptation needs a reference image")
        if cfg.mode == ZERO_SHOT and prompt is None:
            raise ValueError("zero-shot adaptation needs a text prompt")
        source.requires_grad_(False)
        encoder.requires_grad_(False)
        embedder.requires_grad_(False)

        v_src = estimate_source_embedding(source, embedder, cfg.mean_embed_samples,
                                          derive_seed(cfg.seed, "source-embedding"))
        target_tokens = None
        if cfg.mode == ONE_SHOT:
            if reference.ndim == 3:
                reference = reference[None]
            dir_dom = prepare_domain_direction(embedder, v_src, reference=reference)
            with torch.no_grad():
                target_tokens = embedder.extract_tokens(reference, cfg.token_layer)[0]
        else:
            dir_dom = prepare_domain_direction(embedder, v_src, prompt=prompt, n_words=cfg.n_vocab_words)

        generator = clone_generator(source)
        if cfg.freeze_mapping:
            for p in generator.mapping_parameters():
                p.requires_grad_(False)
        params = [p for p in generator.parameters() if p.requires_grad]
        optimizer = torch.optim.Adam(params, lr=cfg.learning_rate, betas=ADAM_BETAS, weight_decay=0.0)

        active = layers_for_ranges(source.layer_resolutions)
        if not active:
            log.warning("no synthesis layer in the coarse/middle ranges; SCC disabled")
        shape = (source.num_layers, source.w_dim)
        return cls(
            source=source, generator=generator, encoder=encoder, embedder=embedder, cfg=cfg,
            dir_dom=dir_dom, target_tokens=target_tokens,
            queue_a=LatentQueue(cfg.queue_capacity, shape), queue_b=LatentQueue(cfg.queue_capacity, shape),
            optimizer=optimizer, active_layers=active, backbone=backbone,
            backbone_seed=cfg.seed if backbone_seed is None else backbone_seed,
            source_fingerprint=fingerprint(source.weights()),
            debug_dir=Path(debug_dir) if debug_dir is not None else None,
            v_src=v_src,
        )

    @classmethod
    def resume(cls, ckpt: Checkpoint, source: Generator, encoder: Encoder, embedder: Embedder, *,
               reference: torch.Tensor | None = None, prompt: str | None = None,
               debug_dir: str | Path | None = None) -> AdaptSession:
        """Rebuild a session from a (partial) checkpoint written by :meth:`checkpoint`."""
        session = cls.create(source, encoder, embedder, ckpt.config, reference=reference, prompt=prompt,
                             backbone=ckpt.backbone, backbone_seed=ckpt.backbone_seed, debug_dir=debug_dir)
        if session.source_fingerprint != ckpt.source_fingerprint:
            raise ValueError("checkpoint was adapted from a different source generator")
        session.generator.load_weights(ckpt.generator_weights)
        state = ckpt.trainer_state
        if state:
            session.optimizer.load_state_dict(_optimizer_state(session.optimizer, state))
            cap = ckpt.config.queue_capacity
            session.queue_a = LatentQueue.from_tensor(cap, torch.from_numpy(state["queue_a"]))
            session.queue_b = LatentQueue.from_tensor(cap, torch.from_numpy(state["queue_b"]))
        session.iteration = ckpt.iteration
        return session

    def checkpoint(self) -> Checkpoint:
        state = {"queue_a": self.queue_a.as_tensor().numpy(), "queue_b": self.queue_b.as_tensor().numpy()}
        for idx, slots in self.optimizer.state_dict()["state"].items():
            for key, value in slots.items():
                state[f"optimizer.{idx}.{key}"] = torch.as_tensor(value).detach().cpu().numpy().copy()
        return Checkpoint(
            generator_weights=self.generator.weights(),
            config=self.cfg,
            iteration=self.iteration,
            source_fingerprint=self.source_fingerprint,
            backbone=self.backbone,
            backbone_seed=self.backbone_seed,
            trainer_state=state,
        )


def _optimizer_state(optimizer: torch.optim.Optimizer, state: dict[str, np.ndarray]) -> dict:
    slots: dict[int, dict] = {}
    for name, value in state.items():
        if not name.startswith("optimizer."):
            continue
        _, idx, key = name.split(".", 2)
        slots.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(value))
    sd = optimizer.state_dict()
    sd["state"] = slots
    return sd


def train_step(session: AdaptSession) -> LossBreakdown:
    """One optimizer step on the adapted generator; returns the loss terms."""
    cfg = session.cfg
    n_iter = session.iteration
    if n_iter >= cfg.total_iters:
        raise ValueError(f"iteration {n_iter} is past total_iters={cfg.total_iters}")
    z = sample_z(derive_seed(cfg.seed, "noise", n_iter), cfg.batch_size, session.source.z_dim)

    with torch.no_grad():
        img_a = session.source.generate(z)
        v_a = session.embedder.embed_image(img_a)
        w_a = session.encoder.invert(img_a)
    img_b = session.generator.generate(z)
    v_b = session.embedder.embed_image(img_b)
    loss_global = global_direction_loss(v_b, v_a, session.dir_dom, allow_collapsed=True).mean()

    if cfg.mode == ONE_SHOT:
        tokens_b = session.embedder.extract_tokens(img_b, cfg.token_layer)
        loss_local = attentive_style_loss(tokens_b, session.target_tokens).mean()
        lambda_local = cfg.lambda_local
    else:
        loss_local = torch.zeros((), dtype=loss_global.dtype)
        lambda_local = 0.0

    w_b = session.encoder.invert(img_b)
    saved = (list(session.queue_a.entries), list(session.queue_b.entries))
    try:
        session.queue_a.extend(w_a)
        session.queue_b.extend(w_b.detach())
        if session.active_layers:
            delta_w = compute_delta_w(session.queue_a, session.queue_b)
            mask = build_mask(delta_w, cfg.alpha, session.active_layers)
            loss_scc = scc_loss(w_b, w_a, mask.values).mean()
            if session.debug_dir is not None:
                dump_mask_csv(session.debug_dir / "mask.csv", n_iter, delta_w, mask)
        else:
            loss_scc = torch.zeros((), dtype=loss_global.dtype)

        lambda_scc = lambda_scc_schedule(n_iter, cfg)
        try:
            breakdown = combine_losses(loss_global.item(), loss_local.item(), loss_scc.item(),
                                       lambda_local, lambda_scc)
        except NumericError as e:
            raise TrainingAborted(f"iteration {n_iter}: {e}") from e
    except BaseException:
        session.queue_a.entries.clear()
        session.queue_a.entries.extend(saved[0])
        session.queue_b.entries.clear()
        session.queue_b.entries.extend(saved[1])
        raise

    total = weighted_total(loss_global, loss_local, loss_scc, lambda_local, lambda_scc)
    session.optimizer.zero_grad(set_to_none=True)
    total.backward()
    session.optimizer.step()
    session.iteration += 1
    return breakdown


def _probe_z(session: AdaptSession) -> torch.Tensor:
    return sample_z(derive_seed(session.cfg.seed, "probe"), 8, session.source.z_dim)


def write_grid(session: AdaptSession, path: str | Path) -> None:
    with torch.no_grad():
        save_grid(path, session.generator.generate(_probe_z(session)))


def run(session: AdaptSession, out_dir: str | Path | None = None,
        on_step: Callable[[AdaptSession, LossBreakdown], None] | None = None) -> Checkpoint:
    """Train until ``total_iters``, starting from ``session.iteration``.

    With ``out_dir`` set, appends to ``metrics.jsonl``, writes grids to
    ``grids/NNNN.png`` and the checkpoint to ``checkpoint.bin``. On any
    exception the partial checkpoint (completed steps only) is written
    before re-raising.
    """
    cfg = session.cfg
    metrics = grids = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        grids = out_dir / "grids"
        grids.mkdir(parents=True, exist_ok=True)
        metrics = MetricsLog(out_dir / "metrics.jsonl")
    try:
        while session.iteration < cfg.total_iters:
            n_iter = session.iteration
            if grids is not None and n_iter % cfg.grid_every == 0:
                write_grid(session, grids / f"{n_iter:04d}.png")
            start = time.perf_counter()
            breakdown = train_step(session)
            if metrics is not None:
                record = {"iteration": n_iter, **breakdown.as_record()}
                if cfg.log_timing:
                    record["wall_ms"] = (time.perf_counter() - start) * 1000.0
                metrics.write(record)
            if on_step is not None:
                on_step(session, breakdown)
    except BaseException:
        if out_dir is not None:
            save_checkpoint(out_dir / "checkpoint.bin", session.checkpoint())
        raise
    ckpt = session.checkpoint()
    if out_dir is not None:
        write_grid(session, grids / f"{session.iteration:04d}.png")
        save_checkpoint(out_dir / "checkpoint.bin", ckpt)
    return ckpt


@dataclass(frozen=True)
class EditDirection:
    """Latent edit: a ``(D_w,)`` vector for every layer or a full ``(L, D_w)`` matrix."""

    values: np.ndarray
    strength: float = 1.0

    @property
    def per_layer(self) -> bool:
        return self.values.ndim == 2

    def offset(self, num_layers: int, w_dim: int) -> torch.Tensor:
        v = torch.from_numpy(np.asarray(self.values, dtype=np.float64))
        if v.shape[-1] != w_dim or (self.per_layer and v.shape[0] != num_layers):
            expected = f"({num_layers}, {w_dim})" if self.per_layer else f"D_w={w_dim}"
            raise ShapeError(f"edit direction has shape {tuple(v.shape)}, expected {expected}")
        return self.strength * v.expand(num_layers, w_dim)


class EditFileError(ValueError):
    pass


def save_direction(path: str | Path, values: np.ndarray) -> None:
    """Plain text: ``global`` or ``per-layer``, then one row of floats per line."""
    values = np.asarray(values, dtype=np.float64)
    rows = values[None] if values.ndim == 1 else values
    lines = ["global" if values.ndim == 1 else "per-layer"]
    lines += [" ".join(repr(float(x)) for x in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_direction(path: str | Path) -> np.ndarray:
    lines = [(i, line.strip()) for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1)]
    lines = [(i, line) for i, line in lines if line]
    if not lines:
        raise EditFileError(f"{path}: line 1: empty direction file")
    kind_line, kind = lines[0]
    if kind not in ("global", "per-layer"):
        raise EditFileError(f"{path}: line {kind_line}: expected 'global' or 'per-layer', got {kind!r}")
    rows = []
    for lineno, line in lines[1:]:
        try:
            rows.append([float(tok) for tok in line.split()])
        except ValueError:
            raise EditFileError(f"{path}: line {lineno}: not a list of numbers") from None
        if rows[0] and len(rows[-1]) != len(rows[0]):
            raise EditFileError(f"{path}: line {lineno}: expected {len(rows[0])} values, got {len(rows[-1])}")
    if not rows:
        raise EditFileError(f"{path}: line {kind_line + 1}: missing direction values")
    if kind == "global" and len(rows) != 1:
        raise EditFileError(f"{path}: line {lines[2][0]}: a global direction has exactly one row")
    arr = np.array(rows, dtype=np.float64)
    return arr[0] if kind == "global" else arr


def edit_latent(wplus: torch.Tensor, edit: EditDirection) -> torch.Tensor:
    return wplus + edit.offset(wplus.shape[-2], wplus.shape[-1]).to(wplus.dtype)


@torch.no_grad()
def apply_edit(generator: Generator | Checkpoint, encoder: Encoder, image: torch.Tensor,
               edit: EditDirection) -> torch.Tensor:
    """Adapted-generator rendering of ``invert(image) + strength * direction``."""
    if isinstance(generator, Checkpoint):
        generator = generator_from_checkpoint(generator)
    if image.ndim == 3:
        image = image[None]
    return generator.synthesis(edit_latent(encoder.invert(image), edit))


def reconstruct(generator: Generator | Checkpoint, encoder: Encoder, image: torch.Tensor) -> torch.Tensor:
    return apply_edit(generator, encoder, image, EditDirection(np.zeros(encoder.w_dim), 0.0))
