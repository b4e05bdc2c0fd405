"""Adaptation losses: global direction, attentive style, selective consistency."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from difa.core import ZERO_SHOT, AdaptConfig, ConfigError, DegenerateError, NumericError, RangeError, ShapeError

# threshold on squared norms below which a direction counts as collapsed
DEGENERATE_SQ_NORM = 1e-12
# tokens with a smaller norm than this have no defined direction
TOKEN_MIN_NORM = 1e-12


def global_direction_loss(v_b: torch.Tensor, v_a: torch.Tensor, dir_dom: torch.Tensor,
                          *, allow_collapsed: bool = False) -> torch.Tensor:
    """``1 - cos(v_b - v_a, dir_dom)``, per row if inputs are batched.

    With ``allow_collapsed`` a (near-)zero sample shift is not an error: its
    norm is clamped to ``sqrt(DEGENERATE_SQ_NORM)``, so the loss is 1 and the
    gradient points along ``dir_dom``. That is the state of a freshly cloned
    generator, where adapted and source images coincide.
    """
    shift = v_b - v_a
    if shift.shape[-1] != dir_dom.shape[-1]:
        raise ShapeError(f"embedding width {shift.shape[-1]} != direction width {dir_dom.shape[-1]}")
    dom_sq = (dir_dom * dir_dom).sum(-1)
    if torch.any(dom_sq < DEGENERATE_SQ_NORM):
        raise DegenerateError("domain direction has ~zero norm (reference matches the source domain)")
    shift_sq = (shift * shift).sum(-1)
    if not allow_collapsed and torch.any(shift_sq < DEGENERATE_SQ_NORM):
        raise DegenerateError("sample shift direction has ~zero norm (collapsed sample)")
    denom = torch.sqrt(shift_sq.clamp_min(DEGENERATE_SQ_NORM)) * torch.sqrt(dom_sq)
    return 1.0 - (shift * dir_dom).sum(-1) / denom


def _unit_tokens(tokens: torch.Tensor) -> torch.Tensor:
    norms = tokens.norm(dim=-1, keepdim=True)
    if torch.any(norms < TOKEN_MIN_NORM):
        raise DegenerateError("token set contains a zero-norm token")
    return tokens / norms


def cost_matrix(f_b: torch.Tensor, f_tar: torch.Tensor) -> torch.Tensor:
    """Cosine distances ``C[i, j] = 1 - cos(f_b[i], f_tar[j])``; batched over leading dims of ``f_b``."""
    if f_b.shape[-1] != f_tar.shape[-1]:
        raise ShapeError(f"token widths differ: {f_b.shape[-1]} vs {f_tar.shape[-1]}")
    if f_b.shape[-2] < 1 or f_tar.shape[-2] < 1:
        raise ShapeError("token sets must be non-empty")
    return 1.0 - _unit_tokens(f_b) @ _unit_tokens(f_tar).transpose(-1, -2)


def _min_first(c: torch.Tensor, dim: int) -> torch.Tensor:
    # gather at the first argmin so ties route the gradient to the smallest index
    idx = c.argmin(dim=dim, keepdim=True)
    return c.gather(dim, idx).squeeze(dim)


def attentive_style_loss(f_b: torch.Tensor, f_tar: torch.Tensor) -> torch.Tensor:
    """Symmetric mean nearest-token cosine distance between two token sets.

    ``f_b`` is ``(n, D)`` or ``(B, n, D)``; ``f_tar`` is ``(m, D)``. Returns
    ``max(mean_i min_j C, mean_j min_i C)``.
    """
    c = cost_matrix(f_b, f_tar)
    adapted_to_target = _min_first(c, -1).mean(-1)
    target_to_adapted = _min_first(c, -2).mean(-1)
    return torch.where(adapted_to_target >= target_to_adapted, adapted_to_target, target_to_adapted)


def scc_loss(w_b: torch.Tensor, w_a: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Masked L1 distance between W+ codes; gradient reaches ``w_b`` only.

    ``w_b``/``w_a`` are ``(L, D_w)`` or ``(B, L, D_w)``, ``mask`` is ``(L, D_w)``.
    """
    if w_b.shape != w_a.shape or w_b.shape[-2:] != mask.shape:
        raise ShapeError(
            f"shape mismatch: w_b {tuple(w_b.shape)}, w_a {tuple(w_a.shape)}, mask {tuple(mask.shape)}"
        )
    mask = mask.detach().to(w_b.dtype)
    return (mask * (w_b - w_a.detach()).abs()).sum(dim=(-2, -1))


def lambda_scc_schedule(n_iter: int, cfg: AdaptConfig) -> float:
    """SCC weight at iteration ``n_iter``.

    One-shot: zero through ``warmup_iters``, then linear up to the maximum at
    ``total_iters``. Zero-shot: constant maximum.
    """
    if cfg.mode == ZERO_SHOT:
        return cfg.lambda_scc
    if cfg.warmup_iters >= cfg.total_iters:
        raise ConfigError(f"warmup_iters ({cfg.warmup_iters}) must be < total_iters ({cfg.total_iters})")
    if not 0 <= n_iter <= cfg.total_iters:
        raise RangeError(f"n_iter {n_iter} outside [0, {cfg.total_iters}]")
    ramp = (n_iter - cfg.warmup_iters) / (cfg.total_iters - cfg.warmup_iters)
    return max(0.0, ramp) * cfg.lambda_scc


@dataclass(frozen=True)
class LossBreakdown:
    global_: float
    local: float
    scc: float
    total: float
    lambda_scc: float

    def as_record(self) -> dict[str, float]:
        return {"global": self.global_, "local": self.local, "scc": self.scc,
                "total": self.total, "lambda_scc": self.lambda_scc}


def weighted_total(global_, local, scc, lambda_local, lambda_scc):
    return global_ + lambda_local * local + lambda_scc * scc


def combine_losses(global_: float, local: float, scc: float,
                   lambda_local: float, lambda_scc: float) -> LossBreakdown:
    terms = {"global": global_, "local": local, "scc": scc,
             "lambda_local": lambda_local, "lambda_scc": lambda_scc}
    for name, value in terms.items():
        if not math.isfinite(float(value)):
            raise NumericError(f"non-finite {name} term: {value}")
    g, l, s = float(global_), float(local), float(scc)
    total = weighted_total(g, l, s, float(lambda_local), float(lambda_scc))
    return LossBreakdown(g, l, s, total, float(lambda_scc))
