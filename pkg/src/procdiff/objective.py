"""Masking policy and the matching / regression / masked-matching losses."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .core import DTYPE, ClipSequence, InvalidInputError, SoftTarget
from .corpus import PhraseTable
from .diffusion import NoiseSchedule, forward_marginal
from .encoders import match_logits, phrase_matrix

LOG_FLOOR = float(np.log(1e-12))
VARIANTS = ("diffusion", "mask", "matching")


@dataclass
class LossBreakdown:
    xe: float
    mse: float
    mc: float
    total: float
    masked_slot: int
    sampled_t: int
    clamped: bool = False
    graph: Tensor | None = field(default=None, repr=False, compare=False)

    def row(self) -> dict:
        return {"xe": self.xe, "mse": self.mse, "mc": self.mc, "total": self.total,
                "t": self.sampled_t, "j": self.masked_slot}


def mask_position(N: int, rng: np.random.Generator) -> int:
    if N < 2:
        raise InvalidInputError(f"need at least 2 clips to mask one, got {N}")
    return int(rng.integers(N))


def _weights(d) -> np.ndarray:
    return d.weights if isinstance(d, SoftTarget) else np.asarray(d, dtype=np.float64)


def cross_entropy(target, pred) -> tuple[float, bool]:
    """H(target, pred) in nats; log(pred) is floored at log(1e-12)."""
    p_t, p = _weights(target), _weights(pred)
    if p_t.shape != p.shape:
        raise InvalidInputError(f"distribution sizes differ: {p_t.shape} vs {p.shape}")
    with np.errstate(divide="ignore"):
        logp = np.log(p)
    floor = logp < LOG_FLOOR
    clamped = bool(np.any(floor & (p_t > 0)))
    logp = np.maximum(logp, LOG_FLOOR)
    return float(-np.sum(p_t * logp)), clamped


def loss_xe(pred_dists: Sequence, targets: Sequence, return_flag: bool = False):
    """Mean cross-entropy over the unmasked slots."""
    if len(pred_dists) != len(targets) or not targets:
        raise InvalidInputError("need equal, non-empty lists of predictions and targets")
    values, flags = zip(*(cross_entropy(t, p) for p, t in zip(pred_dists, targets)))
    value = float(np.mean(values))
    return (value, any(flags)) if return_flag else value


def loss_mse(x0_hat, x0_target) -> float:
    a = np.asarray(x0_hat, dtype=np.float64)
    b = np.asarray(x0_target, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.sum((a - b) ** 2))


def loss_mc(x0_hat, table: PhraseTable, tau: float, target) -> float:
    v = np.asarray(x0_hat, dtype=np.float64)
    if v.shape != (table.dim,) or np.linalg.norm(v) == 0.0:
        raise InvalidInputError("x0_hat must be a nonzero embedding of the table's width")
    logp = torch.log_softmax(match_logits(torch.as_tensor(v), phrase_matrix(table), tau), -1)
    return float(-(torch.as_tensor(_weights(target)) * logp).sum())


def soft_cross_entropy(target: Tensor, logits: Tensor) -> Tensor:
    return -(target * torch.log_softmax(logits, dim=-1)).sum(-1)


@dataclass
class Batch:
    obs: Tensor          # (B, L, D_obs)
    targets: Tensor      # (B, L, K)
    phrase_ids: Tensor   # (B, L), -1 beyond each length
    valid: Tensor        # (B, L)
    lengths: np.ndarray  # (B,)
    task_ids: np.ndarray

    def __len__(self) -> int:
        return self.obs.shape[0]


def collate(sequences: Sequence[ClipSequence]) -> Batch:
    if not sequences:
        raise InvalidInputError("empty batch")
    B = len(sequences)
    L = max(len(s) for s in sequences)
    d_obs = sequences[0].clips[0].raw.shape[0]
    K = sequences[0].soft_targets[0].weights.shape[0]
    obs = np.zeros((B, L, d_obs))
    targets = np.zeros((B, L, K))
    ids = np.full((B, L), -1, dtype=np.int64)
    lengths = np.array([len(s) for s in sequences])
    for b, s in enumerate(sequences):
        n = len(s)
        obs[b, :n] = s.observations()
        targets[b, :n] = s.target_matrix()
        ids[b, :n] = s.phrase_ids
    valid = torch.arange(L)[None, :] < torch.as_tensor(lengths)[:, None]
    return Batch(torch.as_tensor(obs), torch.as_tensor(targets), torch.as_tensor(ids), valid,
                 lengths, np.array([s.task_id for s in sequences]))


@dataclass
class BatchTerms:
    xe: Tensor
    mse: Tensor
    mc: Tensor
    masked_slot: np.ndarray
    sampled_t: np.ndarray

    @property
    def total(self) -> Tensor:
        return self.xe + self.mse + self.mc


def batch_loss_terms(encoder, denoiser, sched: NoiseSchedule, batch: Batch, phrases: Tensor,
                     tau: float, rng: np.random.Generator, variant: str = "diffusion",
                     stop_gradient: bool = True) -> BatchTerms:
    """Per-sequence loss terms for one minibatch.

    Draw order per batch is fixed (mask slots, then t, then noise) so a seed
    reproduces the exact same Monte Carlo draws.
    """
    if variant not in VARIANTS:
        raise InvalidInputError(f"unknown variant {variant!r}")
    B = len(batch)
    x = encoder(batch.obs)
    ce = soft_cross_entropy(batch.targets, match_logits(x, phrases, tau))
    valid = batch.valid.to(DTYPE)
    lengths = torch.as_tensor(batch.lengths, dtype=DTYPE)
    zeros = torch.zeros(B, dtype=DTYPE)
    if variant == "matching":
        xe = (ce * valid).sum(1) / lengths
        return BatchTerms(xe, zeros, zeros, np.full(B, -1), np.zeros(B, dtype=np.int64))

    if np.any(batch.lengths < 2):
        raise InvalidInputError("every sequence needs at least 2 clips")
    j = rng.integers(0, batch.lengths)
    rows = torch.arange(B)
    j_t = torch.as_tensor(j)
    keep = batch.valid.clone()
    keep[rows, j_t] = False
    xe = (ce * keep.to(DTYPE)).sum(1) / (lengths - 1)

    x0 = x[rows, j_t]
    x0_target = x0.detach() if stop_gradient else x0
    if variant == "diffusion":
        t = rng.integers(1, sched.T + 1, size=B)
        eps = torch.as_tensor(rng.standard_normal((B, x.shape[-1])))
        t_t = torch.as_tensor(t)
        x_t = forward_marginal(x0_target, t_t, eps, sched)
        x0_hat = denoiser(x, keep, j_t, x_t, t_t)
    else:
        t = np.zeros(B, dtype=np.int64)
        x0_hat = denoiser(x, keep, j_t, None, None)
    mse = ((x0_hat - x0_target) ** 2).sum(-1)
    mc = soft_cross_entropy(batch.targets[rows, j_t], match_logits(x0_hat, phrases, tau))
    return BatchTerms(xe, mse, mc, j, t)


def training_step_losses(encoder, denoiser, sched: NoiseSchedule, sequence: ClipSequence,
                         table: PhraseTable, tau: float, rng: np.random.Generator,
                         variant: str = "diffusion", stop_gradient: bool = True) -> LossBreakdown:
    """Loss terms for a single sequence; ``graph`` holds the differentiable total."""
    if len(sequence) < 2:
        raise InvalidInputError("sequence needs at least 2 clips")
    terms = batch_loss_terms(encoder, denoiser, sched, collate([sequence]), phrase_matrix(table),
                             tau, rng, variant=variant, stop_gradient=stop_gradient)
    total = terms.total[0]
    return LossBreakdown(
        xe=float(terms.xe[0].detach()), mse=float(terms.mse[0].detach()),
        mc=float(terms.mc[0].detach()), total=float(total.detach()), masked_slot=int(terms.masked_slot[0]),
        sampled_t=int(terms.sampled_t[0]), graph=total,
    )
