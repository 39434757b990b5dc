"""Noise schedule, forward/reverse diffusion and the transformer denoiser.

The denoiser predicts the clean embedding of one masked slot from a noisy
version of it, the embeddings of the other slots and the diffusion time.
Reverse sampling alternates x0-prediction with the Gaussian forward
posterior q(x^{t-1} | x^t, x^0).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core import DTYPE, MAX_SEQ_LEN, InvalidConfigError, InvalidInputError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha: np.ndarray      # alpha_1..alpha_T
    alpha_bar: np.ndarray  # alpha_bar_0..alpha_bar_T

    def posterior_coefs(self, t: int) -> tuple[float, float, float]:
        """(weight on x0_hat, weight on x_t, std) of q(x^{t-1} | x^t, x^0)."""
        a_t = self.alpha[t - 1]
        ab_t, ab_prev = self.alpha_bar[t], self.alpha_bar[t - 1]
        denom = 1.0 - ab_t
        c0 = np.sqrt(ab_prev) * (1.0 - a_t) / denom
        ct = np.sqrt(a_t) * (1.0 - ab_prev) / denom
        var = (1.0 - ab_prev) * (1.0 - a_t) / denom
        return float(c0), float(ct), float(np.sqrt(max(var, 0.0)))

    def to_dict(self) -> dict:
        return {"T": self.T, "kind": "linear_alpha_bar"}


def make_schedule(T: int = 4) -> NoiseSchedule:
    """Linear cumulative schedule: alpha_bar_t = 1 - t/T, so alpha_bar_T is exactly 0."""
    if int(T) != T or T < 1:
        raise InvalidConfigError(f"T must be a positive integer, got {T}")
    T = int(T)
    alpha_bar = np.array([1.0 - t / T for t in range(T + 1)])
    alpha_bar[T] = 0.0
    alpha = alpha_bar[1:] / alpha_bar[:-1]
    alpha.setflags(write=False)
    alpha_bar.setflags(write=False)
    return NoiseSchedule(T, alpha, alpha_bar)


def _check_t(t, lo: int, hi: int):
    ts = np.atleast_1d(np.asarray(t.detach().numpy() if isinstance(t, Tensor) else t))
    if ts.size and (ts.min() < lo or ts.max() > hi):
        raise InvalidInputError(f"t must lie in [{lo}, {hi}], got {ts.min()}..{ts.max()}")


def _gather(values: np.ndarray, t, like):
    """values[t] broadcast against ``like``; t may be an int or a per-row array."""
    if isinstance(t, (int, np.integer)):
        return float(values[int(t)])
    if isinstance(like, Tensor):
        idx = t if isinstance(t, Tensor) else torch.as_tensor(np.asarray(t))
        out = torch.as_tensor(values, dtype=like.dtype)[idx.long()]
        return out.reshape(out.shape + (1,) * (like.dim() - out.dim()))
    out = np.asarray(values)[np.asarray(t)]
    return out.reshape(out.shape + (1,) * (np.ndim(like) - out.ndim))


def forward_step(x_prev, t: int, sched: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """One forward transition x^t ~ N(sqrt(alpha_t) x^{t-1}, (1 - alpha_t) I)."""
    _check_t(t, 1, sched.T)
    x_prev = np.asarray(x_prev, dtype=np.float64)
    a = sched.alpha[t - 1]
    eps = rng.standard_normal(x_prev.shape)
    return np.sqrt(a) * x_prev + np.sqrt(1.0 - a) * eps


def forward_marginal(x0, t, eps, sched: NoiseSchedule):
    """Closed form x^t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps."""
    _check_t(t, 0, sched.T)
    sqrt_ab = np.sqrt(sched.alpha_bar)
    sqrt_1mab = np.sqrt(1.0 - sched.alpha_bar)
    return _gather(sqrt_ab, t, x0) * x0 + _gather(sqrt_1mab, t, x0) * eps


def posterior_step(x_t, x0_hat, t, sched: NoiseSchedule, noise=None):
    """Sample x^{t-1} given x^t and a predicted x^0; ``noise=None`` means zero noise."""
    _check_t(t, 1, sched.T)
    if isinstance(t, (int, np.integer)):
        c0, ct, std = sched.posterior_coefs(int(t))
    else:
        table = np.array([(0.0, 0.0, 0.0)] + [sched.posterior_coefs(s) for s in range(1, sched.T + 1)])
        c0, ct, std = (_gather(table[:, k], t, x_t) for k in range(3))
    mean = c0 * x0_hat + ct * x_t
    if noise is None:
        return mean
    return mean + std * noise


class _SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise InvalidConfigError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim, dtype=DTYPE)
        self.proj = nn.Linear(dim, dim, dtype=DTYPE)

    def forward(self, x: Tensor, keep: Tensor) -> Tensor:
        B, L, D = x.shape
        q, k, v = self.qkv(x).reshape(B, L, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=keep[:, None, None, :])
        return self.proj(out.transpose(1, 2).reshape(B, L, D))


class _Block(nn.Module):
    def __init__(self, dim: int, heads: int, ff_mult: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim, dtype=DTYPE)
        self.attn = _SelfAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim, dtype=DTYPE)
        self.ff = nn.Sequential(
            nn.Linear(dim, ff_mult * dim, dtype=DTYPE),
            nn.GELU(),
            nn.Linear(ff_mult * dim, dim, dtype=DTYPE),
        )

    def forward(self, x: Tensor, keep: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x), keep)
        return x + self.ff(self.ln2(x))


class Denoiser(nn.Module):
    """Bidirectional transformer h(x^t_j, {x_i}_{i != j}, t) -> x0_hat_j.

    Token at a context slot is that slot's embedding; the masked slot carries
    the projected noisy embedding (or a learned mask token when ``x_t`` is
    None). Position embeddings are added per slot and the time embedding is
    added at every slot.
    """

    def __init__(self, dim: int = 64, T: int = 4, layers: int = 4, heads: int = 4,
                 ff_mult: int = 4, max_len: int = MAX_SEQ_LEN,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.dim, self.T, self.n_layers, self.heads, self.ff_mult, self.max_len = (
            dim, T, layers, heads, ff_mult, max_len)
        self.pos_emb = nn.Parameter(torch.zeros(max_len, dim, dtype=DTYPE))
        self.time_emb = nn.Parameter(torch.zeros(T, dim, dtype=DTYPE))
        self.mask_token = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.readout_token = nn.Parameter(torch.zeros(dim, dtype=DTYPE))
        self.in_proj = nn.Linear(dim, dim, dtype=DTYPE)
        self.blocks = nn.ModuleList(_Block(dim, heads, ff_mult) for _ in range(layers))
        self.norm = nn.LayerNorm(dim, dtype=DTYPE)
        self.out_proj = nn.Linear(dim, dim, dtype=DTYPE)
        self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator | None = None):
        with torch.no_grad():
            for p in (self.pos_emb, self.time_emb, self.mask_token, self.readout_token):
                p.normal_(0.0, 0.5, generator=generator)
            for m in self.modules():
                if isinstance(m, nn.Linear):
                    bound = 1.0 / np.sqrt(m.in_features)
                    m.weight.uniform_(-bound, bound, generator=generator)
                    m.bias.zero_()
                elif isinstance(m, nn.LayerNorm):
                    m.weight.fill_(1.0)
                    m.bias.zero_()

    def config(self) -> dict:
        return {"dim": self.dim, "T": self.T, "layers": self.n_layers, "heads": self.heads,
                "ff_mult": self.ff_mult, "max_len": self.max_len}

    def _encode(self, tokens: Tensor, keep: Tensor) -> Tensor:
        for block in self.blocks:
            tokens = block(tokens, keep)
        return self.norm(tokens)

    def forward(self, context: Tensor, valid: Tensor, mask_slot: Tensor,
                x_t: Tensor | None = None, t: Tensor | None = None) -> Tensor:
        """Batched prediction.

        context (B, L, D) holds embeddings at their slots, ``valid`` (B, L)
        marks observed context slots, ``mask_slot`` (B,) the slot to predict.
        """
        B, L, _ = context.shape
        rows = torch.arange(B)
        is_mask = torch.zeros(B, L, dtype=torch.bool)
        is_mask[rows, mask_slot] = True
        masked_in = self.in_proj(x_t) if x_t is not None else self.mask_token.expand(B, -1)
        tokens = torch.where(valid[..., None], context, torch.zeros((), dtype=context.dtype))
        tokens = torch.where(is_mask[..., None], masked_in[:, None, :], tokens)
        tokens = tokens + self.pos_emb[:L]
        if t is not None:
            tokens = tokens + self.time_emb[t - 1][:, None, :]
        hidden = self._encode(tokens, valid | is_mask)
        return self.out_proj(hidden[rows, mask_slot])

    def readout(self, context: Tensor, valid: Tensor) -> Tensor:
        """Sequence-level feature from an extra learned readout token."""
        B, L, _ = context.shape
        tokens = torch.where(valid[..., None], context, torch.zeros((), dtype=context.dtype))
        tokens = tokens + self.pos_emb[:L]
        tokens = torch.cat([tokens, self.readout_token.expand(B, 1, -1)], dim=1)
        keep = torch.cat([valid, torch.ones(B, 1, dtype=torch.bool)], dim=1)
        return self._encode(tokens, keep)[:, L]


def _context_tensors(context: Sequence[tuple[int, np.ndarray]], mask_slot: int, dim: int,
                     max_len: int) -> tuple[Tensor, Tensor, Tensor]:
    slots = [int(s) for s, _ in context]
    if len(set(slots)) != len(slots):
        raise InvalidInputError("context slots collide")
    if not 0 <= mask_slot < max_len:
        raise InvalidInputError(f"mask slot {mask_slot} outside [0, {max_len})")
    if mask_slot in slots:
        raise InvalidInputError("mask slot collides with a context slot")
    L = max(slots + [mask_slot]) + 1
    if min(slots + [mask_slot]) < 0 or L > max_len:
        raise InvalidInputError(f"slots must lie in [0, {max_len})")
    ctx = torch.zeros(1, L, dim, dtype=DTYPE)
    valid = torch.zeros(1, L, dtype=torch.bool)
    for s, emb in context:
        emb = np.asarray(emb, dtype=np.float64)
        if emb.shape != (dim,):
            raise InvalidInputError(f"context embedding shape {emb.shape} != ({dim},)")
        ctx[0, s] = torch.as_tensor(emb)
        valid[0, s] = True
    return ctx, valid, torch.tensor([mask_slot])


def denoise_predict(denoiser: Denoiser, x_t, context: Sequence[tuple[int, np.ndarray]],
                    mask_slot: int, t: int) -> np.ndarray:
    _check_t(t, 1, denoiser.T)
    ctx, valid, slot = _context_tensors(context, mask_slot, denoiser.dim, denoiser.max_len)
    x = torch.as_tensor(np.asarray(x_t, dtype=np.float64))[None]
    with torch.no_grad():
        return denoiser(ctx, valid, slot, x, torch.tensor([t]))[0].numpy()


@dataclass(frozen=True)
class ChainMode:
    kind: Literal["stochastic", "approximate"] = "approximate"
    sample_count: int = 1

    def __post_init__(self):
        if self.kind not in ("stochastic", "approximate"):
            raise InvalidConfigError(f"unknown chain mode {self.kind!r}")
        if self.sample_count < 1:
            raise InvalidConfigError("sample_count must be >= 1")
        if self.kind == "approximate" and self.sample_count != 1:
            raise InvalidConfigError("approximate mode uses exactly one sample")


def chain_noise(rng: np.random.Generator, n: int, dim: int, T: int) -> np.ndarray:
    """Noise for n independent chains: [0] is x^T, [k] the noise injected at t = T - k + 1.

    Drawn chain by chain, so the first m chains do not depend on n.
    """
    return rng.standard_normal((n, T, dim)).transpose(1, 0, 2).copy()


def run_chain(denoiser: Denoiser, sched: NoiseSchedule, context: Tensor, valid: Tensor,
              mask_slot: Tensor, noise: Tensor | None = None) -> Tensor:
    """Reverse chain from t = T down to 1, returning the final x0 prediction.

    ``noise`` of shape (T, B, D) as laid out by :func:`chain_noise`; None runs
    the deterministic zero-noise chain. Differentiable in the denoiser.
    """
    B = context.shape[0]
    T = sched.T
    x = torch.zeros(B, denoiser.dim, dtype=DTYPE) if noise is None else noise[0]
    x0_hat = x
    for t in range(T, 0, -1):
        x0_hat = denoiser(context, valid, mask_slot, x, torch.full((B,), t, dtype=torch.long))
        if t > 1:
            x = posterior_step(x, x0_hat, t, sched, None if noise is None else noise[T - t + 1])
    return x0_hat


def sample_chain(denoiser: Denoiser, context: Sequence[tuple[int, np.ndarray]], mask_slot: int,
                 sched: NoiseSchedule, mode: ChainMode, rng: np.random.Generator | None = None
                 ) -> np.ndarray:
    """Draw ``mode.sample_count`` x0 samples for one masked slot, shape (n, D)."""
    ctx, valid, slot = _context_tensors(context, mask_slot, denoiser.dim, denoiser.max_len)
    n = mode.sample_count
    noise = None
    if mode.kind == "stochastic":
        if rng is None:
            raise InvalidInputError("stochastic mode needs a random source")
        noise = torch.as_tensor(chain_noise(rng, n, denoiser.dim, sched.T))
    with torch.no_grad():
        out = run_chain(denoiser, sched, ctx.expand(n, -1, -1), valid.expand(n, -1),
                        slot.expand(n), noise)
    return out.numpy()
