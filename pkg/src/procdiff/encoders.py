"""Clip encoder, frozen phrase embedder and the cosine/temperature matching head."""
from __future__ import annotations

import numpy as np
import torch
from torch import Tensor, nn

from .core import DTYPE, ClipObservation, InvalidConfigError, InvalidInputError, SoftTarget
from .corpus import PhraseTable

ACTIVATIONS = {"gelu": nn.GELU, "tanh": nn.Tanh, "relu": nn.ReLU}


class ClipEncoder(nn.Module):
    """Two-layer perceptron from observation space into the phrase-embedding space."""

    def __init__(self, obs_dim: int = 128, dim: int = 64, hidden: int = 128,
                 activation: str = "gelu", generator: torch.Generator | None = None):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise InvalidConfigError(f"unknown activation {activation!r}")
        self.obs_dim, self.dim, self.hidden, self.activation = obs_dim, dim, hidden, activation
        self.fc1 = nn.Linear(obs_dim, hidden, dtype=DTYPE)
        self.act = ACTIVATIONS[activation]()
        self.fc2 = nn.Linear(hidden, dim, dtype=DTYPE)
        self.reset_parameters(generator)

    def reset_parameters(self, generator: torch.Generator | None = None):
        with torch.no_grad():
            for layer in (self.fc1, self.fc2):
                bound = 1.0 / np.sqrt(layer.in_features)
                layer.weight.uniform_(-bound, bound, generator=generator)
                layer.bias.uniform_(-bound, bound, generator=generator)
            # observations carry roughly unit norm; widen the output layer so
            # embeddings start at roughly unit scale per coordinate
            self.fc2.weight.mul_(np.sqrt(self.dim))

    def forward(self, obs: Tensor) -> Tensor:
        return self.fc2(self.act(self.fc1(obs)))

    def config(self) -> dict:
        return {"obs_dim": self.obs_dim, "dim": self.dim, "hidden": self.hidden,
                "activation": self.activation}


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def encode_clip(encoder: ClipEncoder, obs: ClipObservation | np.ndarray) -> np.ndarray:
    raw = obs.raw if isinstance(obs, ClipObservation) else np.asarray(obs, dtype=np.float64)
    if raw.shape != (encoder.obs_dim,):
        raise InvalidInputError(f"observation shape {raw.shape} != ({encoder.obs_dim},)")
    with torch.no_grad():
        return encoder(_as_tensor(raw)).numpy()


def encode_batch(encoder: ClipEncoder, obs: np.ndarray | Tensor) -> Tensor:
    obs = _as_tensor(obs)
    if obs.shape[-1] != encoder.obs_dim:
        raise InvalidInputError(f"observation width {obs.shape[-1]} != {encoder.obs_dim}")
    return encoder(obs)


def phrase_embed(table: PhraseTable, phrase_id: int) -> np.ndarray:
    if not 0 <= phrase_id < table.K:
        raise InvalidInputError(f"unknown phrase id {phrase_id}")
    return table.embeddings[phrase_id].copy()


def phrase_matrix(table: PhraseTable) -> Tensor:
    return torch.as_tensor(table.embeddings.copy())


def match_logits(x: Tensor, phrases: Tensor, tau: float) -> Tensor:
    """Cosine similarity to every phrase divided by ``tau``; shape (..., K)."""
    if tau <= 0:
        raise InvalidConfigError(f"temperature must be > 0, got {tau}")
    x_unit = x / x.norm(dim=-1, keepdim=True)
    y_unit = phrases / phrases.norm(dim=-1, keepdim=True)
    return x_unit @ y_unit.T / tau


def match_distribution(x, table: PhraseTable, tau: float) -> SoftTarget:
    if tau <= 0:
        raise InvalidConfigError(f"temperature must be > 0, got {tau}")
    v = np.asarray(x.detach().numpy() if isinstance(x, Tensor) else x, dtype=np.float64)
    if v.shape != (table.dim,):
        raise InvalidInputError(f"embedding shape {v.shape} != ({table.dim},)")
    if not np.all(np.isfinite(v)) or np.linalg.norm(v) == 0.0:
        raise InvalidInputError("cannot match a zero or non-finite embedding")
    probs = torch.softmax(match_logits(torch.as_tensor(v), phrase_matrix(table), tau), dim=-1)
    w = probs.numpy()
    return SoftTarget(w / w.sum())


class ClassifierHead(nn.Linear):
    def __init__(self, dim: int, n_classes: int, generator: torch.Generator | None = None):
        super().__init__(dim, n_classes, dtype=DTYPE)
        with torch.no_grad():
            bound = 1.0 / np.sqrt(dim)
            self.weight.uniform_(-bound, bound, generator=generator)
            self.bias.zero_()

    @property
    def n_classes(self) -> int:
        return self.out_features


def probe_logits(head: ClassifierHead, x) -> Tensor:
    x = _as_tensor(x)
    if x.shape[-1] != head.in_features:
        raise InvalidInputError(f"embedding width {x.shape[-1]} != head input {head.in_features}")
    return head(x)
