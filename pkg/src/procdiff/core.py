"""Shared value types, vector helpers and the randomness contract."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

DEFAULT_DIM = 64
DEFAULT_OBS_DIM = 128
MIN_SEQ_LEN = 2
MAX_SEQ_LEN = 9

DTYPE = torch.float64


class ProcDiffError(Exception):
    """Base class for library errors."""


class InvalidInputError(ProcDiffError, ValueError):
    pass


class InvalidConfigError(ProcDiffError, ValueError):
    def __init__(self, violations: str | Sequence[str]):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class IntegrityError(ProcDiffError):
    """Stale input, corrupt payload or incompatible shapes."""


class DivergenceError(ProcDiffError):
    def __init__(self, message: str, record: dict | None = None):
        super().__init__(message)
        self.record = record or {}


def _as_vector(v) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidInputError(f"expected a vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("vector has non-finite entries")
    return arr


def l2_normalize(v) -> np.ndarray:
    arr = _as_vector(v)
    norm = np.linalg.norm(arr)
    if norm == 0.0:
        raise InvalidInputError("cannot normalize a zero vector")
    out = arr / norm
    # a second pass removes the last-ulp drift so normalization is idempotent
    return out / np.linalg.norm(out)


def cosine(u, v) -> float:
    a, b = _as_vector(u), _as_vector(v)
    if a.shape != b.shape:
        raise InvalidInputError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise InvalidInputError("cosine of a zero vector is undefined")
    return float(np.clip(np.dot(a / na, b / nb), -1.0, 1.0))


def _stream_key(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise InvalidInputError("stream ids must be non-negative")
        return int(part)
    digest = hashlib.sha256(str(part).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def seeded_rng(seed: int, *stream) -> np.random.Generator:
    """Random source for ``seed``, optionally narrowed to a named sub-stream.

    Sub-streams (``seeded_rng(7, "noise", 3)``) are derived through
    ``SeedSequence`` so distinct stream ids give independent generators.
    """
    entropy = [_stream_key(seed)] + [_stream_key(p) for p in stream]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *stream) -> int:
    return int(seeded_rng(seed, *stream).integers(2**63 - 1))


def torch_generator(seed: int, *stream) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, *stream))
    return gen


@dataclass(frozen=True)
class StepPhrase:
    id: int
    text: str


@dataclass
class SoftTarget:
    """Distribution over the phrase pool, stored densely by phrase id."""

    weights: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise InvalidInputError("soft target must be a non-empty vector")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise InvalidInputError("soft target weights must be finite and non-negative")
        if abs(w.sum() - 1.0) > 1e-6:
            raise InvalidInputError(f"soft target sums to {w.sum():.9f}, expected 1")
        self.weights = w

    @classmethod
    def from_mapping(cls, mapping: dict, K: int) -> "SoftTarget":
        w = np.zeros(K)
        for key, value in mapping.items():
            idx = int(key)
            if not 0 <= idx < K:
                raise InvalidInputError(f"phrase id {idx} outside [0, {K})")
            w[idx] = float(value)
        return cls(w)

    def as_mapping(self) -> dict[str, float]:
        return {str(i): float(w) for i, w in enumerate(self.weights) if w > 0.0}

    def argmax(self) -> int:
        return int(np.argmax(self.weights))


@dataclass
class ClipObservation:
    raw: np.ndarray
    time_index: int = 0

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64)
        if self.raw.ndim != 1:
            raise InvalidInputError("observation must be a vector")


@dataclass
class ClipSequence:
    task_id: int
    clips: list[ClipObservation]
    phrase_ids: list[int]
    soft_targets: list[SoftTarget]
    split: str = "train"
    index: int = field(default=0, compare=False)

    def __post_init__(self):
        n = len(self.clips)
        if not (len(self.phrase_ids) == n == len(self.soft_targets)):
            raise InvalidInputError("clips, phrase_ids and soft_targets differ in length")
        if not MIN_SEQ_LEN <= n <= MAX_SEQ_LEN:
            raise InvalidInputError(f"sequence length {n} outside [{MIN_SEQ_LEN}, {MAX_SEQ_LEN}]")
        for k, clip in enumerate(self.clips):
            if clip.time_index != k:
                raise InvalidInputError(f"clip {k} has time_index {clip.time_index}")

    def __len__(self) -> int:
        return len(self.clips)

    def observations(self) -> np.ndarray:
        return np.stack([c.raw for c in self.clips])

    def target_matrix(self) -> np.ndarray:
        return np.stack([s.weights for s in self.soft_targets])


def array_digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        if isinstance(a, torch.Tensor):
            a = a.detach().cpu().numpy()
        a = np.ascontiguousarray(a, dtype=np.float64)
        h.update(str(a.shape).encode())
        h.update(a.astype("<f8").tobytes())
    return h.hexdigest()


def module_checksum(module: torch.nn.Module | None) -> str | None:
    if module is None:
        return None
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f8").tobytes())
    return h.hexdigest()
