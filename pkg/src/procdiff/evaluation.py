"""Step classification, next-step forecasting and diversity metrics."""
from __future__ import annotations

import csv
import io
import json
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Sequence

import hashlib
import numpy as np
import torch
from torch import Tensor

from .core import (
    DTYPE,
    ClipObservation,
    ClipSequence,
    InvalidInputError,
    SoftTarget,
    seeded_rng,
)
from .diffusion import chain_noise
from .encoders import match_logits, phrase_matrix
from .training import (
    MAX_CONTEXT,
    ForecastSet,
    ModelBundle,
    embed,
    forecast_examples,
    forecast_features,
)

SCHEMA_VERSION = 1
MODES = ("approximate", "expectation", "oracle")


def top1_accuracy(predictions, labels) -> float:
    p, y = np.asarray(predictions), np.asarray(labels)
    if p.size == 0 or p.shape != y.shape:
        raise InvalidInputError("need equal-length, non-empty predictions and labels")
    return float(np.mean(p == y))


def per_category(predictions, labels) -> dict[str, dict]:
    p, y = np.asarray(predictions), np.asarray(labels)
    out = {}
    for c in sorted(set(y.tolist())):
        rows = y == c
        out[str(c)] = {"count": int(rows.sum()), "accuracy": float(np.mean(p[rows] == c))}
    return out


@dataclass
class EvalReport:
    task: str
    split: str
    top1: float
    per_category: dict[str, dict] = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION
    generated_at: str = ""

    def __post_init__(self):
        if not 0.0 <= self.top1 <= 1.0:
            raise InvalidInputError(f"accuracy {self.top1} outside [0, 1]")
        if not self.generated_at:
            self.generated_at = datetime.now(timezone.utc).isoformat(timespec="seconds")

    def canonical(self) -> dict:
        doc = asdict(self)
        doc.pop("generated_at")
        return doc

    def canonical_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.canonical(), sort_keys=True).encode()).hexdigest()

    def to_json(self) -> str:
        doc = asdict(self)
        doc["canonical_hash"] = self.canonical_hash()
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        doc = json.loads(text)
        doc.pop("canonical_hash", None)
        return cls(**doc)

    def per_category_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["category", "count", "accuracy"])
        for cat, row in self.per_category.items():
            writer.writerow([cat, row["count"], repr(row["accuracy"])])
        return buf.getvalue()


def _seed_of(rng) -> int:
    if isinstance(rng, (int, np.integer)):
        return int(rng)
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(2**63 - 1))
    raise InvalidInputError("expected an integer seed or a numpy Generator")


def zero_shot_scores(bundle: ModelBundle, obs: np.ndarray) -> Tensor:
    feats = embed(bundle.encoder, np.atleast_2d(np.asarray(obs, dtype=np.float64)))
    if torch.any(feats.norm(dim=-1) == 0):
        raise InvalidInputError("encoder produced a zero embedding")
    with torch.no_grad():
        return match_logits(feats, phrase_matrix(bundle.table), bundle.tau)


def _argmax_lowest(scores: Tensor) -> np.ndarray:
    # torch.argmax does not promise the first maximum; resolve ties to the lowest id
    s = scores.numpy()
    return np.argmax(s == s.max(axis=-1, keepdims=True), axis=-1)


def zero_shot_classify(bundle: ModelBundle, clip: ClipObservation | np.ndarray) -> int:
    raw = clip.raw if isinstance(clip, ClipObservation) else clip
    return int(_argmax_lowest(zero_shot_scores(bundle, raw))[0])


def classify_clips(bundle: ModelBundle, obs: np.ndarray, head: str = "auto") -> np.ndarray:
    """Step predictions for many clips via the probe head or zero-shot matching."""
    use_probe = bundle.probe_head is not None and head != "zero-shot"
    if use_probe:
        with torch.no_grad():
            scores = bundle.probe_head(embed(bundle.encoder, obs))
        return _argmax_lowest(scores)
    return _argmax_lowest(zero_shot_scores(bundle, obs))


def _forecast_head(bundle: ModelBundle, head: str) -> tuple[str, bool]:
    """(feature variant, use linear head) for a forecasting request."""
    use_head = bundle.forecast_head is not None and head != "zero-shot"
    if use_head:
        return bundle.forecast_variant, True
    if bundle.denoiser is None:
        raise InvalidInputError("zero-shot forecasting needs a denoiser")
    return ("mask" if bundle.variant == "mask" else "diffusion"), False


def forecast_probs(bundle: ModelBundle, ex: ForecastSet, samples: int = 0, seed: int = 0,
                   head: str = "auto", chunk: int = 1024) -> np.ndarray:
    """Per-example class distributions, shape (n, S, K).

    ``samples=0`` runs the zero-noise chain once. Otherwise example i draws
    its S chains from stream (seed, "forecast", i), so the first k samples are
    shared between any two requests with the same seed.
    """
    variant, use_head = _forecast_head(bundle, head)
    stochastic = samples > 0 and variant == "diffusion"
    S = max(samples, 1)
    n = len(ex)
    D = bundle.model_config.dim
    out = np.zeros((n, S, bundle.table.K))
    rows_per_chunk = max(1, chunk // S)
    phrases = phrase_matrix(bundle.table)
    with torch.no_grad():
        for start in range(0, n, rows_per_chunk):
            idx = np.arange(start, min(n, start + rows_per_chunk))
            part = ex.subset(np.repeat(idx, S))
            noise = None
            if stochastic:
                per = [chain_noise(seeded_rng(seed, "forecast", int(i)), S, D, bundle.schedule.T)
                       for i in idx]
                noise = torch.as_tensor(np.concatenate(per, axis=1))
            feats = forecast_features(bundle, part, variant, noise)
            logits = bundle.forecast_head(feats) if use_head else match_logits(feats, phrases, bundle.tau)
            out[idx] = torch.softmax(logits, -1).numpy().reshape(len(idx), S, -1)
    return out


def _single_context(bundle: ModelBundle, context: Sequence) -> ForecastSet:
    if not context:
        raise InvalidInputError("forecasting needs at least one context clip")
    if len(context) > MAX_CONTEXT:
        raise InvalidInputError(f"at most {MAX_CONTEXT} context clips are supported")
    raws = [c.raw if isinstance(c, ClipObservation) else np.asarray(c, dtype=np.float64)
            for c in context]
    K = bundle.table.K
    dummy = SoftTarget(np.full(K, 1.0 / K))
    clips = [ClipObservation(r, k) for k, r in enumerate(raws)]
    clips.append(ClipObservation(np.zeros_like(raws[0]), len(raws)))
    seq = ClipSequence(-1, clips, [0] * len(clips), [dummy] * len(clips))
    ex = forecast_examples(bundle.encoder, [seq])
    return ex.subset([len(raws) - 1])


def forecast_approximate(bundle: ModelBundle, context: Sequence, head: str = "auto") -> int:
    probs = forecast_probs(bundle, _single_context(bundle, context), samples=0, head=head)
    return int(np.argmax(probs[0, 0]))


def forecast_expectation(bundle: ModelBundle, context: Sequence, M: int, rng,
                         head: str = "auto") -> SoftTarget:
    if M < 1:
        raise InvalidInputError("M must be >= 1")
    probs = forecast_probs(bundle, _single_context(bundle, context), samples=M,
                           seed=_seed_of(rng), head=head)
    avg = probs[0].mean(axis=0)
    return SoftTarget(avg / avg.sum())


def oracle_topk(bundle: ModelBundle, context: Sequence, k: int, truth: int, rng,
                head: str = "auto") -> bool:
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    probs = forecast_probs(bundle, _single_context(bundle, context), samples=k,
                           seed=_seed_of(rng), head=head)
    return bool(np.any(np.argmax(probs[0], axis=-1) == truth))


@dataclass
class ForecastMetrics:
    approximate: float
    expectation: float
    single_sample: float
    oracle: float
    predictions: dict[str, np.ndarray] = field(repr=False, default_factory=dict)


def evaluate_forecasting(bundle: ModelBundle, ex: ForecastSet, samples: int = 32, k: int = 5,
                         seed: int = 0, head: str = "auto") -> ForecastMetrics:
    """All inference schemes on one example set; oracle-k and single-sample reuse
    the first k (resp. 1) of the expectation samples."""
    y = ex.targets.numpy()
    approx = forecast_probs(bundle, ex, 0, seed, head)[:, 0]
    sampled = forecast_probs(bundle, ex, max(samples, k), seed, head)
    per_sample = sampled.argmax(-1)
    expect = sampled[:, :samples].mean(1).argmax(-1)
    approx_pred = approx.argmax(-1)
    oracle_hit = np.any(per_sample[:, :k] == y[:, None], axis=1)
    return ForecastMetrics(
        approximate=top1_accuracy(approx_pred, y),
        expectation=top1_accuracy(expect, y),
        single_sample=top1_accuracy(per_sample[:, 0], y),
        oracle=float(np.mean(oracle_hit)),
        predictions={"approximate": approx_pred, "expectation": expect, "samples": per_sample},
    )


@dataclass
class DiversityStats:
    mean_distinct: float
    valid_coverage: float
    modal_share: float
    n_contexts: int
    n_branching: int


def diversity_stats(bundle: ModelBundle, ex: ForecastSet, valid_next: Sequence[set[int]], k: int,
                    rng, head: str = "auto") -> DiversityStats:
    """Sample k forecasts per context and measure spread and coverage of valid continuations."""
    if len(valid_next) != len(ex):
        raise InvalidInputError("one set of valid continuations per context is required")
    branching = [i for i, v in enumerate(valid_next) if len(v) >= 2]
    if not branching and len(ex) == 0:
        raise InvalidInputError("no contexts to evaluate")
    preds = forecast_probs(bundle, ex, k, _seed_of(rng), head).argmax(-1)
    distinct = [len(set(row.tolist())) for row in preds]
    modal = [Counter(row.tolist()).most_common(1)[0][1] / k for row in preds]
    covered = [len(set(preds[i].tolist()) & valid_next[i]) >= 2 for i in branching]
    return DiversityStats(
        mean_distinct=float(np.mean(distinct)),
        valid_coverage=float(np.mean(covered)) if covered else float("nan"),
        modal_share=float(np.mean(modal)),
        n_contexts=len(ex),
        n_branching=len(branching),
    )


def branch_diversity(bundle: ModelBundle, ex: ForecastSet, valid_next: Sequence[set[int]], k: int,
                     rng, head: str = "auto") -> DiversityStats:
    """Like :func:`diversity_stats` but restricted to contexts with >= 2 valid continuations."""
    branching = [i for i, v in enumerate(valid_next) if len(v) >= 2]
    if not branching:
        raise InvalidInputError("no branching contexts in the evaluation set")
    return diversity_stats(bundle, ex.subset(branching), [valid_next[i] for i in branching], k,
                           rng, head)


def _tokens(text: str) -> list[str]:
    return text.lower().split()


def bleu1(candidate: str, reference: str) -> float:
    """Clipped unigram precision times the brevity penalty."""
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand:
        warnings.warn("empty candidate phrase scores 0")
        return 0.0
    if not ref:
        return 0.0
    ref_counts = Counter(ref)
    overlap = sum(min(c, ref_counts[w]) for w, c in Counter(cand).items())
    precision = overlap / len(cand)
    bp = 1.0 if len(cand) > len(ref) else float(np.exp(1.0 - len(ref) / len(cand)))
    return precision * bp


def max_bleu1(candidate: str, references: Sequence[str]) -> float:
    return max((bleu1(candidate, r) for r in references), default=0.0)


def bleu1_split(eval_phrases: Sequence[str], train_phrases: Sequence[str],
                threshold: float = 0.7) -> dict[str, list[int]]:
    """Group eval phrase indices into 'seen' (best BLEU-1 >= threshold) and 'novel'."""
    groups: dict[str, list[int]] = {"seen": [], "novel": []}
    for i, phrase in enumerate(eval_phrases):
        groups["seen" if max_bleu1(phrase, train_phrases) >= threshold else "novel"].append(i)
    return groups


def group_accuracy(predictions, labels, groups: dict[str, list[int]]) -> dict[str, float | None]:
    """Accuracy over examples whose label falls in each phrase-id group."""
    p, y = np.asarray(predictions), np.asarray(labels)
    out = {}
    for name, ids in groups.items():
        rows = np.isin(y, ids)
        out[name] = float(np.mean(p[rows] == y[rows])) if rows.any() else None
    return out


def forecast_report(bundle: ModelBundle, sequences: Sequence[ClipSequence], mode: str,
                    k: int = 5, samples: int = 32, seed: int = 0, split: str = "val",
                    head: str = "auto", provenance: dict | None = None) -> EvalReport:
    if mode not in MODES:
        raise InvalidInputError(f"mode must be one of {MODES}")
    ex = forecast_examples(bundle.encoder, sequences)
    if len(ex) == 0:
        raise InvalidInputError("no forecasting contexts in the evaluation split")
    y = ex.targets.numpy()
    if mode == "approximate":
        pred = forecast_probs(bundle, ex, 0, seed, head)[:, 0].argmax(-1)
        top1, extras = top1_accuracy(pred, y), {}
    elif mode == "expectation":
        pred = forecast_probs(bundle, ex, samples, seed, head).mean(1).argmax(-1)
        top1, extras = top1_accuracy(pred, y), {"samples": samples}
    else:
        draws = forecast_probs(bundle, ex, k, seed, head).argmax(-1)
        hit = np.any(draws == y[:, None], axis=1)
        pred = np.where(hit, y, draws[:, 0])
        top1, extras = float(np.mean(hit)), {"oracle_k": k}
    return EvalReport("forecast", split, top1, per_category(pred, y), extras,
                      {"bundle": bundle.digest(), "mode": mode, "seed": seed, "head": head,
                       **(provenance or {})})


def classify_report(bundle: ModelBundle, sequences: Sequence[ClipSequence], split: str = "val",
                    head: str = "auto", train_phrases: Sequence[str] | None = None,
                    provenance: dict | None = None) -> EvalReport:
    obs = np.concatenate([s.observations() for s in sequences])
    y = np.concatenate([np.asarray(s.phrase_ids) for s in sequences])
    pred = classify_clips(bundle, obs, head)
    extras: dict = {"head": "probe" if bundle.probe_head is not None and head != "zero-shot"
                    else "zero-shot"}
    if train_phrases is not None:
        groups = bleu1_split(bundle.table.texts(), train_phrases)
        extras["bleu1_groups"] = {k: len(v) for k, v in groups.items()}
        extras["bleu1_accuracy"] = group_accuracy(pred, y, groups)
    return EvalReport("classify", split, top1_accuracy(pred, y), per_category(pred, y), extras,
                      {"bundle": bundle.digest(), **(provenance or {})})


def activity_predictions(bundle: ModelBundle, sequences: Sequence[ClipSequence]) -> np.ndarray:
    if bundle.activity_head is None or bundle.denoiser is None:
        raise InvalidInputError("bundle has no activity head")
    from .objective import collate

    batch = collate(list(sequences))
    feats = embed(bundle.encoder, batch.obs.reshape(-1, batch.obs.shape[-1]).numpy()).reshape(
        len(batch), -1, bundle.model_config.dim)
    with torch.no_grad():
        logits = bundle.activity_head(bundle.denoiser.readout(feats, batch.valid))
    return np.asarray(bundle.activity_tasks)[_argmax_lowest(logits)]


def activity_report(bundle: ModelBundle, sequences: Sequence[ClipSequence], split: str = "val",
                    provenance: dict | None = None) -> EvalReport:
    pred = activity_predictions(bundle, sequences)
    y = np.array([s.task_id for s in sequences])
    return EvalReport("activity", split, top1_accuracy(pred, y), per_category(pred, y), {},
                      {"bundle": bundle.digest(), **(provenance or {})})
