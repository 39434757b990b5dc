"""Synthetic procedural-activity corpora.

Each task is a small grammar over step ids: a few canonical orderings with
probabilities, plus per-sequence variation (adjacent swaps, dropped steps,
inserted distractors). Clips are noisy lifts of the phrase embeddings into a
wider observation space, and their soft labels come from matching the
back-projected observation against the whole phrase pool.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import softmax

from .core import (
    MAX_SEQ_LEN,
    MIN_SEQ_LEN,
    ClipObservation,
    ClipSequence,
    InvalidConfigError,
    InvalidInputError,
    SoftTarget,
    StepPhrase,
    seeded_rng,
)

VERBS = [
    "whisk", "stir", "crack", "melt", "pour", "chop", "slice", "boil",
    "fry", "bake", "rinse", "mix", "knead", "peel", "spread", "season",
    "heat", "drain", "fold", "grate",
]
NOUNS = [
    "eggs", "butter", "flour", "water", "onion", "dough", "cheese", "milk",
    "pan", "sauce", "garlic", "rice", "bread", "chicken", "pepper", "oil",
    "sugar", "tomato", "pasta", "batter",
]

SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


@dataclass
class TaskGrammar:
    task_id: int
    orderings: list[tuple[tuple[int, ...], float]]
    swap_rate: float = 0.0
    drop_rate: float = 0.0
    distractor_rate: float = 0.0

    def __post_init__(self):
        self.orderings = [(tuple(int(s) for s in seq), float(p)) for seq, p in self.orderings]
        problems = self.violations()
        if problems:
            raise InvalidConfigError(problems)

    def violations(self, K: int | None = None) -> list[str]:
        out = []
        tag = f"grammar {self.task_id}"
        if not self.orderings:
            out.append(f"{tag}: no orderings")
        total = sum(p for _, p in self.orderings)
        if self.orderings and abs(total - 1.0) > 1e-9:
            out.append(f"{tag}: ordering probabilities sum to {total}")
        for seq, p in self.orderings:
            if p < 0:
                out.append(f"{tag}: negative probability {p}")
            if not MIN_SEQ_LEN <= len(seq) <= MAX_SEQ_LEN:
                out.append(f"{tag}: ordering length {len(seq)} outside [{MIN_SEQ_LEN}, {MAX_SEQ_LEN}]")
            if K is not None and any(not 0 <= s < K for s in seq):
                out.append(f"{tag}: ordering {seq} references ids outside [0, {K})")
        for name in ("swap_rate", "drop_rate", "distractor_rate"):
            rate = getattr(self, name)
            if not 0.0 <= rate <= 1.0:
                out.append(f"{tag}: {name}={rate} outside [0, 1]")
        return out

    def continuations(self, prefix) -> set[int]:
        """Next steps the canonical orderings allow after ``prefix``."""
        prefix = tuple(prefix)
        n = len(prefix)
        return {
            seq[n] for seq, p in self.orderings
            if p > 0 and len(seq) > n and seq[:n] == prefix
        }

    def is_deterministic(self) -> bool:
        return sum(1 for _, p in self.orderings if p > 0) == 1


@dataclass
class PhraseTable:
    phrases: list[StepPhrase]
    embeddings: np.ndarray  # (K, D), unit rows
    lift: np.ndarray        # (D_obs, D), orthonormal columns

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.lift = np.asarray(self.lift, dtype=np.float64)
        K, D = self.embeddings.shape
        if len(self.phrases) != K:
            raise InvalidConfigError("phrase count does not match embedding rows")
        if [p.id for p in self.phrases] != list(range(K)):
            raise InvalidConfigError("phrase ids must be 0..K-1 in order")
        if self.lift.shape[1] != D or self.lift.shape[0] < D:
            raise InvalidConfigError(f"lift shape {self.lift.shape} incompatible with D={D}")
        if not np.allclose(np.linalg.norm(self.embeddings, axis=1), 1.0, atol=1e-9):
            raise InvalidConfigError("phrase embeddings must have unit norm")

    @property
    def K(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.lift.shape[0]

    def texts(self) -> list[str]:
        return [p.text for p in self.phrases]

    def project(self, raw: np.ndarray) -> np.ndarray:
        return self.lift.T @ np.asarray(raw, dtype=np.float64)

    def to_json(self) -> str:
        doc = {
            "K": self.K,
            "D": self.dim,
            "D_obs": self.obs_dim,
            "phrases": [{"id": p.id, "text": p.text} for p in self.phrases],
            "embeddings": self.embeddings.tolist(),
            "lift": self.lift.tolist(),
        }
        return _dump_with_literals(doc)

    @classmethod
    def from_json(cls, text: str) -> "PhraseTable":
        doc = json.loads(text)
        phrases = [StepPhrase(int(p["id"]), str(p["text"])) for p in doc["phrases"]]
        return cls(phrases, np.array(doc["embeddings"], dtype=np.float64),
                   np.array(doc["lift"], dtype=np.float64))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def _dump_with_literals(doc) -> str:
    """JSON with floats written at 17 significant digits."""
    def enc(o):
        if isinstance(o, dict):
            return "{" + ",".join(f"{json.dumps(str(k))}:{enc(v)}" for k, v in o.items()) + "}"
        if isinstance(o, (list, tuple)):
            return "[" + ",".join(enc(v) for v in o) + "]"
        if isinstance(o, bool) or o is None:
            return json.dumps(o)
        if isinstance(o, (int, np.integer)):
            return str(int(o))
        if isinstance(o, (float, np.floating)):
            if not np.isfinite(o):
                raise InvalidInputError("cannot serialise non-finite float")
            return _fmt(o)
        if isinstance(o, str):
            return json.dumps(o)
        raise TypeError(f"cannot serialise {type(o)}")
    return enc(doc)


@dataclass
class CorpusConfig:
    K: int = 24
    D: int = 64
    D_obs: int = 128
    grammars: list[TaskGrammar] = field(default_factory=list)
    sequences_per_grammar: int = 100
    obs_noise_sigma: float = 0.2
    label_temperature: float = 0.05
    seed: int = 0

    def violations(self) -> list[str]:
        out = []
        for name in ("K", "D", "D_obs", "sequences_per_grammar"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be positive")
        if self.D < 2:
            out.append("D must be at least 2")
        if self.D_obs < self.D:
            out.append("D_obs must be at least D")
        if self.obs_noise_sigma < 0:
            out.append("obs_noise_sigma must be >= 0")
        if self.label_temperature <= 0:
            out.append("label_temperature must be > 0")
        if not self.grammars:
            out.append("at least one grammar is required")
        ids = [g.task_id for g in self.grammars]
        if len(set(ids)) != len(ids):
            out.append("grammar task ids must be unique")
        for g in self.grammars:
            out.extend(g.violations(self.K))
        return out

    def validate(self) -> "CorpusConfig":
        problems = self.violations()
        if problems:
            raise InvalidConfigError(problems)
        return self


def _phrase_texts(K: int, rng: np.random.Generator) -> list[str]:
    pairs = [f"{v} {n}" for v, n in itertools.product(VERBS, NOUNS)]
    order = rng.permutation(len(pairs))
    texts = [pairs[i] for i in order[:K]]
    for extra in range(K - len(texts)):
        texts.append(f"{pairs[order[extra % len(pairs)]]} {extra // len(pairs) + 2}")
    return texts


def build_phrase_table(K: int, D: int, D_obs: int, rng: np.random.Generator) -> PhraseTable:
    if K < 1:
        raise InvalidConfigError(f"K must be >= 1, got {K}")
    if D < 2:
        raise InvalidConfigError(f"D must be >= 2, got {D}")
    if D_obs < D:
        raise InvalidConfigError(f"D_obs ({D_obs}) must be >= D ({D})")
    raw = rng.standard_normal((K, D))
    emb = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    q, r = np.linalg.qr(rng.standard_normal((D_obs, D)))
    lift = q * np.sign(np.diag(r))
    texts = _phrase_texts(K, rng)
    phrases = [StepPhrase(i, t) for i, t in enumerate(texts)]
    return PhraseTable(phrases, emb, lift)


def sample_step_sequence(grammar: TaskGrammar, rng: np.random.Generator,
                         n_phrases: int | None = None) -> list[int]:
    """Draw one realisation of a task.

    ``n_phrases`` is the size of the pool distractors are drawn from; it is
    required whenever the grammar inserts distractors.
    """
    probs = np.array([p for _, p in grammar.orderings])
    pick = int(rng.choice(len(probs), p=probs / probs.sum()))
    steps = list(grammar.orderings[pick][0])

    if grammar.swap_rate > 0:
        for i in range(len(steps) - 1):
            if rng.random() < grammar.swap_rate:
                steps[i], steps[i + 1] = steps[i + 1], steps[i]

    if grammar.drop_rate > 0:
        kept = []
        remaining = len(steps)
        for s in steps:
            if rng.random() < grammar.drop_rate and remaining > MIN_SEQ_LEN:
                remaining -= 1
                continue
            kept.append(s)
        steps = kept

    if grammar.distractor_rate > 0:
        if n_phrases is None:
            raise InvalidInputError("n_phrases is required when distractor_rate > 0")
        out = []
        for i, s in enumerate(steps):
            room = len(out) + len(steps) - i < MAX_SEQ_LEN
            if room and rng.random() < grammar.distractor_rate:
                out.append(int(rng.integers(n_phrases)))
            out.append(s)
        steps = out
    return steps


def synthesize_observation(step_id: int, table: PhraseTable, sigma: float,
                           rng: np.random.Generator, time_index: int = 0) -> ClipObservation:
    if not 0 <= step_id < table.K:
        raise InvalidInputError(f"unknown step id {step_id}")
    raw = table.lift @ table.embeddings[step_id]
    if sigma > 0:
        raw = raw + sigma * rng.standard_normal(table.obs_dim)
    return ClipObservation(raw, time_index)


def make_soft_targets(obs: ClipObservation, table: PhraseTable, tau_label: float) -> SoftTarget:
    if tau_label <= 0:
        raise InvalidConfigError(f"label temperature must be > 0, got {tau_label}")
    proj = table.project(obs.raw)
    norm = np.linalg.norm(proj)
    if norm == 0.0:
        warnings.warn("observation projects to the zero vector; using a uniform target")
        return SoftTarget(np.full(table.K, 1.0 / table.K), degenerate=True)
    cos = table.embeddings @ (proj / norm)
    w = softmax(cos / tau_label)
    return SoftTarget(w / w.sum())


def split_assignment(n: int) -> list[str]:
    """Train/val/test labels for sequence indices 0..n-1, ranked by index hash."""
    ranked = sorted(range(n), key=lambda i: hashlib.sha256(f"seq-{i}".encode()).digest())
    n_train = round(SPLIT_FRACTIONS[0] * n)
    n_val = round(SPLIT_FRACTIONS[1] * n)
    labels = [""] * n
    for rank, i in enumerate(ranked):
        labels[i] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    return labels


def generate_corpus(config: CorpusConfig) -> tuple[list[ClipSequence], PhraseTable]:
    config.validate()
    table = build_phrase_table(config.K, config.D, config.D_obs, seeded_rng(config.seed, "table"))
    total = len(config.grammars) * config.sequences_per_grammar
    splits = split_assignment(total)
    sequences = []
    index = 0
    for grammar in config.grammars:
        for _ in range(config.sequences_per_grammar):
            rng = seeded_rng(config.seed, "sequence", index)
            steps = sample_step_sequence(grammar, rng, n_phrases=config.K)
            clips = [synthesize_observation(s, table, config.obs_noise_sigma, rng, time_index=k)
                     for k, s in enumerate(steps)]
            targets = [make_soft_targets(c, table, config.label_temperature) for c in clips]
            sequences.append(ClipSequence(grammar.task_id, clips, steps, targets,
                                          split=splits[index], index=index))
            index += 1
    return sequences, table


def by_split(sequences: list[ClipSequence], split: str) -> list[ClipSequence]:
    return [s for s in sequences if s.split == split]


def sequence_to_json(seq: ClipSequence) -> str:
    doc = {
        "task_id": seq.task_id,
        "split": seq.split,
        "phrase_ids": [int(i) for i in seq.phrase_ids],
        "observations": [[float(v) for v in c.raw] for c in seq.clips],
        "soft_targets": [{k: float(v) for k, v in t.as_mapping().items()} for t in seq.soft_targets],
    }
    return _dump_with_literals(doc)


def sequence_from_json(line: str, K: int, index: int = 0) -> ClipSequence:
    doc = json.loads(line)
    clips = [ClipObservation(np.array(o, dtype=np.float64), k) for k, o in enumerate(doc["observations"])]
    targets = [SoftTarget.from_mapping(t, K) for t in doc["soft_targets"]]
    return ClipSequence(int(doc["task_id"]), clips, [int(i) for i in doc["phrase_ids"]],
                        targets, split=doc["split"], index=index)


def corpus_files(sequences: list[ClipSequence], table: PhraseTable) -> dict[str, bytes]:
    return {
        "corpus.jsonl": "".join(sequence_to_json(s) + "\n" for s in sequences).encode(),
        "phrase_table.json": (table.to_json() + "\n").encode(),
    }


def write_corpus(directory: Path, sequences: list[ClipSequence], table: PhraseTable) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, data in corpus_files(sequences, table).items():
        (directory / name).write_bytes(data)
        paths[name] = directory / name
    return paths


def read_corpus(directory: Path) -> tuple[list[ClipSequence], PhraseTable]:
    directory = Path(directory)
    table = PhraseTable.from_json((directory / "phrase_table.json").read_text())
    sequences = []
    with open(directory / "corpus.jsonl") as fh:
        for i, line in enumerate(fh):
            if line.strip():
                sequences.append(sequence_from_json(line, table.K, index=i))
    return sequences, table


# The fixed acceptance benchmark: two deterministic tasks that reuse the same
# opening steps in a different order, and one task with a 0.7/0.3 branch.
B1_GRAMMARS = (
    ((0, 1, 2, 3, 4, 5, 6, 7), 1.0),
    (((8, 9, 10, 11, 12, 13), 0.7), ((8, 10, 9, 12, 11, 13), 0.3)),
    ((1, 0, 3, 2, 16, 17, 18), 1.0),
)
B1_SWAP_RATE = 0.05


def b1_grammars(swap_rate: float = B1_SWAP_RATE) -> list[TaskGrammar]:
    return [
        TaskGrammar(0, [B1_GRAMMARS[0]], swap_rate=swap_rate),
        TaskGrammar(1, list(B1_GRAMMARS[1]), swap_rate=swap_rate),
        TaskGrammar(2, [B1_GRAMMARS[2]], swap_rate=swap_rate),
    ]


def b1_config(seed: int, sequences_per_grammar: int = 2084) -> CorpusConfig:
    """Benchmark B1: 3 tasks, K=24, D=64, lengths 6-8, ~5k training sequences."""
    return CorpusConfig(K=24, D=64, D_obs=128, grammars=b1_grammars(),
                        sequences_per_grammar=sequences_per_grammar,
                        obs_noise_sigma=0.2, label_temperature=0.05, seed=seed)
