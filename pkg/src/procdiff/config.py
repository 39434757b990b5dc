"""YAML experiment configuration with strict keys and line-precise errors."""
from __future__ import annotations

import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import yaml

from .core import InvalidConfigError
from .corpus import CorpusConfig, TaskGrammar, b1_grammars
from .training import ModelConfig, TrainConfig

INFERENCE_MODES = ("approximate", "expectation", "oracle")


@dataclass
class InferenceConfig:
    mode: str = "approximate"
    k: int = 5
    samples: int = 32

    def violations(self) -> list[str]:
        out = []
        if self.mode not in INFERENCE_MODES:
            out.append(f"inference.mode must be one of {INFERENCE_MODES}")
        if self.k < 1:
            out.append("inference.k must be >= 1")
        if self.samples < 1:
            out.append("inference.samples must be >= 1")
        return out


def _default_finetune() -> TrainConfig:
    return TrainConfig(epochs=6, batch_size=64, lr=3e-4, contexts_per_sequence=2,
                       denoise_weight=1.0)


def _default_probe() -> TrainConfig:
    return TrainConfig(epochs=20, batch_size=256, lr=1e-2, grad_clip=None)


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs"
    corpus: CorpusConfig = field(default_factory=lambda: CorpusConfig(grammars=b1_grammars()))
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: TrainConfig = field(default_factory=TrainConfig)
    probe: TrainConfig = field(default_factory=_default_probe)
    forecast: TrainConfig = field(default_factory=_default_finetune)
    activity: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=3, lr=3e-4))
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["corpus"]["grammars"] = [
            {"task_id": g.task_id,
             "orderings": [{"steps": list(s), "p": p} for s, p in g.orderings],
             "swap_rate": g.swap_rate, "drop_rate": g.drop_rate,
             "distractor_rate": g.distractor_rate}
            for g in self.corpus.grammars]
        return doc

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed, corpus=replace(self.corpus, seed=seed),
                       **{k: replace(getattr(self, k), seed=seed)
                          for k in ("pretrain", "probe", "forecast", "activity")})


_SECTIONS = {"corpus": CorpusConfig, "model": ModelConfig, "pretrain": TrainConfig,
             "probe": TrainConfig, "forecast": TrainConfig, "activity": TrainConfig,
             "inference": InferenceConfig}
_GRAMMAR_KEYS = {"task_id", "orderings", "swap_rate", "drop_rate", "distractor_rate"}
_ORDERING_KEYS = {"steps", "p"}


def _line(node: yaml.Node) -> str:
    return f"line {node.start_mark.line + 1}"


def _scalar(node: yaml.Node, tp, where: str, errors: list[str]):
    """Convert a scalar node to ``tp`` (int, float, bool, str or Optional thereof)."""
    args = typing.get_args(tp)
    optional = type(None) in args
    base = next((a for a in args if a is not type(None)), tp) if args else tp
    if not isinstance(node, yaml.ScalarNode):
        errors.append(f"{_line(node)}: {where} must be a scalar")
        return None
    value = yaml.safe_load(yaml.serialize(node))
    if value is None:
        if optional:
            return None
        errors.append(f"{_line(node)}: {where} must not be null")
        return None
    if base is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if base is int and isinstance(value, bool) or not isinstance(value, base):
        errors.append(f"{_line(node)}: {where} must be {base.__name__}, got {value!r}")
        return None
    return value


def _mapping(node: yaml.Node, where: str, errors: list[str]) -> list[tuple[str, yaml.Node, yaml.Node]]:
    if not isinstance(node, yaml.MappingNode):
        errors.append(f"{_line(node)}: {where} must be a mapping")
        return []
    return [(k.value, k, v) for k, v in node.value]


def _section(node: yaml.Node, cls, where: str, errors: list[str], skip=()) -> dict:
    types = typing.get_type_hints(cls)
    out = {}
    for key, knode, vnode in _mapping(node, where, errors):
        if key in skip:
            continue
        if key not in types:
            errors.append(f"{_line(knode)}: unknown key '{key}' in {where}")
            continue
        value = _scalar(vnode, types[key], f"{where}.{key}", errors)
        if value is not None or vnode.tag.endswith(":null"):
            out[key] = value
    return out


def _grammars(node: yaml.Node, errors: list[str]) -> list[TaskGrammar]:
    if isinstance(node, yaml.ScalarNode) and node.value == "b1":
        return b1_grammars()
    if not isinstance(node, yaml.SequenceNode):
        errors.append(f"{_line(node)}: corpus.grammars must be a list or 'b1'")
        return []
    out = []
    for gi, gnode in enumerate(node.value):
        where = f"corpus.grammars[{gi}]"
        kw: dict = {}
        orderings = []
        for key, knode, vnode in _mapping(gnode, where, errors):
            if key not in _GRAMMAR_KEYS:
                errors.append(f"{_line(knode)}: unknown key '{key}' in {where}")
            elif key == "orderings":
                if not isinstance(vnode, yaml.SequenceNode):
                    errors.append(f"{_line(vnode)}: {where}.orderings must be a list")
                    continue
                for oi, onode in enumerate(vnode.value):
                    steps, p = None, None
                    for okey, oknode, ovnode in _mapping(onode, f"{where}.orderings[{oi}]", errors):
                        if okey not in _ORDERING_KEYS:
                            errors.append(f"{_line(oknode)}: unknown key '{okey}' in "
                                          f"{where}.orderings[{oi}]")
                        elif okey == "p":
                            p = _scalar(ovnode, float, f"{where}.orderings[{oi}].p", errors)
                        elif isinstance(ovnode, yaml.SequenceNode):
                            steps = [_scalar(s, int, f"{where}.orderings[{oi}].steps", errors)
                                     for s in ovnode.value]
                        else:
                            errors.append(f"{_line(ovnode)}: steps must be a list of ids")
                    if steps is None or p is None:
                        errors.append(f"{_line(onode)}: {where}.orderings[{oi}] needs steps and p")
                    else:
                        orderings.append((steps, p))
            else:
                tp = int if key == "task_id" else float
                kw[key] = _scalar(vnode, tp, f"{where}.{key}", errors)
        if "task_id" not in kw:
            errors.append(f"{_line(gnode)}: {where} needs a task_id")
            continue
        try:
            out.append(TaskGrammar(orderings=orderings, **{k: v for k, v in kw.items() if v is not None}))
        except (InvalidConfigError, TypeError) as exc:
            errors.append(f"{_line(gnode)}: {exc}")
    return out


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse and validate; every problem is reported, each with its line number."""
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark else "unknown line"
        raise InvalidConfigError(f"{source}: {where}: malformed YAML ({getattr(exc, 'problem', exc)})")
    if root is None:
        return ExperimentConfig()
    errors: list[str] = []
    cfg = ExperimentConfig()
    updates: dict = {}
    for key, knode, vnode in _mapping(root, "config", errors):
        if key in ("seed", "output_dir"):
            value = _scalar(vnode, int if key == "seed" else str, key, errors)
            if value is not None:
                updates[key] = value
        elif key in _SECTIONS:
            cls = _SECTIONS[key]
            values = _section(vnode, cls, key, errors, skip=("grammars",) if key == "corpus" else ())
            if key == "corpus":
                gnode = next((v for k, _, v in _mapping(vnode, key, []) if k == "grammars"), None)
                if gnode is not None:
                    values["grammars"] = _grammars(gnode, errors)
            try:
                updates[key] = replace(getattr(cfg, key), **values)
            except InvalidConfigError as exc:
                errors.append(f"{_line(vnode)}: {exc}")
        else:
            errors.append(f"{_line(knode)}: unknown key '{key}'")
    if errors:
        raise InvalidConfigError([f"{source}: {e}" for e in errors])
    cfg = replace(cfg, **updates)
    # the top-level seed drives every stage unless a section overrides it
    if "seed" in updates:
        cfg = _seed_sections(cfg, root)
    problems = [f"corpus: {v}" for v in cfg.corpus.violations()]
    problems += [f"model: {v}" for v in cfg.model.violations()]
    for name in ("pretrain", "probe", "forecast", "activity"):
        problems += [f"{name}: {v}" for v in getattr(cfg, name).violations()]
    problems += cfg.inference.violations()
    if cfg.corpus.D != cfg.model.dim or cfg.corpus.D_obs != cfg.model.obs_dim:
        problems.append("model.dim/obs_dim must match corpus.D/D_obs")
    if problems:
        raise InvalidConfigError([f"{source}: {p}" for p in problems])
    return cfg


def _seed_sections(cfg: ExperimentConfig, root: yaml.Node) -> ExperimentConfig:
    explicit = {k: {kk for kk, _, _ in _mapping(v, k, [])}
                for k, _, v in _mapping(root, "config", []) if k in _SECTIONS}
    changes = {}
    for name in ("corpus", "pretrain", "probe", "forecast", "activity"):
        if "seed" not in explicit.get(name, set()):
            changes[name] = replace(getattr(cfg, name), seed=cfg.seed)
    return replace(cfg, **changes)


def load_config(path: Path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)

