"""Pre-training and the frozen-encoder fine-tuning protocols."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core import (
    DTYPE,
    MAX_SEQ_LEN,
    ClipSequence,
    DivergenceError,
    InvalidConfigError,
    InvalidInputError,
    module_checksum,
    seeded_rng,
    torch_generator,
)
from .corpus import PhraseTable
from .diffusion import Denoiser, NoiseSchedule, forward_marginal, make_schedule, run_chain
from .encoders import ClassifierHead, ClipEncoder, match_logits, phrase_matrix
from .objective import VARIANTS, Batch, batch_loss_terms, collate, soft_cross_entropy

log = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam", "adamw", "sgd+adamw")
MAX_CONTEXT = MAX_SEQ_LEN - 1


@dataclass
class ModelConfig:
    dim: int = 64
    obs_dim: int = 128
    hidden: int = 128
    activation: str = "gelu"
    layers: int = 4
    heads: int = 4
    ff_mult: int = 4
    T: int = 4
    tau: float = 0.02

    def violations(self) -> list[str]:
        out = [f"{k} must be positive" for k in ("dim", "obs_dim", "hidden", "layers", "heads",
                                                  "ff_mult", "T") if getattr(self, k) < 1]
        if self.tau <= 0:
            out.append("tau must be > 0")
        if self.dim % max(self.heads, 1):
            out.append("dim must be divisible by heads")
        return out


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    sgd_epochs: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    stop_gradient: bool = True
    variant: str = "diffusion"
    eval_every: int = 1
    grad_clip: float | None = 1.0
    contexts_per_sequence: int | None = None
    max_steps: int | None = None
    denoise_weight: float = 0.0

    def violations(self) -> list[str]:
        out = []
        for k in ("epochs", "batch_size", "eval_every"):
            if getattr(self, k) < 1:
                out.append(f"{k} must be positive")
        if self.lr <= 0:
            out.append("lr must be positive")
        if self.denoise_weight < 0:
            out.append("denoise_weight must be >= 0")
        if self.weight_decay < 0:
            out.append("weight_decay must be >= 0")
        if self.optimizer not in OPTIMIZERS:
            out.append(f"optimizer must be one of {OPTIMIZERS}")
        if self.variant not in VARIANTS:
            out.append(f"variant must be one of {VARIANTS}")
        if self.contexts_per_sequence is not None and self.contexts_per_sequence < 1:
            out.append("contexts_per_sequence must be positive")
        return out

    def validate(self) -> "TrainConfig":
        problems = self.violations()
        if problems:
            raise InvalidConfigError(problems)
        return self

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


@dataclass
class ModelBundle:
    model_config: ModelConfig
    table: PhraseTable
    schedule: NoiseSchedule
    encoder: ClipEncoder
    denoiser: Denoiser | None
    variant: str = "diffusion"
    probe_head: ClassifierHead | None = None
    forecast_head: ClassifierHead | None = None
    forecast_variant: str | None = None
    activity_head: ClassifierHead | None = None
    activity_tasks: list[int] | None = None
    provenance: dict = field(default_factory=dict)
    step_count: int = 0
    optimizer_state: dict | None = field(default=None, repr=False)

    @property
    def tau(self) -> float:
        return self.model_config.tau

    def components(self) -> dict[str, nn.Module]:
        named = {"encoder": self.encoder, "denoiser": self.denoiser, "probe_head": self.probe_head,
                 "forecast_head": self.forecast_head, "activity_head": self.activity_head}
        return {k: v for k, v in named.items() if v is not None}

    def checksums(self) -> dict[str, str]:
        return {k: module_checksum(m) for k, m in self.components().items()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, value in sorted(self.checksums().items()):
            h.update(f"{name}:{value}".encode())
        h.update(self.table.digest().encode())
        return h.hexdigest()

    def copy(self) -> "ModelBundle":
        return copy.deepcopy(self)


def new_bundle(table: PhraseTable, model_config: ModelConfig, seed: int,
               variant: str = "diffusion") -> ModelBundle:
    problems = model_config.violations()
    if table.dim != model_config.dim or table.obs_dim != model_config.obs_dim:
        problems.append(f"model dims ({model_config.dim}, {model_config.obs_dim}) do not match "
                        f"phrase table ({table.dim}, {table.obs_dim})")
    if problems:
        raise InvalidConfigError(problems)
    encoder = ClipEncoder(model_config.obs_dim, model_config.dim, model_config.hidden,
                          model_config.activation, generator=torch_generator(seed, "init", "encoder"))
    denoiser = None
    if variant != "matching":
        denoiser = Denoiser(model_config.dim, model_config.T, model_config.layers,
                            model_config.heads, model_config.ff_mult,
                            generator=torch_generator(seed, "init", "denoiser"))
    return ModelBundle(model_config, table, make_schedule(model_config.T), encoder, denoiser,
                       variant=variant)


def _make_optimizer(kind: str, params: list[Tensor], cfg: TrainConfig):
    if kind == "sgd":
        return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum,
                               weight_decay=cfg.weight_decay)
    if kind == "adam":
        return torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


def _phase(cfg: TrainConfig, epoch: int) -> str:
    if cfg.optimizer == "sgd+adamw":
        return "sgd" if epoch < cfg.sgd_epochs else "adamw"
    return cfg.optimizer


@dataclass
class History:
    epochs: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    skipped: int = 0


def _train_loop(params: list[Tensor], n_items: int, cfg: TrainConfig,
                step_fn: Callable[[np.ndarray, np.random.Generator], tuple[Tensor, dict]],
                eval_fn: Callable[[], dict] | None = None, start_step: int = 0,
                optimizer_state: dict | None = None, tag: str = "train",
                ) -> tuple[int, dict | None, History]:
    """Shared minibatch loop.

    Batch order for epoch e comes from stream (seed, tag, "order", e) and the
    draws of global step s from (seed, tag, "step", s), so a run resumed at
    any step continues exactly like an uninterrupted one.
    """
    cfg.validate()
    steps_per_epoch = int(np.ceil(n_items / cfg.batch_size))
    total_steps = steps_per_epoch * cfg.epochs
    stop_at = total_steps if cfg.max_steps is None else min(total_steps, cfg.max_steps)
    history = History()
    step = start_step
    opt, opt_kind = None, None
    while step < stop_at:
        epoch, offset = divmod(step, steps_per_epoch)
        kind = _phase(cfg, epoch)
        if kind != opt_kind:
            opt, opt_kind = _make_optimizer(kind, params, cfg), kind
            if optimizer_state is not None and optimizer_state.get("kind") == kind:
                opt.load_state_dict(optimizer_state["state"])
            optimizer_state = None
        order = seeded_rng(cfg.seed, tag, "order", epoch).permutation(n_items)
        epoch_losses = []
        for b in range(offset, steps_per_epoch):
            if step >= stop_at:
                break
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            loss, row = step_fn(idx, seeded_rng(cfg.seed, tag, "step", step))
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at step {step}",
                                      {"step": step, "epoch": epoch, "batch": idx.tolist(), **row})
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip is not None:
                nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()
            step += 1
            epoch_losses.append(float(loss.detach()))
            history.steps.append({"step": step, **row})
        completed = step == (epoch + 1) * steps_per_epoch
        record = {"epoch": epoch + 1, "step": step, "complete": completed,
                  "train_loss": float(np.mean(epoch_losses)) if epoch_losses else None}
        if eval_fn is not None and completed and (epoch + 1) % cfg.eval_every == 0:
            record.update(eval_fn())
        history.epochs.append(record)
        log.info("%s %s", tag, record)
    if opt is None:
        return step, optimizer_state, history
    return step, {"kind": opt_kind, "state": opt.state_dict()}, history


def _assert_frozen(before: dict[str, str], bundle: ModelBundle, names: Iterable[str]):
    after = bundle.checksums()
    for name in names:
        if before.get(name) != after.get(name):
            raise AssertionError(f"frozen component {name!r} changed during training")


def _freeze(module: nn.Module | None):
    if module is not None:
        for p in module.parameters():
            p.requires_grad_(False)


def _unfreeze(module: nn.Module | None):
    if module is not None:
        for p in module.parameters():
            p.requires_grad_(True)


def mean_loss(bundle: ModelBundle, sequences: Sequence[ClipSequence], rng: np.random.Generator,
              batch_size: int = 256, variant: str | None = None) -> dict:
    """Average loss terms with gradients off (validation curves)."""
    variant = variant or bundle.variant
    phrases = phrase_matrix(bundle.table)
    sums = np.zeros(3)
    with torch.no_grad():
        for start in range(0, len(sequences), batch_size):
            batch = collate(sequences[start:start + batch_size])
            terms = batch_loss_terms(bundle.encoder, bundle.denoiser, bundle.schedule, batch,
                                     phrases, bundle.tau, rng, variant=variant)
            sums += [float(terms.xe.sum()), float(terms.mse.sum()), float(terms.mc.sum())]
    xe, mse, mc = sums / max(len(sequences), 1)
    return {"xe": xe, "mse": mse, "mc": mc, "total": xe + mse + mc}


def pretrain(train: Sequence[ClipSequence], table: PhraseTable, config: TrainConfig,
             model_config: ModelConfig | None = None, val: Sequence[ClipSequence] = (),
             resume: ModelBundle | None = None) -> tuple[ModelBundle, History]:
    """Optimise the summed objective over encoder and denoiser."""
    config.validate()
    if not train:
        raise InvalidInputError("pre-training needs a non-empty train split")
    if resume is not None:
        bundle = resume
    else:
        bundle = new_bundle(table, model_config or ModelConfig(), config.seed, config.variant)
    phrases = phrase_matrix(table)
    modules = [bundle.encoder] + ([bundle.denoiser] if bundle.denoiser is not None else [])
    params = [p for m in modules for p in m.parameters()]
    for m in modules:
        _unfreeze(m)
        m.train()

    def step_fn(idx, rng):
        batch = collate([train[i] for i in idx])
        terms = batch_loss_terms(bundle.encoder, bundle.denoiser, bundle.schedule, batch, phrases,
                                 bundle.tau, rng, variant=config.variant,
                                 stop_gradient=config.stop_gradient)
        total = terms.total.mean()
        row = {"xe": terms.xe.mean().item(), "mse": terms.mse.mean().item(),
               "mc": terms.mc.mean().item(), "total": total.item(),
               "t": terms.sampled_t.tolist(), "j": terms.masked_slot.tolist()}
        return total, row

    def eval_fn():
        if not val:
            return {}
        res = mean_loss(bundle, list(val), seeded_rng(config.seed, "val"), variant=config.variant)
        return {f"val_{k}": v for k, v in res.items()}

    step, opt_state, history = _train_loop(
        params, len(train), config, step_fn, eval_fn, start_step=bundle.step_count,
        optimizer_state=bundle.optimizer_state, tag="pretrain")
    bundle.step_count = step
    bundle.optimizer_state = opt_state
    bundle.variant = config.variant
    bundle.provenance.update({"pretrain_config": config.digest(), "pretrain_steps": step})
    return bundle, history


def clip_dataset(sequences: Sequence[ClipSequence]) -> tuple[np.ndarray, np.ndarray]:
    obs = np.concatenate([s.observations() for s in sequences])
    labels = np.concatenate([np.asarray(s.phrase_ids) for s in sequences])
    return obs, labels


def embed(encoder: ClipEncoder, obs: np.ndarray, batch_size: int = 4096) -> Tensor:
    with torch.no_grad():
        parts = [encoder(torch.as_tensor(obs[i:i + batch_size]))
                 for i in range(0, len(obs), batch_size)]
    return torch.cat(parts) if parts else torch.zeros(0, encoder.dim, dtype=DTYPE)


def fit_linear_probe(bundle: ModelBundle, obs: np.ndarray, labels: np.ndarray,
                     config: TrainConfig) -> tuple[ModelBundle, History]:
    """Linear step classifier over frozen clip embeddings."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= bundle.table.K):
        raise InvalidInputError(f"labels must lie in [0, {bundle.table.K})")
    before = bundle.checksums()
    feats = embed(bundle.encoder, np.asarray(obs, dtype=np.float64))
    y = torch.as_tensor(labels)
    head = ClassifierHead(bundle.model_config.dim, bundle.table.K,
                          generator=torch_generator(config.seed, "init", "probe"))

    def step_fn(idx, rng):
        loss = F.cross_entropy(head(feats[idx]), y[idx])
        return loss, {"loss": float(loss.detach())}

    _, _, history = _train_loop(list(head.parameters()), len(labels), config, step_fn, tag="probe")
    _assert_frozen(before, bundle, ["encoder", "denoiser"])
    out = bundle.copy()
    out.probe_head = head
    out.provenance["probe_parent"] = bundle.digest()
    return out, history


@dataclass
class ForecastSet:
    """Next-step examples: embedded context at slots 0..c-1, target at slot c."""

    context: Tensor        # (n, MAX_CONTEXT + 1, D)
    valid: Tensor          # (n, MAX_CONTEXT + 1)
    mask_slot: Tensor      # (n,)
    targets: Tensor        # (n,)
    seq_index: np.ndarray  # (n,)
    position: np.ndarray   # (n,)
    task_ids: np.ndarray   # (n,)
    context_ids: list[tuple[int, ...]]
    next_emb: Tensor       # (n, D) embedding of the target clip
    next_soft: Tensor      # (n, K) pseudo label of the target clip

    def __len__(self) -> int:
        return len(self.targets)

    def subset(self, idx) -> "ForecastSet":
        idx = np.asarray(idx, dtype=np.int64)
        t = torch.as_tensor(idx)
        return ForecastSet(self.context[t], self.valid[t], self.mask_slot[t], self.targets[t],
                           self.seq_index[idx], self.position[idx], self.task_ids[idx],
                           [self.context_ids[i] for i in idx], self.next_emb[t], self.next_soft[t])


def forecast_examples(encoder: ClipEncoder, sequences: Sequence[ClipSequence],
                      max_context: int = MAX_CONTEXT) -> ForecastSet:
    """Every (prefix -> next step) pair; contexts keep at most ``max_context`` latest clips."""
    ctx_rows, targets, seq_index, position, tasks, ids, lengths = [], [], [], [], [], [], []
    next_emb, next_soft = [], []
    for si, seq in enumerate(sequences):
        emb = embed(encoder, seq.observations())
        soft = seq.target_matrix()
        for k in range(1, len(seq)):
            next_emb.append(emb[k])
            next_soft.append(soft[k])
            lo = max(0, k - max_context)
            ctx_rows.append(emb[lo:k])
            lengths.append(k - lo)
            targets.append(seq.phrase_ids[k])
            seq_index.append(si)
            position.append(k)
            tasks.append(seq.task_id)
            ids.append(tuple(seq.phrase_ids[lo:k]))
    n, width = len(targets), max_context + 1
    dim = encoder.dim
    context = torch.zeros(n, width, dim, dtype=DTYPE)
    for i, rows in enumerate(ctx_rows):
        context[i, :len(rows)] = rows
    lengths_t = torch.as_tensor(np.array(lengths, dtype=np.int64))
    valid = torch.arange(width)[None, :] < lengths_t[:, None]
    return ForecastSet(context, valid, lengths_t, torch.as_tensor(np.array(targets, dtype=np.int64)),
                       np.array(seq_index), np.array(position), np.array(tasks), ids,
                       torch.stack(next_emb), torch.as_tensor(np.array(next_soft)))


def forecast_features(bundle: ModelBundle, ex: ForecastSet, variant: str,
                      noise: Tensor | None = None) -> Tensor:
    """Representation the forecast head classifies: chain output, masked prediction or context mean."""
    if variant == "diffusion":
        return run_chain(bundle.denoiser, bundle.schedule, ex.context, ex.valid, ex.mask_slot, noise)
    if variant == "mask":
        return bundle.denoiser(ex.context, ex.valid, ex.mask_slot, None, None)
    if variant == "mean":
        w = ex.valid.to(DTYPE)
        return (ex.context * w[..., None]).sum(1) / w.sum(1, keepdim=True)
    raise InvalidInputError(f"unknown forecast variant {variant!r}")


def forecast_denoise_loss(bundle: ModelBundle, ex: ForecastSet, variant: str,
                          rng: np.random.Generator) -> Tensor:
    """Pre-training's mse + mc terms with the next slot masked behind a left-only context."""
    x0 = ex.next_emb
    if variant == "diffusion":
        t = torch.as_tensor(rng.integers(1, bundle.schedule.T + 1, size=len(ex)))
        eps = torch.as_tensor(rng.standard_normal(tuple(x0.shape)))
        x0_hat = bundle.denoiser(ex.context, ex.valid, ex.mask_slot,
                                 forward_marginal(x0, t, eps, bundle.schedule), t)
    else:
        x0_hat = bundle.denoiser(ex.context, ex.valid, ex.mask_slot, None, None)
    mse = ((x0_hat - x0) ** 2).sum(-1)
    mc = soft_cross_entropy(ex.next_soft, match_logits(x0_hat, phrase_matrix(bundle.table), bundle.tau))
    return (mse + mc).mean()


def _per_sequence_choice(ex: ForecastSet, k: int | None, rng: np.random.Generator) -> np.ndarray:
    if k is None:
        return np.arange(len(ex))
    chosen = []
    for si in np.unique(ex.seq_index):
        rows = np.flatnonzero(ex.seq_index == si)
        chosen.extend(rng.choice(rows, size=min(k, len(rows)), replace=False))
    return np.sort(np.array(chosen, dtype=np.int64))


def finetune_forecaster(bundle: ModelBundle, sequences: Sequence[ClipSequence], config: TrainConfig,
                        variant: str | None = None) -> tuple[ModelBundle, History]:
    """Next-step classifier on top of the frozen encoder.

    ``variant`` "diffusion" backpropagates through the zero-noise reverse
    chain, "mask" through one masked-prediction pass, and "mean" fits only a
    linear head over the averaged context embedding.
    """
    variant = variant or ("mean" if bundle.denoiser is None else
                          "mask" if bundle.variant == "mask" else "diffusion")
    if variant != "mean" and bundle.denoiser is None:
        raise InvalidInputError(f"forecast variant {variant!r} needs a denoiser")
    usable = [s for s in sequences if len(s) >= 2]
    skipped = len(sequences) - len(usable)
    if skipped:
        log.warning("skipping %d sequences without a forecast context", skipped)
    before = bundle.checksums()
    out = bundle.copy()
    _freeze(out.encoder)
    ex = forecast_examples(out.encoder, usable)
    head = ClassifierHead(out.model_config.dim, out.table.K,
                          generator=torch_generator(config.seed, "init", "forecast"))
    params = list(head.parameters())
    if variant != "mean":
        _unfreeze(out.denoiser)
        params += list(out.denoiser.parameters())
    selected = _per_sequence_choice(ex, config.contexts_per_sequence,
                                    seeded_rng(config.seed, "forecast", "select"))
    pool = ex.subset(selected) if config.contexts_per_sequence is not None else ex

    def step_fn(idx, rng):
        part = pool.subset(idx)
        logits = head(forecast_features(out, part, variant))
        loss = F.cross_entropy(logits, part.targets)
        row = {"ce": float(loss.detach())}
        if variant != "mean" and config.denoise_weight > 0:
            aux = forecast_denoise_loss(out, part, variant, rng)
            row["denoise"] = float(aux.detach())
            loss = loss + config.denoise_weight * aux
        row["loss"] = float(loss.detach())
        return loss, row

    _, _, history = _train_loop(params, len(pool), config, step_fn, tag=f"forecast-{variant}")
    history.skipped = skipped
    _freeze(out.denoiser)
    if out.checksums()["encoder"] != before["encoder"]:
        raise AssertionError("encoder changed during forecast fine-tuning")
    out.forecast_head = head
    out.forecast_variant = variant
    out.provenance["forecast_parent"] = bundle.digest()
    return out, history


def finetune_activity(bundle: ModelBundle, sequences: Sequence[ClipSequence], config: TrainConfig,
                      labels: Sequence[int] | None = None) -> tuple[ModelBundle, History]:
    """Sequence-level task classifier from the denoiser's readout slot."""
    if bundle.denoiser is None:
        raise InvalidInputError("activity fine-tuning needs a denoiser")
    task_labels = np.asarray(labels if labels is not None else [s.task_id for s in sequences])
    tasks = sorted({int(t) for t in task_labels})
    if bundle.activity_tasks is not None:
        unknown = set(tasks) - set(bundle.activity_tasks)
        if unknown:
            raise InvalidInputError(f"unknown task ids {sorted(unknown)}")
        tasks = bundle.activity_tasks
    index = {t: i for i, t in enumerate(tasks)}
    y = torch.as_tensor(np.array([index[int(t)] for t in task_labels], dtype=np.int64))
    before = bundle.checksums()
    out = bundle.copy()
    _freeze(out.encoder)
    _unfreeze(out.denoiser)
    batch = collate(list(sequences))
    feats = embed(out.encoder, batch.obs.reshape(-1, batch.obs.shape[-1]).numpy()).reshape(
        len(batch), -1, out.model_config.dim)
    head = ClassifierHead(out.model_config.dim, len(tasks),
                          generator=torch_generator(config.seed, "init", "activity"))
    params = list(head.parameters()) + list(out.denoiser.parameters())

    def step_fn(idx, rng):
        t = torch.as_tensor(idx)
        logits = head(out.denoiser.readout(feats[t], batch.valid[t]))
        loss = F.cross_entropy(logits, y[t])
        return loss, {"loss": float(loss.detach())}

    _, _, history = _train_loop(params, len(y), config, step_fn, tag="activity")
    _freeze(out.denoiser)
    if out.checksums()["encoder"] != before["encoder"]:
        raise AssertionError("encoder changed during activity fine-tuning")
    out.activity_head = head
    out.activity_tasks = tasks
    out.provenance["activity_parent"] = bundle.digest()
    return out, history
