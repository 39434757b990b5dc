"""End-to-end runs on the synthetic benchmark B1 (one call per seed)."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .corpus import TaskGrammar, b1_config, b1_grammars, by_split, generate_corpus
from .evaluation import (
    activity_predictions,
    branch_diversity,
    classify_clips,
    diversity_stats,
    evaluate_forecasting,
    forecast_probs,
    top1_accuracy,
)
from .training import (
    ForecastSet,
    ModelBundle,
    ModelConfig,
    TrainConfig,
    clip_dataset,
    finetune_activity,
    finetune_forecaster,
    fit_linear_probe,
    forecast_examples,
    pretrain,
)

log = logging.getLogger(__name__)


@dataclass
class B1Settings:
    sequences_per_grammar: int = 2084
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20, batch_size=64,
                                                                       lr=1e-3))
    probe: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20, batch_size=256,
                                                                    lr=1e-2, grad_clip=None))
    forecast: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=6, batch_size=64, lr=3e-4, contexts_per_sequence=2, denoise_weight=1.0))
    baseline: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs=30, batch_size=256, lr=1e-2, grad_clip=None))
    activity: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=3, batch_size=64,
                                                                       lr=3e-4))
    model: ModelConfig = field(default_factory=ModelConfig)
    samples: int = 32
    oracle_k: int = 5
    diversity_k: int = 5


def valid_next(grammars: list[TaskGrammar], ex: ForecastSet) -> list[set[int]]:
    by_task = {g.task_id: g for g in grammars}
    return [by_task[int(t)].continuations(ids) for t, ids in zip(ex.task_ids, ex.context_ids)]


def _seeded(cfg: TrainConfig, seed: int) -> TrainConfig:
    return replace(cfg, seed=seed)


def _probe_accuracy(bundle: ModelBundle, train, val, cfg: TrainConfig) -> tuple[ModelBundle, float]:
    obs, y = clip_dataset(train)
    probed, _ = fit_linear_probe(bundle, obs, y, cfg)
    vobs, vy = clip_dataset(val)
    return probed, top1_accuracy(classify_clips(probed, vobs), vy)


def _loss_bound(history) -> dict:
    worst, negative = 0.0, 0
    for row in history.steps:
        worst = max(worst, abs(row["total"] - (row["xe"] + row["mse"] + row["mc"])))
        negative += any(row[k] < 0 for k in ("xe", "mse", "mc"))
    return {"max_abs_gap": worst, "negative_steps": negative, "logged_steps": len(history.steps),
            "first_loss": history.steps[0]["total"], "last_epoch_loss": history.epochs[-1]["train_loss"],
            "first_epoch_loss": history.epochs[0]["train_loss"]}


def run_b1(seed: int, settings: B1Settings | None = None) -> dict:
    """Every comparison used by the acceptance checks, for one seed."""
    s = settings or B1Settings()
    timings: dict[str, float] = {}
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        timings[name] = now - clock
        clock = now

    grammars = b1_grammars()
    seqs, table = generate_corpus(replace(b1_config(seed), sequences_per_grammar=s.sequences_per_grammar))
    train, val = by_split(seqs, "train"), by_split(seqs, "val")
    lap("corpus")

    pre = _seeded(s.pretrain, seed)
    full, full_hist = pretrain(train, table, replace(pre, variant="diffusion"), s.model)
    lap("pretrain_full")
    matching, match_hist = pretrain(train, table, replace(pre, variant="matching"), s.model)
    lap("pretrain_matching")
    masked, mask_hist = pretrain(train, table, replace(pre, variant="mask"), s.model)
    lap("pretrain_mask")

    before = {name: b.checksums() for name, b in
              (("full", full), ("matching", matching), ("mask", masked))}

    out: dict = {"seed": seed, "n_train": len(train), "n_val": len(val)}
    out["loss"] = {"full": _loss_bound(full_hist), "matching": _loss_bound(match_hist),
                   "mask": _loss_bound(mask_hist)}

    # representation quality
    full_probe, out["probe_full"] = _probe_accuracy(full, train, val, _seeded(s.probe, seed))
    match_probe, out["probe_matching"] = _probe_accuracy(matching, train, val, _seeded(s.probe, seed))
    lap("probes")

    vobs, vy = clip_dataset(val)
    out["zero_shot_classify"] = top1_accuracy(classify_clips(full, vobs, "zero-shot"), vy)

    # zero-shot forecasting with the deterministic approximate chain
    ex = forecast_examples(full.encoder, val)
    nxt = valid_next(grammars, ex)
    y = ex.targets.numpy()
    det = np.flatnonzero(np.isin(ex.task_ids, [g.task_id for g in grammars if g.is_deterministic()])
                         & np.array([len(v) == 1 for v in nxt]))
    branching_task = np.flatnonzero(ex.task_ids == 1)
    zs = forecast_probs(full, ex.subset(det), 0, seed, head="zero-shot")[:, 0].argmax(-1)
    out["zero_shot_forecast_deterministic"] = top1_accuracy(zs, y[det])
    lap("zero_shot_forecast")

    # fine-tuned forecasting
    fc = _seeded(s.forecast, seed)
    full_fc, _ = finetune_forecaster(full, train, fc, "diffusion")
    lap("finetune_diffusion")
    mask_fc, _ = finetune_forecaster(masked, train, fc, "mask")
    lap("finetune_mask")
    base_fc, _ = finetune_forecaster(matching, train, _seeded(s.baseline, seed), "mean")
    lap("finetune_mean")
    forecast = {}
    for name, b in (("diffusion", full_fc), ("mask", mask_fc), ("mean", base_fc)):
        pred = forecast_probs(b, forecast_examples(b.encoder, val), 0, seed)[:, 0].argmax(-1)
        forecast[name] = {"all": top1_accuracy(pred, y),
                          "branching_task": top1_accuracy(pred[branching_task], y[branching_task]),
                          "deterministic": top1_accuracy(pred[det], y[det])}
    out["forecast"] = forecast
    ft = evaluate_forecasting(full_fc, ex, s.samples, s.oracle_k, seed)
    out["inference_schemes"] = _scheme_summary(ft, y, branching_task, s.oracle_k)
    lap("forecast_eval")

    # sampling diversity of the fine-tuned diffusion forecaster
    div = branch_diversity(full_fc, ex, nxt, s.diversity_k, seed)
    det_div = diversity_stats(full_fc, ex.subset(det), [nxt[i] for i in det], s.diversity_k, seed)
    out["diversity"] = {"branch": asdict(div), "deterministic_modal_share": det_div.modal_share,
                        "deterministic_mean_distinct": det_div.mean_distinct}
    lap("diversity")

    act, _ = finetune_activity(full, train, _seeded(s.activity, seed))
    vt = np.array([q.task_id for q in val])
    out["activity"] = top1_accuracy(activity_predictions(act, val), vt)
    lap("activity")

    after = {"full": full.checksums(), "matching": matching.checksums(), "mask": masked.checksums()}
    frozen = {"probe": full_probe.checksums()["encoder"] == before["full"]["encoder"]
              and match_probe.checksums()["encoder"] == before["matching"]["encoder"],
              "forecast": all(b.checksums()["encoder"] == before[n]["encoder"] for n, b in
                              (("full", full_fc), ("mask", mask_fc), ("matching", base_fc))),
              "activity": act.checksums()["encoder"] == before["full"]["encoder"],
              "parents_untouched": after == before}
    out["frozen"] = frozen
    out["timings"] = timings
    return out


def _scheme_summary(m, y, branching_rows, k: int) -> dict:
    samples = m.predictions["samples"]
    bt = branching_rows
    return {"approximate": m.approximate, "expectation": m.expectation,
            "single_sample": m.single_sample, "oracle": m.oracle,
            "branching_single": top1_accuracy(samples[bt, 0], y[bt]),
            "branching_oracle": float(np.mean(np.any(samples[bt, :k] == y[bt, None], axis=1)))}
