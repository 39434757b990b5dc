import numpy as np
import pytest
import torch

from procdiff.core import DivergenceError, InvalidConfigError, InvalidInputError
from procdiff.corpus import CorpusConfig, TaskGrammar, b1_config, by_split, generate_corpus
from procdiff.evaluation import activity_predictions, classify_clips, forecast_probs, top1_accuracy
from procdiff.training import (
    ModelConfig,
    TrainConfig,
    clip_dataset,
    finetune_activity,
    finetune_forecaster,
    fit_linear_probe,
    forecast_examples,
    new_bundle,
    pretrain,
)

SMALL = ModelConfig(layers=2)


@pytest.fixture(scope="module")
def b1_small():
    seqs, table = generate_corpus(b1_config(5, sequences_per_grammar=300))
    train, val = by_split(seqs, "train"), by_split(seqs, "val")
    bundle, hist = pretrain(train, table, TrainConfig(epochs=4, seed=5), SMALL, val=val)
    return bundle, hist, train, val, table


def test_train_config_validation():
    with pytest.raises(InvalidConfigError) as err:
        TrainConfig(epochs=0, lr=-1.0, optimizer="rmsprop").validate()
    assert len(err.value.violations) == 3


def test_pretrain_deterministic():
    seqs, table = generate_corpus(b1_config(2, sequences_per_grammar=4))
    cfg = TrainConfig(epochs=1, batch_size=4, seed=3)
    runs = [pretrain(seqs[:10], table, cfg, SMALL) for _ in range(2)]
    assert runs[0][1].steps[-1]["total"] == runs[1][1].steps[-1]["total"]
    assert runs[0][0].digest() == runs[1][0].digest()


def test_pretrain_progress_and_phrase_table_frozen(b1_small):
    bundle, hist, *_ , table = b1_small
    assert hist.epochs[-1]["val_total"] < hist.epochs[0]["val_total"]
    assert hist.epochs[-1]["train_loss"] < hist.epochs[0]["train_loss"]
    assert bundle.table is table or bundle.table.digest() == table.digest()


def test_resume_matches_uninterrupted():
    seqs, table = generate_corpus(b1_config(4, sequences_per_grammar=10))
    cfg = TrainConfig(epochs=2, batch_size=8, seed=4)
    full, _ = pretrain(seqs, table, cfg, SMALL)
    part, _ = pretrain(seqs, table, TrainConfig(epochs=2, batch_size=8, seed=4, max_steps=5), SMALL)
    assert part.step_count == 5
    resumed, _ = pretrain(seqs, table, cfg, resume=part)
    assert resumed.step_count == full.step_count
    assert resumed.checksums() == full.checksums()


def test_divergence_reports_batch():
    seqs, table = generate_corpus(b1_config(6, sequences_per_grammar=2))
    seqs[0].clips[0].raw[:] = np.nan
    with pytest.raises(DivergenceError) as err:
        pretrain(seqs, table, TrainConfig(epochs=1, batch_size=len(seqs), seed=0), SMALL)
    assert err.value.record["step"] == 0 and 0 in err.value.record["batch"]


def test_sgd_then_adamw_schedule_runs():
    seqs, table = generate_corpus(b1_config(7, sequences_per_grammar=4))
    cfg = TrainConfig(epochs=2, batch_size=6, optimizer="sgd+adamw", sgd_epochs=1, lr=1e-3, seed=0)
    bundle, hist = pretrain(seqs, table, cfg, SMALL)
    assert bundle.optimizer_state["kind"] == "adamw" and len(hist.epochs) == 2


def test_probe_keeps_encoder_and_beats_random_init(b1_small):
    bundle, _, train, val, table = b1_small
    before = bundle.checksums()
    obs, y = clip_dataset(train)
    cfg = TrainConfig(epochs=10, batch_size=256, lr=1e-2, grad_clip=None, seed=0)
    probed, _ = fit_linear_probe(bundle, obs, y, cfg)
    assert bundle.checksums() == before
    assert probed.checksums()["encoder"] == before["encoder"]
    vobs, vy = clip_dataset(val)
    trained_acc = top1_accuracy(classify_clips(probed, vobs), vy)
    rand = new_bundle(table, SMALL, seed=99)
    rand_probe, _ = fit_linear_probe(rand, obs, y, cfg)
    assert trained_acc > top1_accuracy(classify_clips(rand_probe, vobs), vy)
    with pytest.raises(InvalidInputError):
        fit_linear_probe(bundle, obs[:2], np.array([0, 24]), cfg)


def test_probe_separable_on_clean_corpus():
    cfg = b1_config(8, sequences_per_grammar=40)
    cfg.obs_noise_sigma = 0.0
    seqs, table = generate_corpus(cfg)
    bundle = new_bundle(table, SMALL, seed=0)
    obs, y = clip_dataset(seqs)
    probed, _ = fit_linear_probe(bundle, obs, y, TrainConfig(epochs=60, batch_size=64, lr=3e-2,
                                                            grad_clip=None))
    assert top1_accuracy(classify_clips(probed, obs), y) >= 0.99


def _grammar_corpus(grammars, n, seed):
    cfg = CorpusConfig(K=24, D=64, D_obs=128, grammars=grammars, sequences_per_grammar=n,
                       obs_noise_sigma=0.2, seed=seed)
    return generate_corpus(cfg)


def test_forecaster_learns_deterministic_grammar():
    grammars = [TaskGrammar(0, [((0, 1, 2, 3, 4, 5), 1.0)]), TaskGrammar(1, [((1, 0, 3, 2, 6, 7), 1.0)])]
    seqs, table = _grammar_corpus(grammars, 200, seed=1)
    train, val = by_split(seqs, "train"), by_split(seqs, "val")
    bundle, _ = pretrain(train, table, TrainConfig(epochs=2, seed=1), SMALL)
    before = bundle.checksums()["encoder"]
    fc, _ = finetune_forecaster(bundle, train, TrainConfig(epochs=4, lr=1e-3, seed=1))
    assert fc.checksums()["encoder"] == before and fc.forecast_variant == "diffusion"
    ex = forecast_examples(fc.encoder, val)
    pred = forecast_probs(fc, ex)[:, 0].argmax(-1)
    assert top1_accuracy(pred, ex.targets.numpy()) >= 0.95


def test_forecaster_picks_likelier_branch(b1_small):
    bundle, _, train, val, _ = b1_small
    fc, _ = finetune_forecaster(bundle, train, TrainConfig(epochs=4, lr=1e-3, seed=0))
    ex = forecast_examples(fc.encoder, val)
    pred = forecast_probs(fc, ex)[:, 0].argmax(-1)
    branch = np.array([ids == (8,) for ids in ex.context_ids])
    assert branch.any() and np.all(pred[branch] == 9)


def test_forecaster_mean_variant_and_skip(b1_small):
    bundle, _, train, _, _ = b1_small
    fc, hist = finetune_forecaster(bundle, train[:50], TrainConfig(epochs=1, seed=0), "mean")
    assert fc.forecast_variant == "mean" and fc.checksums()["denoiser"] == bundle.checksums()["denoiser"]


def test_activity_head(b1_small):
    bundle, _, train, val, _ = b1_small
    cfg = TrainConfig(epochs=2, batch_size=64, lr=1e-3, seed=0)
    act, _ = finetune_activity(bundle, train, cfg)
    assert act.checksums()["encoder"] == bundle.checksums()["encoder"]
    vt = np.array([s.task_id for s in val])
    assert top1_accuracy(activity_predictions(act, val), vt) >= 0.95
    shuffled = np.random.default_rng(0).permutation([s.task_id for s in train])
    rand, _ = finetune_activity(bundle, train, cfg, labels=shuffled)
    assert top1_accuracy(activity_predictions(rand, val), vt) <= 2 / 3
    with pytest.raises(InvalidInputError):
        finetune_activity(act, train[:3], cfg, labels=[0, 1, 7])


def test_forecaster_auxiliary_denoising_term(b1_small):
    bundle, _, train, _, _ = b1_small
    cfg = TrainConfig(epochs=1, seed=0, max_steps=3, denoise_weight=0.5)
    for variant in ("diffusion", "mask"):
        _, hist = finetune_forecaster(bundle, train, cfg, variant)
        for row in hist.steps:
            assert row["denoise"] > 0
            assert row["loss"] == pytest.approx(row["ce"] + 0.5 * row["denoise"], rel=1e-12)
    _, hist = finetune_forecaster(bundle, train, TrainConfig(epochs=1, seed=0, max_steps=2))
    assert "denoise" not in hist.steps[0]
    with pytest.raises(InvalidConfigError):
        TrainConfig(denoise_weight=-1.0).validate()
