"""Acceptance criteria 1-10 on the synthetic benchmark B1 (seeds 1, 2, 3).

Each test records a one-line verdict that the terminal summary prints,
then asserts it. Criteria 3-8 and 10 share one session-scoped set of runs.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest

from helpers import ACCEPTANCE, fd_check, loss_fn, params_of, tiny_problem
from procdiff import checkpoint as ckpt
from procdiff.cli import main
from procdiff.core import seeded_rng
from procdiff.corpus import by_split, read_corpus
from procdiff.diffusion import forward_step, make_schedule
from procdiff.evaluation import bleu1, bleu1_split, forecast_probs
from procdiff.experiments import run_b1
from procdiff.training import forecast_examples

SEEDS = (1, 2, 3)
CHANCE = 1 / 24
B1_CONFIG = Path(__file__).parent.parent / "configs" / "b1.yaml"

pytestmark = pytest.mark.slow


def record(n: int, ok: bool, detail: str):
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def seedwise(runs, fn, fmt="{:.4f}"):
    return " ".join(f"s{r['seed']}=" + fmt.format(fn(r)) for r in runs)


@pytest.fixture(scope="session")
def runs():
    return [run_b1(seed) for seed in SEEDS]


def test_criterion_1_forward_moments():
    start = time.perf_counter()
    s = make_schedule(4)
    D, n = 8, 100_000
    x0 = seeded_rng(11, "x0").standard_normal(D)
    rng = seeded_rng(11, "forward")
    x = np.broadcast_to(x0, (n, D))
    worst = 0.0
    for t in range(1, s.T + 1):
        x = forward_step(x, t, s, rng)
        ab = s.alpha_bar[t]
        mean, var = np.sqrt(ab) * x0, 1.0 - ab
        z_mean = np.abs(x.mean(0) - mean) / np.sqrt(var / n)
        z_var = np.abs(x.var(0, ddof=1) - var) / (var * np.sqrt(2 / (n - 1)))
        worst = max(worst, z_mean.max(), z_var.max())
    elapsed = time.perf_counter() - start
    record(1, worst <= 3 and elapsed < 30, f"max |z| = {worst:.2f} (bound 3), {elapsed:.1f}s")


def test_criterion_2_gradients():
    start = time.perf_counter()
    errs = {}
    for term in ("xe", "mse", "mc", "total"):
        enc, den, sched, batch, phrases, _, _ = tiny_problem(D=8, N=3, K=4)
        # the stop-gradient target has no finite-difference counterpart, so the
        # encoder is checked on the plain objective and the denoiser on the default one
        e_enc = fd_check(params_of(enc),
                         lambda: loss_fn(enc, den, sched, batch, phrases, term=term, stop_gradient=False))
        den_params = [den.in_proj.weight, den.out_proj.weight, den.out_proj.bias, den.time_emb,
                      den.pos_emb, den.blocks[0].attn.qkv.weight, den.blocks[-1].ff[0].weight]
        e_den = fd_check(den_params, lambda: loss_fn(enc, den, sched, batch, phrases, term=term))
        errs[term] = max(e_enc, e_den)
    elapsed = time.perf_counter() - start
    ok = all(e < 1e-4 for e in errs.values()) and elapsed < 60
    record(2, ok, " ".join(f"{k}={v:.1e}" for k, v in errs.items()) + f" (bound 1e-4), {elapsed:.1f}s")


def test_criterion_3_ordering_helps(runs):
    full = np.mean([r["probe_full"] for r in runs])
    match = np.mean([r["probe_matching"] for r in runs])
    margin = np.mean([r["forecast"]["diffusion"]["all"] - r["forecast"]["mean"]["all"] for r in runs])
    slowest = max(sum(r["timings"].values()) for r in runs)
    ok = full >= match and margin >= 0.05 and slowest < 900
    record(3, ok, f"probe {full:.4f} vs matching {match:.4f} "
                  f"[{seedwise(runs, lambda r: r['probe_full'] - r['probe_matching'], '{:+.4f}')}]; "
                  f"forecast margin {100 * margin:.1f} pts (need 5); slowest seed {slowest / 60:.1f} min")


def test_criterion_4_diffusion_vs_mask(runs):
    diff = np.mean([r["forecast"]["diffusion"]["branching_task"] for r in runs])
    mask = np.mean([r["forecast"]["mask"]["branching_task"] for r in runs])
    record(4, diff >= mask, f"branching grammar top-1 diffusion {diff:.4f} vs mask {mask:.4f} "
                            f"[{seedwise(runs, lambda r: r['forecast']['diffusion']['branching_task'] - r['forecast']['mask']['branching_task'], '{:+.4f}')}]")


def test_criterion_5_inference_schemes(runs):
    gaps = [abs(r["inference_schemes"]["approximate"] - r["inference_schemes"]["expectation"]) for r in runs]
    dominance = all(r["inference_schemes"]["oracle"] >= r["inference_schemes"]["single_sample"] for r in runs)
    strict = all(r["inference_schemes"]["branching_oracle"] > r["inference_schemes"]["branching_single"]
                 for r in runs)
    ok = max(gaps) <= 0.01 and dominance and strict
    record(5, ok, f"max |approx - expectation| {100 * max(gaps):.2f} pts (bound 1.0); oracle-5 >= single "
                  f"{dominance}; strictly on branching grammar {strict}")


def test_criterion_6_diversity(runs):
    cov = [r["diversity"]["branch"]["valid_coverage"] for r in runs]
    modal = [r["diversity"]["deterministic_modal_share"] for r in runs]
    ok = min(cov) >= 0.5 and min(modal) >= 0.9
    record(6, ok, f"branch coverage min {min(cov):.3f} (need 0.5); deterministic modal share "
                  f"min {min(modal):.3f} (need 0.9)")


def test_criterion_7_zero_shot(runs):
    cls = min(r["zero_shot_classify"] for r in runs)
    fc = min(r["zero_shot_forecast_deterministic"] for r in runs)
    ok = cls >= 3 * CHANCE and fc >= 2 * CHANCE
    record(7, ok, f"classify min {cls:.4f} (need {3 * CHANCE:.4f}); deterministic forecast "
                  f"min {fc:.4f} (need {2 * CHANCE:.4f})")


def test_criterion_8_bound_structure(runs):
    losses = [v for r in runs for v in r["loss"].values()]
    gap = max(v["max_abs_gap"] for v in losses)
    negative = sum(v["negative_steps"] for v in losses)
    steps = sum(v["logged_steps"] for v in losses)
    decreased = all(v["last_epoch_loss"] < v["first_loss"] for v in losses)
    ok = gap <= 1e-9 and negative == 0
    record(8, ok, f"max |total - (xe+mse+mc)| {gap:.1e} over {steps} steps; {negative} negative; "
                  f"final epoch loss below initial loss {decreased}")


def _pipeline(out: Path) -> dict[str, bytes]:
    assert main(["gen-corpus", "--config", str(B1_CONFIG), "--out", str(out / "corpus")]) == 0
    assert main(["pretrain", "--config", str(B1_CONFIG), "--corpus", str(out / "corpus"),
                 "--out", str(out / "pre")]) == 0
    for task in ("classify", "forecast"):
        assert main(["eval", "--config", str(B1_CONFIG), "--corpus", str(out / "corpus"), "--task", task,
                     "--checkpoint", str(out / "pre" / "checkpoint.bin"), "--out", str(out / "eval")]) == 0
    # report JSON and CSV files; the manifest hashes the timestamped JSON, so it is left out
    metrics = {}
    for path in sorted((out / "eval").iterdir()):
        if path.name == "manifest.json":
            continue
        if path.suffix == ".json":
            doc = json.loads(path.read_text())
            doc.pop("generated_at")
            metrics[path.name] = json.dumps(doc, sort_keys=True).encode()
        else:
            metrics[path.name] = path.read_bytes()
    return metrics


def test_criterion_9_determinism(tmp_path):
    a, b = _pipeline(tmp_path / "a"), _pipeline(tmp_path / "b")
    same = a == b
    bundle, _ = ckpt.load(tmp_path / "a" / "pre" / "checkpoint.bin")
    other, _ = ckpt.load(tmp_path / "b" / "pre" / "checkpoint.bin")
    seqs, _ = read_corpus(tmp_path / "a" / "corpus")
    ex = forecast_examples(bundle.encoder, by_split(seqs, "val"))
    p1, p2 = forecast_probs(bundle, ex), forecast_probs(bundle, ex)
    p3 = forecast_probs(other, forecast_examples(other.encoder, by_split(seqs, "val")))
    stable = np.array_equal(p1, p2) and np.array_equal(p1, p3)
    record(9, same and stable, f"{len(a)} metrics files byte-identical {same}; approximate forecasts "
                               f"bit-stable {stable}")


def test_criterion_10_protocol_fidelity(runs):
    frozen = all(all(r["frozen"].values()) for r in runs)
    scores = (bleu1("fry eggs", "fry chicken"), bleu1("fry eggs", "fry eggs"))
    split = bleu1_split(["fry eggs", "cut onion"], ["fry chicken", "cut onion"], 0.7)
    ok = frozen and scores == (0.5, 1.0) and split == {"seen": [1], "novel": [0]}
    record(10, ok, f"frozen checksums unchanged {frozen}; BLEU-1 {scores[0]} and {scores[1]}")
