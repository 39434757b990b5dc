"""Small fixtures shared by the unit and acceptance tests."""
from __future__ import annotations

import numpy as np
import torch

from procdiff.core import seeded_rng, torch_generator
from procdiff.corpus import CorpusConfig, TaskGrammar, build_phrase_table, generate_corpus
from procdiff.diffusion import Denoiser, make_schedule
from procdiff.encoders import ClipEncoder, phrase_matrix
from procdiff.objective import batch_loss_terms, collate

# acceptance criterion number -> (passed, detail), printed in the terminal summary
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def tiny_problem(D=8, N=3, K=4, obs_dim=8, seed=0):
    """Encoder, denoiser, schedule, batch and phrase matrix for a D=8, N=3, K=4 instance."""
    table = build_phrase_table(K, D, obs_dim, seeded_rng(seed, "table"))
    grammar = TaskGrammar(0, [(tuple(range(N)), 1.0)])
    cfg = CorpusConfig(K=K, D=D, D_obs=obs_dim, grammars=[grammar], sequences_per_grammar=1,
                       obs_noise_sigma=0.3, label_temperature=0.5, seed=seed)
    seqs, table = generate_corpus(cfg)
    enc = ClipEncoder(obs_dim, D, 8, activation="tanh", generator=torch_generator(seed, "enc"))
    den = Denoiser(D, 4, layers=4, heads=4, generator=torch_generator(seed, "den"))
    return enc, den, make_schedule(4), collate(seqs), phrase_matrix(table), table, seqs


def loss_fn(enc, den, sched, batch, phrases, tau=0.5, term="total", stop_gradient=True, seed=0):
    """One scalar loss with the Monte Carlo draws pinned to ``seed``."""
    terms = batch_loss_terms(enc, den, sched, batch, phrases, tau, seeded_rng(seed, "draws"),
                             stop_gradient=stop_gradient)
    value = terms.total if term == "total" else getattr(terms, term)
    return value.sum()


def fd_check(params, fn, eps=1e-6) -> float:
    """Largest relative error between autograd and central differences over every entry."""
    for p in params:
        p.grad = None
    fn().backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    num, den = 0.0, 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat, gflat = p.view(-1), g.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + eps
                up = fn().item()
                flat[i] = old - eps
                down = fn().item()
                flat[i] = old
                fd = (up - down) / (2 * eps)
                num = max(num, abs(fd - gflat[i].item()))
                den = max(den, abs(fd))
    return num / max(den, 1e-30)


def params_of(*modules):
    return [p for m in modules for p in m.parameters()]


def rng_vector(seed, n):
    return np.asarray(seeded_rng(seed).standard_normal(n))
