#!/usr/bin/env python3
import time

import numpy as np

from cycletrans import (
    TranslatorPair,
    adversarial_loss,
    cycle_consistency_loss,
    cycle_residuals,
    total_translation_loss,
)
from faireval import threshold_accuracy
from numgrad import ParameterSet, Tensor, finite_diff_check
from reclosses import MarginHead, arcface_loss, cosface_loss
from synthface import N_PIXELS

started = time.perf_counter()
SEEDS = range(5)


def images(rng, n=3):
    return rng.uniform(0.05, 0.95, (n, N_PIXELS))


def small_pair(seed):
    return TranslatorPair(
        "A", "C", lam=1.0, seed=seed, generator_hidden=3, discriminator_hidden=2
    )


# Translation losses
for seed in SEEDS:
    rng = np.random.default_rng(seed)
    x, y = images(rng), images(rng)
    pair = small_pair(seed)
    adversarial = ParameterSet.combine({"G": pair.G.params, "D": pair.D_tgt.params})
    cycle = ParameterSet.combine({"G": pair.G.params, "F": pair.F.params})
    residuals = lambda: cycle_residuals(pair.G, pair.F, x, y)
    errors = [
        finite_diff_check(
            lambda: adversarial_loss(pair.G, pair.D_tgt, x, y), adversarial, seed=seed
        ),
        finite_diff_check(
            lambda: cycle_consistency_loss(pair.G, pair.F, x, y),
            cycle,
            seed=seed,
            kinks=residuals,
        ),
        finite_diff_check(
            lambda: total_translation_loss(pair, x, y),
            pair.parameters(),
            seed=seed,
            kinks=residuals,
        ),
    ]
    worst = max(errors)
    print(f"✅ Translation gradients, seed {seed}: worst relative error {worst:.2e}")
    assert max(errors) < 1e-4

# Recognition losses
for seed in SEEDS:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for kind in ("softmax", "cosface", "arcface"):
        head = MarginHead(kind, 5, embedding_dim=6, seed=seed)
        zs = ParameterSet()
        z = zs.add("z", rng.normal(0, 1, (8, 6)))
        labels = rng.integers(0, 5, 8)
        params = ParameterSet.combine({"z": zs, "head": head.params})
        error = finite_diff_check(lambda: head.loss(z, labels), params, seed=seed)
        worst = max(worst, error)
    print(f"✅ Recognition gradients, seed {seed}: worst relative error {worst:.2e}")
    assert worst < 1e-4

# Zero-margin reductions
rng = np.random.default_rng(100)
worst = 0.0
for draw in range(100):
    n, d = int(rng.integers(2, 8)), int(rng.integers(2, 8))
    z = Tensor(rng.normal(0, 1, (6, d)))
    labels = rng.integers(0, n, 6)
    cos_head = MarginHead("cosface", n, embedding_dim=d, seed=draw)
    arc_head = MarginHead("arcface", n, embedding_dim=d, seed=draw)
    cos = cos_head.cosines(z).data * cos_head.scale
    shifted = cos - cos.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    normalized_softmax = np.mean(log_norm - shifted[np.arange(6), labels])
    values = [
        cosface_loss(cos_head, z, labels, m=0.0).item(),
        arcface_loss(arc_head, z, labels, m=0.0).item(),
        normalized_softmax,
    ]
    worst = max(worst, max(values) - min(values))
print(f"✅ Zero-margin CosFace, ArcFace and normalized softmax agree to {worst:.1e}")
assert worst <= 1e-10

# Threshold protocol against exhaustive search
rng = np.random.default_rng(200)
for draw in range(200):
    n = int(rng.integers(10, 41))
    sims = np.round(rng.uniform(-1, 1, n), int(rng.integers(1, 4)))
    labels = rng.random(n) < 0.5
    folds = 5
    usable = n - n % folds
    expected = []
    for test in np.array_split(np.arange(usable), folds):
        train = np.setdiff1d(np.arange(usable), test)
        values = sorted(set(sims[train].tolist()))
        cuts = [values[0] - 1.0]
        cuts += [(a + b) / 2.0 for a, b in zip(values[:-1], values[1:])]
        cuts.append(values[-1] + 1.0)
        correct = [int(np.sum((sims[train] > c) == labels[train])) for c in cuts]
        t = cuts[correct.index(max(correct))]
        expected.append(np.mean((sims[test] > t) == labels[test]))
    assert threshold_accuracy(sims, labels, folds) == float(np.mean(expected) * 100.0)
print("✅ Threshold protocol matches exhaustive search on 200 pair sets")

print(f"Done in {time.perf_counter() - started:.1f}s")
