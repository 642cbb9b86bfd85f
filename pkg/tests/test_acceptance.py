"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` and read the "acceptance criteria"
section at the end of the output.
"""
import dataclasses
import time

import numpy as np
import pytest

from crowdloss.annotations import MISSING, annotation_variance
from crowdloss.losses import LossSpec, loss_ce, loss_guess, loss_mlc, loss_mt
from crowdloss.metrics import annotator_accuracy, auc_score, precision_recall_f1, prediction_variance
from crowdloss.mixture import fit_beta_mixture_em
from crowdloss.model import Batch, Dims, compute_gradients, init_model
from crowdloss.synth import SynthConfig, generate_synthetic, inject_noise, train_test_split
from crowdloss.train import TrainConfig, run_psi_sweep, train

from conftest import max_relative_error, numeric_gradient, random_labels

# Two factions with boundaries 30 degrees apart, light random variation, and
# 20% sample-level flips on the training split. Metrics use a clean held-out split.
NOISY_DESIGN = dict(num_samples=2500, num_annotators=8, feature_dim=8, num_factions=2,
                    faction_boundary_angle=np.pi / 6, per_annotator_flip_rate=0.05,
                    annotations_per_sample=4)
NOISE_RATE = 0.2
SEEDS = range(5)


def noisy_split(seed):
    full = generate_synthetic(SynthConfig(**NOISY_DESIGN, seed=seed))
    train_ds, test_ds = train_test_split(full, 500 / 2500, seed)
    noisy, record = inject_noise(train_ds, NOISE_RATE, seed)
    return noisy, test_ds, record


def test_criterion_1_gradient_oracle(criterion):
    rng = np.random.default_rng(2024)
    arms = ["baseline", "baseline_lc", "multitask", "multitask_lc"]
    worst, cases = 0.0, 0
    start = time.perf_counter()
    for k in range(20):
        mode = arms[k % 4]
        psi = (0.0, 0.5, 1.0)[k % 3]
        mix = k % 2 == 1
        A = 1 if mode.startswith("baseline") else int(rng.integers(2, 5))
        dims = Dims(int(rng.integers(2, 5)), int(rng.integers(3, 6)), 2, A, 2)
        model = init_model(dims, k)
        model = model.like(model.vector + 0.2 * rng.standard_normal(model.num_params))
        B = int(rng.integers(3, 7))
        batch = Batch(rng.standard_normal((B, dims.input)), random_labels(rng, B, A))
        if mode.endswith("_lc"):
            batch.weights = rng.random((B, A))
            batch.guesses = rng.dirichlet([1, 1], size=(B, A))
        if mix:
            batch.mix_perm = rng.permutation(B)
            batch.mix_lambda = float(rng.beta(1, 1))
            batch.mix_layer = int(rng.integers(0, dims.layers + 1))
        spec = LossSpec(mode, psi=psi)
        grad, _ = compute_gradients(model, batch, spec)
        numeric = numeric_gradient(lambda v: compute_gradients(model.like(v), batch, spec)[1],
                                   model.vector, step=1e-5)
        worst = max(worst, max_relative_error(grad.vector, numeric))
        cases += 1
    elapsed = time.perf_counter() - start
    criterion(1, "gradient oracle", worst < 1e-4 and elapsed < 30,
              f"{cases} cases, max rel err {worst:.2e}, {elapsed:.1f}s")


def test_criterion_2_loss_identities(criterion):
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        M = int(rng.integers(2, 5))
        A = int(rng.integers(1, 6))
        p = rng.dirichlet(np.ones(M), size=A)
        z = rng.dirichlet(np.ones(M), size=A)
        y = rng.integers(0, M, size=A)
        y[rng.random(A) < 0.3] = MISSING
        y[0] = max(y[0], 0)
        worst = max(worst, abs(loss_mt(p[:1], y[:1]) - loss_ce(p[0], y[0])))
        worst = max(worst, abs(loss_mlc(p, y, z, np.zeros(A), 0.5) - loss_mt(p, y)))
        worst = max(worst, abs(loss_mlc(p, y, z, np.ones(A), 1.0) - loss_guess(p, y, z)))
    criterion(2, "loss identities", worst <= 1e-12, f"max abs diff {worst:.1e}")


def test_criterion_3_em_recovery(criterion):
    rng = np.random.default_rng(3)
    failures, monotone = [], True
    start = time.perf_counter()
    for k in range(10):
        mu_lo = rng.uniform(0.1, 0.3)
        mu_hi = rng.uniform(mu_lo + 0.4, 0.9)
        conc = rng.uniform(8, 20, size=2)
        pi = rng.uniform(0.3, 0.7)
        n_lo = int(round(pi * 2000))
        x = np.concatenate([rng.beta(mu_lo * conc[0], (1 - mu_lo) * conc[0], n_lo),
                            rng.beta(mu_hi * conc[1], (1 - mu_hi) * conc[1], 2000 - n_lo)])
        m = fit_beta_mixture_em(np.clip(x, 1e-4, 1 - 1e-4))
        monotone &= bool((np.diff(m.ll_trace) >= 0).all())
        errs = (abs(m.mean_low - mu_lo), abs(m.mean_high - mu_hi), abs(m.mixing_pi - n_lo / 2000))
        if max(errs) > 0.05:
            failures.append((k, errs))
    elapsed = time.perf_counter() - start
    criterion(3, "EM recovery", not failures and monotone and elapsed < 20,
              f"{10 - len(failures)}/10 recovered, monotone={monotone}, {elapsed:.1f}s")


def test_criterion_4_noise_detection_auc(criterion):
    aucs = []
    start = time.perf_counter()
    for seed in range(3):
        noisy, test_ds, record = noisy_split(seed)
        _, hist = train(TrainConfig(seed=seed), noisy, test_ds)
        mask = noisy.annotations.mask
        flipped = record.flipped_mask(*mask.shape)
        aucs.append(auc_score(flipped[mask], hist.final_weights[mask]))
    elapsed = time.perf_counter() - start
    criterion(4, "noise-detection separation", np.mean(aucs) >= 0.8 and elapsed < 180,
              f"AUC per seed {np.round(aucs, 3).tolist()}, mean {np.mean(aucs):.3f}, {elapsed:.0f}s")


def test_criterion_5_lc_beats_multitask(criterion):
    wins, pairs = 0, []
    start = time.perf_counter()
    for seed in SEEDS:
        noisy, test_ds, _ = noisy_split(seed)
        cfg = TrainConfig(seed=seed, psi=0.5)
        _, lc = train(dataclasses.replace(cfg, mode="multitask_lc"), noisy, test_ds)
        _, mt = train(dataclasses.replace(cfg, mode="multitask"), noisy, test_ds)
        f_lc, f_mt = lc.records[-1].metrics["f1"], mt.records[-1].metrics["f1"]
        pairs.append((round(f_lc, 4), round(f_mt, 4)))
        wins += f_lc > f_mt
    elapsed = time.perf_counter() - start
    criterion(5, "MT+LC beats MT on majority F1", wins >= 4 and elapsed < 240,
              f"{wins}/5 wins, (LC, MT) per seed {pairs}, {elapsed:.0f}s")


def test_criterion_6_variance_decreases_with_psi(criterion):
    var = {0.25: [], 1.0: []}
    for seed in SEEDS:
        noisy, test_ds, _ = noisy_split(seed)
        rep = run_psi_sweep(TrainConfig(seed=seed), [0.25, 1.0], noisy, test_ds)
        for row in rep.rows:
            var[row["psi"]].append(row["pred_variance"])
    lo, hi = np.mean(var[0.25]), np.mean(var[1.0])
    criterion(6, "prediction variance higher at low psi", lo > hi,
              f"mean pred_variance psi=0.25: {lo:.3f}, psi=1: {hi:.3f}")


def test_criterion_7_involution_and_determinism(criterion):
    noisy, test_ds, _ = noisy_split(0)
    once, _ = inject_noise(noisy, NOISE_RATE, 11)
    twice, _ = inject_noise(once, NOISE_RATE, 11)
    restored = np.array_equal(twice.annotations.labels, noisy.annotations.labels)

    small = noisy.subset(np.arange(600))
    cfg = TrainConfig(epochs=3, seeds=(0, 1))
    m1, h1 = train(cfg, small)
    m2, h2 = train(cfg, small)
    same_run = m1 == m2 and h1 == h2
    one = run_psi_sweep(cfg, [0.5, 1.0], small, threads=1)
    many = run_psi_sweep(cfg, [0.5, 1.0], small, threads=4)
    same_threads = one.rows == many.rows and one.runs == many.runs
    criterion(7, "noise involution and determinism", restored and same_run and same_threads,
              f"restored={restored}, repeat identical={same_run}, thread independent={same_threads}")


def test_criterion_8_metric_hand_checks(criterion):
    checks = {}
    pred = [1, 1, 1, 0] + [0] * 6
    ref = [1, 1, 0, 1] + [0] * 6
    p, r, f = precision_recall_f1(pred, ref, 2, average="positive")
    checks["prf"] = max(abs(p - 2 / 3), abs(r - 2 / 3), abs(f - 2 / 3))
    checks["prf_perfect"] = abs(precision_recall_f1([0, 1, 1], [0, 1, 1])[2] - 1.0)
    labels = np.array([[1, 0], [1, 1], [0, MISSING], [1, MISSING]])
    heads = np.array([[1, 0], [1, 0], [0, 0], [0, 0]])
    checks["annotator_accuracy"] = abs(annotator_accuracy(heads, labels) - 0.625)
    checks["annotation_variance"] = max(abs(annotation_variance([1, 1, 1]) - 0.0),
                                        abs(annotation_variance([1, 0]) - 0.25),
                                        abs(annotation_variance([1, 1, 0]) - 2 / 9))
    checks["prediction_variance"] = max(abs(prediction_variance(np.array([[1, 1], [0, 0]])) - 0.0),
                                        abs(prediction_variance(np.array([[1, 0], [0, 1]])) - 25.0))
    worst = max(checks.values())
    criterion(8, "metric hand-checks", worst <= 1e-9, f"max abs diff {worst:.1e}")


def test_criterion_9_smoke_convergence(criterion):
    ds = generate_synthetic(SynthConfig(num_samples=500, feature_dim=4, num_factions=1, seed=0))
    start = time.perf_counter()
    _, hist = train(TrainConfig(), ds)
    elapsed = time.perf_counter() - start
    acc = hist.records[-1].metrics["accuracy"]
    criterion(9, "smoke convergence", acc >= 0.95 and elapsed < 20,
              f"majority accuracy {acc:.3f} after {len(hist)} epochs, {elapsed:.1f}s")
