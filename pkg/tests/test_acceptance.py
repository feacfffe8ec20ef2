"""Acceptance criteria 1-8, each at its stated tolerance and runtime budget.

Every test records one PASS/FAIL line, printed in the terminal summary.
"""

import os
import time

import numpy as np
import pytest

from conftest import angle_deg, brute_auc, loop_mean, otsu_sweep, sort_p95, two_stain_image
from corrfabr import pipeline as pl
from corrfabr.aggregation import (LESION, NORMAL, PIXEL_CAP, PairedFeatureSet,
                                  aggregate_pixel_pixel, aggregate_region_mean,
                                  aggregate_region_p95, concat_pairs, load_pairs)
from corrfabr.cca import cca_oracle, columnwise_correlation
from corrfabr.corrnet import (PARAMS, FusionTrainConfig, corrnet_grad, init_corrnet,
                              total_loss, train_fusion)
from corrfabr.features import PatchGridFeatures
from corrfabr.evaluation import kfold_split, roc_auc
from corrfabr.preprocessing import macenko_fit, macenko_normalize, otsu_threshold, rgb_to_od
from corrfabr.synthetic import TwoViewSpec, gen_two_view
from corrfabr.tensor_io import load_tensor, make_rng

# cohort and fusion settings for the CorrFeat-vs-radiology comparison
DIRECTIONAL_COHORT = {"n_cases": 200, "n_slices": 1}
DIRECTIONAL_FUSION = {"learning_rate": 5e-4}


def _rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def _central_diff(m, R, P, name, h=1e-6):
    p = getattr(m, name)
    g = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        old = p[idx]
        p[idx] = old + h
        up = total_loss(m, R, P)[0]
        p[idx] = old - h
        down = total_loss(m, R, P)[0]
        p[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def test_1_gradient_correctness(verdict):
    t0 = time.perf_counter()
    rng = make_rng(1)
    shapes = [(dr, k) for dr in (8, 64, 128) for k in (1, 5)]
    worst = 0.0
    for draw in range(20):
        dr, k = shapes[draw % len(shapes)]
        m = init_corrnet(dr, 6, k, rng=rng)
        m.b += 0.1 * rng.standard_normal(k)
        R, P = rng.standard_normal((8, dr)), rng.standard_normal((8, 6))
        grads = corrnet_grad(m, R, P)
        for name in PARAMS:
            worst = max(worst, _rel_err(grads[name], _central_diff(m, R, P, name)))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 10
    verdict(1, ok, f"max rel err {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_2_fusion_optimality(verdict):
    # train on 5000 samples, compare per-dimension correlations with CCA
    # directions on an independent 5000-sample draw from the same model
    t0 = time.perf_counter()
    ratios = []
    for seed in range(5):
        X, Y, _ = gen_two_view(TwoViewSpec(n_samples=10000, seed=seed))
        Xt, Yt, Xh, Yh = X[:5000], Y[:5000], X[5000:], Y[5000:]
        _, (wx, wy, mx, my) = cca_oracle(Xt, Yt, 5)
        cca = np.sort(columnwise_correlation((Xh - mx) @ wx, (Yh - my) @ wy))[::-1]
        model = train_fusion(PairedFeatureSet(Xt, Yt, [LESION] * 5000),
                             FusionTrainConfig(epochs=150, seed=seed))
        net = np.sort(columnwise_correlation(Xh @ model.W.T, Yh @ model.V.T))[::-1]
        ratios.append((net / cca).min())
    elapsed = time.perf_counter() - t0
    ok = min(ratios) >= 0.9 and elapsed < 120
    verdict(2, ok, f"min CorrNet/CCA ratio {min(ratios):.3f} over 5 seeds, {elapsed:.1f}s")
    assert ok


def test_3_oracle_equivalences(verdict):
    t0 = time.perf_counter()
    rng = make_rng(3)
    otsu_ok = True
    for _ in range(5):
        gray = rng.gamma(2.0, 30.0, (24, 24))
        thr, _ = otsu_threshold(gray, levels=64, foreground="bright")
        otsu_ok &= thr == otsu_sweep(gray, levels=64)[1]
    p95_ok = True
    for n in (1, 7, 20, 101):
        vals = rng.integers(-50, 50, (n, 4)).astype(float)
        grid = PatchGridFeatures(vals.reshape(n, 1, 4))
        cells = np.ones((n, 1), bool)
        p95_ok &= np.array_equal(aggregate_region_p95(grid, cells), sort_p95(vals))
    auc_err = 0.0
    for _ in range(5):
        scores = rng.integers(0, 10, 60) / 10.0
        labels = rng.random(60) < 0.4
        auc_err = max(auc_err, abs(roc_auc(scores, labels) - brute_auc(scores, labels)))
    feat = rng.standard_normal((20, 20, 8))
    mask = rng.random((20, 20)) < 0.3
    mean_err = np.abs(aggregate_region_mean(feat, mask) - loop_mean(feat, mask)).max()
    elapsed = time.perf_counter() - t0
    ok = otsu_ok and p95_ok and auc_err <= 1e-12 and mean_err <= 1e-12 and elapsed < 10
    verdict(3, ok, f"otsu {otsu_ok}, p95 {p95_ok}, auc err {auc_err:.1e}, "
                   f"mean err {mean_err:.1e}, {elapsed:.1f}s")
    assert ok


def test_4_macenko_recovery(verdict):
    t0 = time.perf_counter()
    worst_angle = 0.0
    for seed in range(50):
        rgb, stains = two_stain_image(seed)
        basis = macenko_fit(rgb)
        for est, true in zip(basis.stains, stains):
            worst_angle = max(worst_angle, angle_deg(est, true))
    rgb, _ = two_stain_image(1000, quantize=False)
    basis = macenko_fit(rgb)
    tissue = np.linalg.norm(rgb_to_od(rgb), axis=-1) >= 0.15
    roundtrip = np.abs(macenko_normalize(rgb, basis, basis) - rgb)[tissue].max()
    elapsed = time.perf_counter() - t0
    ok = worst_angle < 2.0 and roundtrip <= 1.0 and elapsed < 30
    verdict(4, ok, f"max angle {worst_angle:.2f} deg, round trip {roundtrip:.3f}, {elapsed:.1f}s")
    assert ok


def test_5_corrfeat_beats_radiology(tmp_path, verdict):
    t0 = time.perf_counter()
    gains = []
    for seed in range(5):
        cfg = pl.PipelineConfig(workdir=str(tmp_path / f"seed{seed}"), seed=seed,
                                synth=dict(DIRECTIONAL_COHORT), fusion=dict(DIRECTIONAL_FUSION))
        pl.run_synth(cfg)
        pl.run_all(cfg, ("preprocess", "extract", "aggregate", "train-fusion", "encode"))
        f1 = {}
        for inputs in ("rad-only", "corrfeat-only"):
            cfg.inputs = inputs
            f1[inputs] = pl.run_all(cfg, ("train-predict", "evaluate")).mean("f1")
        gains.append(f1["corrfeat-only"] - f1["rad-only"])
    elapsed = time.perf_counter() - t0
    wins = sum(g >= 0.03 for g in gains)
    ok = wins >= 4 and elapsed < 600
    verdict(5, ok, f"F1 gains {np.round(gains, 3).tolist()}, {wins}/5 >= 0.03, {elapsed:.0f}s")
    assert ok


def _small_run(workdir, seed=0, **overrides):
    cfg = pl.PipelineConfig(workdir=str(workdir), seed=seed, folds=3,
                            synth={"n_cases": 12, "n_slices": 2, "size": 96},
                            fusion={"epochs": 20, "batch_size": 10},
                            predictor={"max_epochs": 10}, **overrides)
    pl.run_synth(cfg)
    return cfg


def test_6_inference_without_pathology(tmp_path, verdict):
    cfg = _small_run(tmp_path)
    pl.run_all(cfg, ("preprocess", "extract", "aggregate", "train-fusion"))
    pl.remove_pathology(cfg)
    leftovers = [os.path.join(d, f) for d, _, files in os.walk(tmp_path) for f in files
                 if "pathology" in os.path.join(d, f)]
    report = pl.run_all(cfg, ("encode", "train-predict", "evaluate"))
    ok = not leftovers and os.path.exists(
        os.path.join(cfg.workdir, "reports", "metrics_rad+corrfeat.json"))
    verdict(6, ok, f"encode/train-predict/evaluate ran without pathology, "
                   f"F1 {report.mean('f1'):.3f}")
    assert ok


def test_7_protocol_fidelity(tmp_path, verdict):
    assignment = kfold_split([f"p{i}" for i in range(99)], 5)
    sizes = sorted((int(c) for c in np.bincount(list(assignment.values()))), reverse=True)
    fold_ok = sizes == [20, 20, 20, 20, 19]

    # the 1M cap binds on a large set and keeps exact balance
    rng = make_rng(7)
    big = []
    for _ in range(3):
        cancer = np.zeros((600, 600), bool)
        cancer[:300] = True
        big.append(aggregate_pixel_pixel([rng.random((600, 600, 1))], rng.random((600, 600, 1)),
                                         cancer, rng))
    capped = concat_pairs(big, rng, cap=PIXEL_CAP)
    cap_ok = (len(capped) == PIXEL_CAP
              and capped.tags.count(LESION) == capped.tags.count(NORMAL))

    # end to end: prostate simulation, two sequences, pixel-pixel fusion
    cfg = _small_run(tmp_path, mode="prostate-sim", aggregation="pixel-pixel",
                     save_corrfeat_maps=True)
    cfg.synth = {"n_cases": 10, "n_slices": 2}
    pl.run_synth(cfg)
    pl.run_all(cfg, ("preprocess", "extract", "aggregate", "train-fusion", "encode"))
    pid = pl.load_patients(cfg)[0]["id"]
    pairs = load_pairs(os.path.join(cfg.workdir, "pairs", "fold0"))
    pixel_ok = (len(pairs) <= PIXEL_CAP and pairs.balanced
                and pairs.tags.count(LESION) == pairs.tags.count(NORMAL))
    rad_map = pl.radiology_maps(cfg, pid)[0]
    cf_map = load_tensor(os.path.join(cfg.workdir, "features", "corrfeat", "fold0", pid,
                                      "maps.cftn"))[0]
    shape_ok = rad_map.shape == (224, 224, 128) and cf_map.shape == (224, 224, 5)
    shape_ok &= pairs.rad.shape[1] == 64 * 2

    # region pairs: j lesion rows plus k normal rows of width 64 n
    cfg.aggregation = "lesion-section"
    pl.run_all(cfg, ("extract", "aggregate"))
    region = load_pairs(os.path.join(cfg.workdir, "pairs", "fold0"))
    train = [p for p, f in pl.load_folds(cfg).items() if f != 0]
    j = sum(len(pl.load_region_vectors(cfg, "pathology", p)[0]) for p in train)
    k = sum(len(pl.load_region_vectors(cfg, "pathology", p)[1]) for p in train)
    shape_ok &= region.rad.shape == (j + k, 64 * 2)
    ok = fold_ok and cap_ok and pixel_ok and shape_ok
    verdict(7, ok, f"folds {sizes}, capped {len(capped)} rows, pixel pairs {len(pairs)}, "
                   f"region pairs {region.rad.shape}")
    assert ok


def test_8_determinism(tmp_path, verdict):
    blobs = []
    for run in ("a", "b"):
        cfg = _small_run(tmp_path / run, seed=11)
        pl.run_all(cfg)
        with open(os.path.join(cfg.workdir, "reports", "metrics_rad+corrfeat.json"), "rb") as fh:
            blobs.append(fh.read())
    ok = blobs[0] == blobs[1]
    verdict(8, ok, f"metrics JSON byte-identical: {ok} ({len(blobs[0])} bytes)")
    assert ok
