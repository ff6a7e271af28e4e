"""Acceptance gate: one test per criterion, each printing a pass/fail line.

Training the four loss variants dominates the runtime (roughly 15-20 minutes
each on one CPU core). Trained runs are cached under ``.acceptance_cache``
keyed by the training configuration and the source of every module that
affects training; set ``KISR_RETRAIN=1`` to ignore the cache.
"""

import hashlib
import json
import os
import shutil
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pytest

import kernel_inverse_sr
from kernel_inverse_sr import cli, gallery, lcnn, metrics, pipeline, training
from test_training import fd_relative_errors

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("KISR_ACCEPTANCE_CACHE", ROOT / ".acceptance_cache"))

GALLERY_SEED = 0
INIT_SEED = 0
EVAL_SEED = 2024

VARIANTS = {
    "identity": (0.0, 0.0),
    "area": (0.8, 0.0),
    "center": (0.0, 0.2),
    "full": (0.8, 0.2),
}

# Calibrated once and frozen. The convex optimum over all 11x11 kernels of the
# mean full loss on the default gallery has identity residual 0.901, so no
# network of this receptive field can go lower; the margin covers the gap
# between a 50-epoch Adam run and that optimum.
IDENTITY_RESIDUAL_MAX = 0.95
DRASTIC_SSIM_GAP = 0.1
SR_GAIN_MIN = 0.01


def _source_digest():
    h = hashlib.sha256()
    pkg = Path(kernel_inverse_sr.__file__).parent
    for name in ("tensor.py", "lcnn.py", "training.py", "gallery.py", "fileformat.py"):
        h.update((pkg / name).read_bytes())
    return h.hexdigest()[:16]


def _train_variant(name):
    l1, l2 = VARIANTS[name]
    cfg = training.TrainConfig(lambda1=l1, lambda2=l2)
    key = hashlib.sha256(json.dumps(
        {"cfg": asdict(cfg), "gallery_seed": GALLERY_SEED, "init_seed": INIT_SEED,
         "src": _source_digest()}, sort_keys=True).encode()).hexdigest()[:16]
    run = CACHE / f"{name}-{key}"
    g = gallery.generate_gallery(gallery.GalleryConfig(), GALLERY_SEED)
    if os.environ.get("KISR_RETRAIN") and run.exists():
        shutil.rmtree(run)
    if not (run / "model.ckpt").exists():
        if training.latest_checkpoint(run) is not None:
            training.resume(run, g, cfg)
        else:
            training.train(lcnn.init_model(INIT_SEED), g, cfg, run_dir=run)
    return {
        "model": lcnn.load_model(run / "model.ckpt"),
        "history": training.load_history(run),
        "checkpoint": run / "model.ckpt",
        "gallery": g,
        "cfg": cfg,
    }


@pytest.fixture(scope="session")
def trained():
    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = _train_variant(name)
        return cache[name]
    return get


@pytest.fixture(scope="session")
def images():
    return pipeline.bundled_hr_images()


def mean_ssim(model, images, spec, s, seed=EVAL_SEED):
    """Mean SSIM of SR output and of bicubic upsampling over a synthetic set."""
    sr_vals, bic_vals = [], []
    for t in pipeline.synth_eval_set(images, spec, s, seed):
        sr = pipeline.super_resolve(model, t.lr, s, collapse=True)
        sr_vals.append(metrics.ssim(sr, t.hr, crop=s))
        bic_vals.append(metrics.ssim(pipeline.bicubic_baseline(t.lr, s), t.hr, crop=s))
    return float(np.mean(sr_vals)), float(np.mean(bic_vals))


def test_01_parameter_count(criterion):
    n = lcnn.param_count(lcnn.init_model(0))
    criterion(1, n == 28224 and round(n / 1e6, 3) == 0.028, f"parameters = {n}")


def test_02_gradient_correctness(criterion):
    worst = {}
    for i in range(20):
        rng = np.random.default_rng(1000 + i)
        model = lcnn.init_model(100 + i)
        cfg = gallery.GalleryConfig(count=1)
        k = gallery.generate_gallery(cfg, seed=200 + i).kernels[0].grid
        for term, err in fd_relative_errors(model, k, rng).items():
            worst[term] = max(worst.get(term, 0.0), err)
    ok = all(e < 1e-3 for e in worst.values())
    detail = ", ".join(f"{t} max rel err {e:.1e}" for t, e in worst.items())
    criterion(2, ok, f"20 instances; {detail}")


def test_03_identity_learning_convergence(criterion, trained):
    run = trained("full")
    hist = run["history"]
    final = training.evaluate(run["model"], run["gallery"].grids())
    ratio = final.total / hist.initial["total"]
    minutes = sum(e["seconds"] for e in hist.epochs) / 60
    ok = ratio <= 0.1 and final.identity_residual < IDENTITY_RESIDUAL_MAX
    criterion(3, ok, f"total {hist.initial['total']:.4f} -> {final.total:.4f} "
                     f"(ratio {ratio:.3f}, need <= 0.1); identity residual "
                     f"{final.identity_residual:.4f} (need < {IDENTITY_RESIDUAL_MAX}); "
                     f"{len(hist)} epochs in {minutes:.1f} min")


def test_04_area_regularizer(criterion, trained):
    s = float(lcnn.effective_kernel(trained("full")["model"]).sum())
    criterion(4, abs(1 - s) <= 0.05, f"sum of effective kernel = {s:.4f}")


def test_05_fourier_area_identity(criterion, trained):
    h_sum = float(lcnn.effective_kernel(trained("full")["model"]).sum())
    fresh = gallery.generate_gallery(gallery.GalleryConfig(count=100), seed=987654)
    prods = np.array([k.grid.sum() * h_sum for k in fresh.kernels])
    frac = float(np.mean((prods >= 0.9) & (prods <= 1.1)))
    criterion(5, frac >= 0.9, f"{frac:.0%} of 100 kernels in [0.9, 1.1]")


def test_06_collapse_equivalence(criterion, trained, images):
    model = trained("full")["model"]
    worst = 0.0
    for img in images.values():
        up = pipeline.upscale(img[::2, ::2], 2)
        full = pipeline.apply_model(model, up)
        fast = pipeline.apply_model(model, up, collapse=True)
        worst = max(worst, float(np.abs(full - fast)[5:-5, 5:-5].max()))
    criterion(6, len(images) >= 5 and worst <= 1e-5,
              f"{len(images)} images, max abs diff {worst:.2e}")


def test_07_sr_beats_bicubic(criterion, trained, images):
    model = trained("full")["model"]
    parts, ok = [], len(images) >= 5
    for s in (2, 4):
        sr, bic = mean_ssim(model, images, pipeline.KernelSpec.in_distribution(s), s)
        ok &= sr - bic >= SR_GAIN_MIN
        parts.append(f"x{s} SSIM {bic:.4f} -> {sr:.4f} ({sr - bic:+.4f})")
    criterion(7, ok, "; ".join(parts) + f"; need >= +{SR_GAIN_MIN}")


def test_08_regularizer_ablation(criterion, trained, images):
    spec = pipeline.KernelSpec.in_distribution(2)
    scores = {v: mean_ssim(trained(v)["model"], images, spec, 2)[0] for v in VARIANTS}
    ok = (scores["full"] - scores["identity"] >= DRASTIC_SSIM_GAP
          and scores["full"] > scores["area"] and scores["full"] > scores["center"])
    criterion(8, ok, "x2 SSIM " + ", ".join(f"{v} {s:.4f}" for v, s in scores.items())
              + f"; need full - identity >= {DRASTIC_SSIM_GAP} and full best")


def test_09_scale_universality(criterion, trained, images):
    ckpt = trained("full")["checkpoint"]
    before = ckpt.read_bytes()
    model = lcnn.load_model(ckpt)
    n0 = lcnn.param_count(model)
    lr = images["astronaut"][::4, ::4]
    for s in (2, 3, 4, 8, 16, 32):
        out = pipeline.super_resolve(model, lr, s, collapse=True)
        assert out.shape == (lr.shape[0] * s, lr.shape[1] * s, 3)
    ok = ckpt.read_bytes() == before and lcnn.param_count(model) == n0
    parts = []
    for s in (8, 16, 32):
        sr, bic = mean_ssim(model, images, pipeline.KernelSpec.in_distribution(s), s)
        ok &= sr - bic >= 0
        parts.append(f"x{s} gain {sr - bic:+.4f}")
    criterion(9, ok, f"one checkpoint, {n0} params at x2..x32; " + "; ".join(parts))


def test_10_unseen_kernels(criterion, trained, images):
    model = trained("full")["model"]
    parts, ok = [], True
    for s in (2, 4):
        sr, bic = mean_ssim(model, images, pipeline.KernelSpec.unseen(s), s)
        ok &= sr - bic >= 0
        parts.append(f"x{s} SSIM {bic:.4f} -> {sr:.4f} ({sr - bic:+.4f})")
    criterion(10, ok, "sigma in [3, 5], noisy kernels; " + "; ".join(parts))


def _pipeline_records(root):
    def run(*argv):
        assert cli.main([str(a) for a in argv]) == 0
    run("gen-gallery", "--out", root / "g.bin", "--count", 64, "--seed", 42)
    run("train", "--gallery", root / "g.bin", "--out", root / "run", "--epochs", 2,
        "--lr", 0.001, "--batch-size", 16, "--seed", 42)
    run("degrade", "--out", root / "d", "--scale", 2, "--seed", 42)
    run("sr", "--checkpoint", root / "run" / "model.ckpt", "--manifest", root / "d" / "manifest.jsonl",
        "--scale", 2, "--out", root / "sr", "--seed", 42)
    run("eval", "--manifest", root / "d" / "manifest.jsonl", "--sr-dir", root / "sr",
        "--out", root / "metrics.jsonl", "--seed", 42)
    return (root / "metrics.jsonl").read_bytes()


def test_11_determinism(criterion, tmp_path):
    t0 = time.perf_counter()
    a = _pipeline_records(tmp_path / "a")
    b = _pipeline_records(tmp_path / "b")
    n = len(a.splitlines())
    criterion(11, a == b and n > 0,
              f"two end-to-end runs, {n} metric records, identical bytes: {a == b} "
              f"({time.perf_counter() - t0:.0f} s)")
