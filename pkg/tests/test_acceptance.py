"""Acceptance suite: one test per criterion, 1 to 8.

Each test prints a ``criterion N: PASS|FAIL`` line with its measurements, and
``conftest.py`` repeats them in the terminal summary.  Criterion 6 trains a
policy from scratch and takes several minutes.
"""
import hashlib
import math
import time

import numpy as np
import pytest
from scipy import stats

from snapcube.cli import main as cli_main
from snapcube.geometry import LATERAL_FACES, AngleGrid, cubemap_to_equirect, project_cubemap, project_mask
from snapcube.harness import ImageContext, budget_curve, generate_dataset, preservation_iou, run_named_policy
from snapcube.network import Architecture, surrogate_grad
from snapcube.objective import ObjectiveConfig, band_mask, disruption_score, fg_for_angle
from snapcube.policy import TrainConfig, train
from snapcube.scenes import SceneDistribution, SceneObject, SceneSpec, synth_scene

from test_network import SMALL, crosses_kink, numeric, problem, rel_error
from test_objective import brute_band
from test_policy import run_bandit

GRID = AngleGrid(20)
RESULTS = {}


def report(n, ok, detail):
    RESULTS[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})")
    return ok


def test_criterion_1_geometry():
    t0 = time.perf_counter()
    dist = SceneDistribution(height=128)
    worst, f_gap = 0.0, 0.0
    for seed in range(50):
        _, mask = synth_scene(dist.sample(seed))
        theta = GRID[seed % 20].theta
        a = project_mask(mask, theta, 64)
        b = project_mask(mask, theta + math.pi / 2, 64)
        for i, name in enumerate(LATERAL_FACES):
            moved = LATERAL_FACES[(i - 1) % 4]
            worst = max(worst, float(np.mean(a.faces[name] != b.faces[moved])))
        fa = fg_for_angle(mask, theta, 64)
        fb = fg_for_angle(mask, theta + math.pi / 2, 64)
        f_gap = max(f_gap, abs(disruption_score(fa) - disruption_score(fb)))
    psnrs = []
    for seed in range(20):
        img, _ = synth_scene(SceneSpec((), "smooth", seed, 128))
        back = cubemap_to_equirect(project_cubemap(img, GRID[seed].theta, 64), 128)
        psnrs.append(10 * math.log10(1 / np.mean((back - img) ** 2)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 0.005 and f_gap == 0 and min(psnrs) > 30 and elapsed < 5
    assert report(1, ok, f"max disagreement {worst:.4%}, max |dF| {f_gap}, "
                         f"min PSNR {min(psnrs):.1f} dB, {elapsed:.1f} s")


def test_criterion_2_objective():
    bad = []
    for s in (32, 64, 128):
        for a in (0.05, 0.0625, 0.1):
            m = math.floor(a * s)
            band = band_mask(s, ObjectiveConfig(a))
            if not (np.array_equal(band, brute_band(s, m, ("left", "right", "top")))
                    and band.sum() == 3 * m * s - 2 * m * m):
                bad.append((s, a))
    ones = fg_for_angle(np.ones((128, 256), bool), 0.0, 64)
    band_score = disruption_score(ones, ObjectiveConfig())
    face_score = disruption_score(ones, ObjectiveConfig(0.0625, "whole-face"))
    ok = not bad and band_score == 1.0 and abs(face_score - 0.1796875) <= 1e-12
    assert report(2, ok, f"band mismatches {bad}, all-one {band_score} / {face_score!r}")


def test_criterion_3_search():
    cfg = ObjectiveConfig()
    dist = SceneDistribution(height=64)
    brute_fail = uniform_fail = mono_fail = 0
    for seed in range(100):
        _, mask = synth_scene(dist.sample(seed))
        ctx = ImageContext.build(mask, GRID, 32, cfg)
        ex = run_named_policy("exhaustive", ctx, 20, 0)
        scores = [disruption_score(fg_for_angle(mask, a.theta, 32), cfg) for a in GRID]
        k = int(np.argmin(scores))
        brute_fail += ex.best_angle.grid_index != k or ex.best_score != scores[k]
        uniform_fail += run_named_policy("uniform", ctx, 20, 0).best_score != ex.best_score
        if seed < 20:
            for name in ("random", "uniform", "coarse2fine", "saliency"):
                curve = [run_named_policy(name, ctx, T, seed).best_score for T in range(1, 21)]
                mono_fail += any(b > a for a, b in zip(curve, curve[1:]))
    single = SceneDistribution.single_compact(128)
    hits = 0
    for seed in range(100):
        ctx = ImageContext.build(synth_scene(single.sample(seed))[1], GRID, 64, cfg)
        hits += run_named_policy("coarse2fine", ctx, 10, 0).best_score == ctx.table.min()
    ok = brute_fail == 0 and uniform_fail == 0 and mono_fail == 0 and hits >= 90
    assert report(3, ok, f"brute-force mismatches {brute_fail}/100, coarse2fine hits {hits}/100, "
                         f"uniform@n mismatches {uniform_fail}, non-monotone curves {mono_fail}")


def test_criterion_4_gradients():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        w, obs, acts, rew = problem(SMALL, seed)
        grads = surrogate_grad(obs, acts, rew, w)
        for name, arr in w.params.items():
            num = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                num[idx] = numeric(w, name, idx, obs, acts, rew)
            worst = max(worst, float(rel_error(num, grads[name]).max()))
    # the full-size network: sampled entries of every tensor
    w, obs, acts, rew = problem(Architecture(), 11, batch=2, steps=2)
    grads = surrogate_grad(obs, acts, rew, w)
    rng = np.random.default_rng(0)
    for name, g in grads.items():
        floor = 1e-3 * np.abs(g).max()
        for f in list(np.argsort(np.abs(g).ravel())[-3:]) + list(rng.integers(0, g.size, 3)):
            idx = np.unravel_index(f, g.shape)
            eps = 1e-7 if crosses_kink(w, name, idx, obs, acts, 1e-5) else 1e-5
            num = numeric(w, name, idx, obs, acts, rew, eps)
            worst = max(worst, abs(num - g[idx]) / max(abs(num) + abs(g[idx]), floor, 1e-12))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60
    assert report(4, ok, f"max relative error {worst:.2e}, {elapsed:.1f} s")


def test_criterion_5_bandit():
    firsts = []
    for seed in range(5):
        probs = run_bandit(seed, updates=500, lr=0.01)
        hit = [i for i, p in enumerate(probs) if p > 0.95]
        firsts.append(hit[0] if hit else None)
    ok = all(f is not None for f in firsts)
    assert report(5, ok, f"first update with P > 0.95 per seed: {firsts}")


def paired_ci(diff, seed=0):
    res = stats.bootstrap((diff,), np.mean, confidence_level=0.95, n_resamples=10_000,
                          method="percentile", random_state=seed)
    return res.confidence_interval.low, res.confidence_interval.high


# Settings for the end-to-end run; see README for how they were chosen.
E2E = dict(epochs=12, batch_size=32, lr=0.0003, momentum=0.9, normalize_rewards=True,
           entropy_coef=0.05)


@pytest.mark.slow
def test_criterion_6_end_to_end():
    t0 = time.perf_counter()
    dist = SceneDistribution(height=128)
    train_masks = [synth_scene(dist.sample(s))[1] for s in range(2000)]
    test_masks = [synth_scene(dist.sample(s))[1] for s in range(2000, 2500)]
    cfg = TrainConfig(T=4, reward_mode="clipped-gain", seed=0, **E2E)
    val_masks = [synth_scene(dist.sample(s))[1] for s in range(2500, 2600)]
    w, _ = train(cfg, train_masks, val_masks, train_seeds=range(2000),
                 val_seeds=range(2500, 2600))
    rep = budget_curve(["random", "uniform", "learned"], test_masks, [4], seed=7, weights=w,
                       greedy=True)
    learned = np.array(rep.scores["learned"][4])
    lines, ok = [], True
    for other in ("random", "uniform"):
        diff = learned - np.array(rep.scores[other][4])
        lo, hi = paired_ci(diff)
        ok &= diff.mean() < 0 and hi < 0
        lines.append(f"{other} {rep.mean(other, 4):.4f} (diff CI [{lo:.4f}, {hi:.4f}])")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 1800
    assert report(6, ok, f"learned {learned.mean():.4f} vs " + ", ".join(lines)
                  + f", {elapsed / 60:.1f} min")


def rect_mask(lat, lon, dlat, dlon):
    return synth_scene(SceneSpec((SceneObject(lat, lon, (dlat, dlon), "rect"),), height=128))[1]


def test_criterion_7_preservation():
    inside = preservation_iou(rect_mask(0.0, 0.0, 0.2, 0.3), [(-0.3, -0.2, 0.3, 0.2)], 0.0)["mean"]
    q = math.pi / 4
    straddle = preservation_iou(rect_mask(0.0, q, 0.2, 0.3), [(q - 0.3, -0.2, q + 0.3, 0.2)],
                                0.0)["mean"]
    dist = SceneDistribution(height=64)
    ex, can = [], []
    for s in range(200):
        spec = dist.sample(20_000 + s)
        _, m = synth_scene(spec)
        boxes = [o.box() for o in spec.objects]
        ctx = ImageContext.build(m, GRID, 32, ObjectiveConfig())
        best = run_named_policy("exhaustive", ctx, 20, 0).best_angle.theta
        ex.append(preservation_iou(m, boxes, best, 32)["mean"])
        can.append(preservation_iou(m, boxes, 0.0, 32)["mean"])
    ok = inside == 1.0 and abs(straddle - 0.5) <= 0.02 and np.mean(ex) >= np.mean(can)
    assert report(7, ok, f"inside {inside}, straddling {straddle:.4f}, exhaustive "
                         f"{np.mean(ex):.4f} vs canonical {np.mean(can):.4f}")


def test_criterion_8_determinism(tmp_path):
    generate_dataset(tmp_path / "data", 12, SceneDistribution(height=64), seed=4)
    digests = []
    for run in ("a", "b"):
        out = tmp_path / f"{run}.json"
        code = cli_main(["eval", "--manifest", str(tmp_path / "data" / "manifest.json"),
                         "--seed", "9", "--face-size", "32", "--split", "all",
                         "--policies", "random,uniform,coarse2fine,saliency",
                         "--budgets", "1,2,4,8", "--out", str(out)])
        assert code == 0
        digests.append(hashlib.sha256(out.read_bytes()).hexdigest())
    assert report(8, digests[0] == digests[1], f"sha256 {digests[0][:16]} / {digests[1][:16]}")
