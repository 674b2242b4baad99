"""Acceptance checks; each prints one PASS/FAIL line with its measured numbers."""
import math
import time

import numpy as np
import pytest

from gsdsplat.diffusion import AnalyticGaussianDenoiser, ConstantDenoiser, ddim_forward_step, ddim_invert_step, \
    make_schedule, predict_analytic
from gsdsplat.distillation import gsd_gradient, sds_ddim_gradient
from gsdsplat.experiment import DIRECTIONAL_PRESET, ExperimentConfig, run_experiment
from gsdsplat.guidance import (
    GuidanceContext,
    GuidanceSpec,
    PatchFeatures,
    correct_noise,
    depth_guidance_distance,
    feature_guidance_distance,
    pcc,
    prepare_depth_targets,
    warp_depth,
)
from gsdsplat.io import read_metrics_csv
from gsdsplat.rasterizer import render
from gsdsplat.scene import Camera, interpolate_trajectory
from gsdsplat.synthetic import make_synthetic_scene
from gsdsplat.training import TrainConfig, scene_data_from_synthetic, train

from conftest import fd_gradient_check, make_camera, random_cloud
from test_guidance import _oracle_warp, _random_pose


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok

    return emit


def test_criterion_1_rasterizer_gradients(report):
    t0 = time.perf_counter()
    worst = {}
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        cloud = random_cloud(rng, int(rng.integers(1, 21)), degree=1)
        for fam, (w, _) in fd_gradient_check(cloud, make_camera(32), rng, rtol=1e-2, atol=1e-4).items():
            worst[fam] = max(worst.get(fam, 0.0), w)
    secs = time.perf_counter() - t0
    ok = max(worst.values()) <= 1.0 and secs < 120
    detail = " ".join(f"{k}={v:.1e}" for k, v in worst.items())
    assert report(1, ok, f"worst error/tolerance {detail}; {secs:.1f}s"), worst


def test_criterion_2_ddim_round_trip(report):
    sched = make_schedule()
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        shape = (2, 8, 8, 3)
        den = AnalyticGaussianDenoiser(rng.uniform(0, 1, shape), float(rng.uniform(0.01, 0.5)), sched)
        x = rng.normal(0.5, 0.5, shape)
        for t in rng.choice(np.arange(1, sched.T - 25), 10, replace=False):
            t, t2 = int(t), int(t) + int(rng.integers(1, 26))
            back = ddim_forward_step(ddim_invert_step(x, t, den, sched, t_next=t2), t2, t, den, sched)
            worst = max(worst, float(np.max(np.abs(back - x)) / np.max(np.abs(x))))
    secs = time.perf_counter() - t0
    ok = worst < 1e-6 and secs < 10
    assert report(2, ok, f"max relative error {worst:.2e} over 200 round trips; {secs:.2f}s")


def test_criterion_3_analytic_denoiser_monte_carlo(report):
    sched = make_schedule()
    rng = np.random.default_rng(3)
    n = 10 ** 6
    zs = []
    for _ in range(5):
        t = int(rng.integers(1, sched.T + 1))
        m, var = rng.normal(), float(rng.uniform(0.02, 1.0))
        ab = sched[t]
        den = AnalyticGaussianDenoiser(np.array([m]), var, sched)
        x_t = math.sqrt(ab) * (m + math.sqrt(var) * rng.normal()) + math.sqrt(1 - ab) * rng.normal()
        # prior draws of x0; each implies the noise that maps it to x_t, weighted by that noise's density
        x0 = m + math.sqrt(var) * rng.standard_normal(n)
        eps = (x_t - math.sqrt(ab) * x0) / math.sqrt(1 - ab)
        w = np.exp(-0.5 * (eps ** 2 - np.min(eps ** 2)))
        w /= w.sum()
        mc = float(np.sum(w * eps))
        se = math.sqrt(float(np.sum(w ** 2 * (eps - mc) ** 2)))
        zs.append(abs(predict_analytic(np.array([x_t]), t, den, sched)[0] - mc) / se)
    ok = max(zs) <= 3.0
    assert report(3, ok, "standard errors " + " ".join(f"{z:.2f}" for z in zs))


def test_criterion_4_guidance_fd_oracle(report):
    sched = make_schedule()
    sc = make_synthetic_scene(4, n_gaussians=40, resolution=16)
    j, k = sc.train_pool[1], sc.train_pool[3]
    traj = interpolate_trajectory(sc.cameras[j], sc.cameras[k], 4, 3)
    rng = np.random.default_rng(4)
    cloud = sc.gt_cloud.copy()
    cloud.positions += rng.normal(0, 0.05, cloud.positions.shape)
    frames = [render(cloud, c) for c in traj.poses]
    x = np.array([f.rgb for f in frames]) + 0.05 * rng.normal(size=(4, 16, 16, 3))
    depths = np.array([f.depth for f in frames])
    alphas = np.array([f.alpha for f in frames])
    targets = prepare_depth_targets(sc.gt_depths[j], sc.cameras[j], traj)
    ext = PatchFeatures()
    ctx = GuidanceContext(y_k=sc.gt_images[k], anchor_index=2, extractor=ext, depth_targets=targets,
                          depths=depths, alphas=alphas)
    spec = GuidanceSpec.from_weights(rho=0.8, depth_warp=1.0, feature=1.5)
    t = 300
    lam = spec.lambda_t(t, sched)
    eps = rng.normal(size=x.shape)
    out = correct_noise(eps, x, t, spec, ctx, sched)

    def objective(xx, dd):
        return 1.5 * feature_guidance_distance(ext, ctx.y_k, xx[2]) + depth_guidance_distance(dd, targets, alphas)

    h = 1e-6
    worst = 0.0
    # half of the coordinates on guided pixels, half on depths inside the warp masks
    rgb_idx = [(2,) + tuple(int(rng.integers(0, s)) for s in (16, 16, 3)) for _ in range(50)]
    masked = [(i, y, xx) for i in range(4) if targets[i] is not None and targets[i].ok
              for y, xx in zip(*np.nonzero(targets[i].mask & (alphas[i] > 0.5)))]
    depth_idx = [masked[i] for i in rng.choice(len(masked), 50, replace=False)]
    for idx in rgb_idx + depth_idx:
        if len(idx) == 4:
            p, m = x.copy(), x.copy()
            p[idx] += h
            m[idx] -= h
            fd = (objective(p, depths) - objective(m, depths)) / (2 * h)
            got = (eps[idx] - out.rgb[idx]) / lam
        else:
            p, m = depths.copy(), depths.copy()
            p[idx] += h
            m[idx] -= h
            fd = (objective(x, p) - objective(x, m)) / (2 * h)
            got = -out.depth[idx] / lam
        worst = max(worst, abs(got - fd) / max(5e-3 * abs(fd), 1e-9))
    zero = GuidanceSpec.from_weights(rho=0.0, depth_warp=1.0, feature=1.5)
    exact = np.array_equal(correct_noise(eps, x, t, zero, ctx, sched).rgb, eps)
    ok = worst <= 1.0 and exact
    assert report(4, ok, f"worst error/tolerance {worst:.1e} on 100 coordinates; lambda=0 bit-exact={exact}")


def test_criterion_5_warp_oracle(report):
    mismatches = 0
    for case in range(20):
        rng = np.random.default_rng(500 + case)
        f = rng.uniform(6, 12)
        src = Camera.from_intrinsics(f, f, 3.5, 3.5, 8, 8)
        R, T = _random_pose(rng)
        dst = Camera.from_intrinsics(f, f, 3.5, 3.5, 8, 8, R, T)
        depth = rng.uniform(1.0, 4.0, (8, 8))
        # quantised depths give exact ties when several sources land on one pixel
        depth = np.round(depth * 4) / 4
        depth[rng.uniform(size=(8, 8)) < 0.1] = 0.0
        w = warp_depth(depth, src, dst)
        od, om = _oracle_warp(depth, src, dst)
        mismatches += not (np.array_equal(w.mask, om) and np.array_equal(w.depth, od))
    cam = make_camera(8)
    d = np.random.default_rng(5).uniform(1, 3, (8, 8))
    ident = warp_depth(d, cam, cam)
    identity_ok = np.array_equal(ident.depth, d) and bool(ident.mask.all())
    ok = mismatches == 0 and identity_ok
    assert report(5, ok, f"{20 - mismatches}/20 cases exact; identity exact={identity_ok}")


def test_criterion_6_pcc(report):
    rng = np.random.default_rng(6)
    exact = 0
    for _ in range(100):
        a = rng.normal(size=int(rng.integers(2, 200)))
        exact += pcc(a, 2 * a + 3) == 1.0 and pcc(a, -a) == -1.0
    cam = make_camera(12)
    targets, rendered = [], []
    for _ in range(4):
        d = rng.uniform(1, 3, (12, 12))
        targets.append(warp_depth(d, cam, cam))
        rendered.append(d + 0.4 * rng.normal(size=d.shape))
    rendered = np.array(rendered)
    base = depth_guidance_distance(rendered, targets)
    drift = max(abs(depth_guidance_distance(a * rendered + b, targets) - base)
                for a, b in [(2.0, 3.0), (0.01, -5.0), (75.0, 0.0), (1.3, 1e3)])
    ok = exact == 100 and drift <= 1e-9
    assert report(6, ok, f"{exact}/100 exact; affine drift {drift:.1e}")


def test_criterion_7_reduction_chain(report):
    sched = make_schedule()
    sc = make_synthetic_scene(7, n_gaussians=20, resolution=16)
    j, k = sc.train_pool[0], sc.train_pool[5]
    traj = interpolate_trajectory(sc.cameras[j], sc.cameras[k], 4, 3)
    x = np.array([render(sc.gt_cloud, c).rgb for c in traj.poses])
    rng = np.random.default_rng(7)
    den = AnalyticGaussianDenoiser(np.clip(x + rng.normal(0, 0.1, x.shape), 0, 1), 0.05, sched)
    g = gsd_gradient(x, traj, den, sched, GuidanceSpec(), 400, 100, sc.gt_images[j], sc.gt_images[k])
    ref = sds_ddim_gradient(x, den, sched, 400, 100, sc.gt_images[j])
    bitwise = np.array_equal(g.rgb, ref)
    const = sds_ddim_gradient(x, ConstantDenoiser(rng.normal(size=x.shape)), sched, 400, 100)
    zero = not np.any(const)
    ok = bitwise and zero
    assert report(7, ok, f"empty spec bitwise={bitwise}; constant denoiser exact zero={zero}")


def test_criterion_8_directional(report, tmp_path):
    t0 = time.perf_counter()
    arms = {"sds-ddim": {"mode": "sds_ddim"}, "gsd": {"mode": "gsd"}, "limited": {"mode": "gsd", "anchor_s": None}}
    psnrs = {name: [] for name in arms}
    for seed in range(5):
        cfg = ExperimentConfig.from_dict({**DIRECTIONAL_PRESET, "seed": seed, "out": str(tmp_path / f"s{seed}"),
                                          "write_artifacts": False})
        for row in run_experiment(cfg, arms)["rows"]:
            psnrs[row["arm"]].append(row["psnr"])
    secs = time.perf_counter() - t0
    gsd_wins = sum(g >= d for g, d in zip(psnrs["gsd"], psnrs["sds-ddim"]))
    ext_wins = sum(e >= l for e, l in zip(psnrs["gsd"], psnrs["limited"]))
    ok = gsd_wins >= 4 and ext_wins >= 3 and secs < 1800
    table = "; ".join(f"{k}=" + ",".join(f"{v:.2f}" for v in vals) for k, vals in psnrs.items())
    assert report(8, ok, f"GSD>=SDS-DDIM {gsd_wins}/5, extended>=limited {ext_wins}/5; {secs:.0f}s; {table}")


def test_criterion_9_baseline_sanity(report):
    t0 = time.perf_counter()
    scene = make_synthetic_scene(9, n_gaussians=200, n_views=16, resolution=64)
    data = scene_data_from_synthetic(scene, 6, seed=9)
    res = train(TrainConfig(mode="none", iterations=2000, eval_every=1000, seed=9), data)
    secs = time.perf_counter() - t0
    final = res.metrics[-1]["psnr"]
    ok = final >= 25.0 and secs < 300
    assert report(9, ok, f"held-out PSNR {final:.2f} dB (init {res.metrics[0]['psnr']:.2f}); {secs:.0f}s")


def test_criterion_10_determinism(report, tmp_path):
    cfg = {"n_gaussians": 40, "resolution": 32, "iterations": 300, "eval_every": 100, "gsd_start_iter": 100,
           "gsd_every": 5, "mode": "gsd", "guide_on": "x0hat", "frames_n": 4, "anchor_s": 3, "seed": 10}
    arms = {"gsd": {}, "baseline": {"mode": "none"}}
    worst = 0.0
    for arm in arms:
        csvs = []
        for rep in range(2):
            run_experiment({**cfg, "out": str(tmp_path / f"r{rep}")}, {arm: arms[arm]})
            csvs.append(read_metrics_csv(tmp_path / f"r{rep}" / arm / "metrics.csv"))
        assert len(csvs[0]) == len(csvs[1])
        for a, b in zip(*csvs):
            assert a.keys() == b.keys()
            worst = max([worst] + [abs(float(a[key]) - float(b[key])) for key in a])
    ok = worst < 1e-9
    assert report(10, ok, f"max per-entry difference {worst:.1e} across 2 experiments")
