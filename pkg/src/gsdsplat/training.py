"""The optimization loop: RGB + depth supervision with periodic distillation steps."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from ._validation import TrainingAbort, ValidationError, check_positive_int
from .diffusion import AnalyticGaussianDenoiser, make_schedule
from .distillation import (
    MODES,
    DistillationConfig,
    gsd_gradient,
    schedule_gate,
    sds_ddim_gradient,
    sds_gradient,
    total_loss,
)
from .guidance import (
    DEPTH_ALPHA_MIN,
    GuidanceContext,
    GuidanceSkip,
    GuidanceSpec,
    PatchFeatures,
    WarpResult,
    depth_guidance_grad,
    prepare_depth_targets,
    scale_relative_depth,
)
from .metrics import psnr, ssim
from .optim import DensifyConfig, OptimizerState, accumulate_densify_stats, adam_step, densify_and_prune
from .rasterizer import CloudGradients, rasterize, render, render_backward
from .scene import Camera, GaussianCloud, interpolate_trajectory, quat_mul, rotmat_to_quat, quat_to_rotmat
from .synthetic import initial_cloud

log = logging.getLogger(__name__)

TRAIN_MODES = ("none",) + MODES


# ------------------------------------------------------------------ priors


class ScenePrior:
    """Stand-in for a video diffusion prior over trajectory clips.

    The clean-data mean of each clip is a render of a reference cloud along
    the trajectory with every pose except the conditioning frame perturbed by
    a random rigid jitter, so the prior is plausible but geometrically biased.
    """

    def __init__(self, reference: GaussianCloud, data_var=0.05, jitter_deg=4.0, jitter_trans=0.08):
        self.reference = reference
        self.data_var = float(data_var)
        self.jitter_deg = float(jitter_deg)
        self.jitter_trans = float(jitter_trans)

    def _jitter(self, cam, rng):
        axis = rng.standard_normal(3)
        axis /= np.linalg.norm(axis)
        ang = np.radians(self.jitter_deg) * rng.uniform(0.5, 1.0)
        dq = np.concatenate([[np.cos(ang / 2)], np.sin(ang / 2) * axis])
        R = quat_to_rotmat(quat_mul(dq, rotmat_to_quat(cam.R)))
        T = cam.T + self.jitter_trans * rng.standard_normal(3)
        return Camera(cam.K, R, T, cam.width, cam.height)

    def mean(self, trajectory, rng):
        frames = []
        for i, cam in enumerate(trajectory):
            pose = cam if i == 0 else self._jitter(cam, rng)
            frames.append(render(self.reference, pose).rgb)
        return np.stack(frames)

    def denoiser(self, trajectory, rng, schedule):
        return AnalyticGaussianDenoiser(self.mean(trajectory, rng), self.data_var, schedule)


# ------------------------------------------------------------------ data + config


@dataclass
class SceneData:
    """Posed images with a train/test split and optional depth and prior sources."""

    cameras: list
    images: np.ndarray
    train_views: np.ndarray
    test_views: np.ndarray
    init_cloud: GaussianCloud
    depth_estimator: Optional[object] = None
    prior: Optional[object] = None
    extent: float = 1.0

    def validate(self, mode):
        if len(self.cameras) != len(self.images):
            raise ValidationError(f"{len(self.cameras)} cameras for {len(self.images)} images")
        if len(self.train_views) < 1:
            raise ValidationError("need at least one training view")
        if set(map(int, self.train_views)) & set(map(int, self.test_views)):
            raise ValidationError("train and test views overlap")
        if mode != "none":
            if len(self.train_views) < 2:
                raise ValidationError(f"mode {mode!r} needs at least 2 training views")
            if self.prior is None:
                raise ValidationError(f"mode {mode!r} needs a diffusion prior")
        for i, (c, img) in enumerate(zip(self.cameras, self.images)):
            if img.shape != (c.height, c.width, 3):
                raise ValidationError(f"image {i} has shape {img.shape}, camera expects "
                                      f"{(c.height, c.width, 3)}")


def scene_data_from_synthetic(scene, views, seed=0, n_init=None, floater_frac=0.1, depth_noise=0.01,
                              prior=True, prior_var=0.05, jitter_deg=4.0, jitter_trans=0.08):
    from .guidance import NoisyAffineDepth

    rng = np.random.default_rng([seed, 1])
    init = initial_cloud(scene, rng, n_init, floater_frac)
    centers = np.stack([c.center for c in scene.cameras])
    extent = 1.1 * float(np.max(np.linalg.norm(centers - centers.mean(axis=0), axis=1)))
    depth = NoisyAffineDepth(scene.gt_depths, seed=seed, noise=depth_noise)
    pr = ScenePrior(scene.gt_cloud, prior_var, jitter_deg, jitter_trans) if prior else None
    return SceneData(scene.cameras, scene.gt_images, scene.train_views(views), scene.test_idx, init,
                     depth, pr, extent)


@dataclass
class TrainConfig:
    iterations: int = 3000
    seed: int = 0
    mode: str = "gsd"
    omega: str = "1-alphabar"
    t_min: int = 200
    t_max: int = 600
    tau: int = 100
    stride: int = 25
    frames_n: int = 6
    anchor_s: int = 4
    rho: float = 1.0
    eta_depth: float = 1.0
    eta_feature: float = 1.0
    eta_pixel: float = 0.0
    guide_on: str = "xt"
    lambda_depth: float = 0.05
    lambda_gsd: float = 0.5
    gsd_start_iter: int = 3000
    gsd_every: int = 10
    eval_every: int = 500
    densify_start: int = 500
    densify_interval: int = 100
    densify_until: Optional[int] = None
    grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    split_factor: float = 1.6
    percent_dense: float = 0.01
    max_gaussians: int = 1000
    lr_positions: float = 1e-3
    lr_rotations: float = 1e-3
    lr_log_scales: float = 5e-3
    lr_opacity_logits: float = 5e-2
    lr_sh_coeffs: float = 1e-2
    divergence_db: float = 5.0
    divergence_ceiling_db: float = 40.0

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ValidationError(f"mode must be one of {TRAIN_MODES}, got {self.mode!r}")
        if self.iterations < 0:
            raise ValidationError("iterations must be >= 0")
        check_positive_int(self.gsd_every, "gsd_every")
        check_positive_int(self.eval_every, "eval_every")
        if self.mode != "none":
            self.distillation()

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        out = {}
        for k, v in d.items():
            default = known[k].default
            if isinstance(v, str) and not isinstance(default, str):
                v = _parse_scalar(v, k)
            out[k] = v
        return cls(**out)

    def to_dict(self):
        return asdict(self)

    def distillation(self):
        mode = "gsd" if self.mode == "none" else self.mode
        return DistillationConfig(mode, self.omega, self.t_min, self.t_max, self.tau, self.stride, self.frames_n,
                                  self.anchor_s, self.gsd_start_iter, self.lambda_depth, self.lambda_gsd)

    def guidance(self):
        if self.mode != "gsd":
            return GuidanceSpec([])
        return GuidanceSpec.from_weights(rho=self.rho, guide_on=self.guide_on, depth_warp=self.eta_depth,
                                         feature=self.eta_feature, pixel=self.eta_pixel)

    def densify(self, extent):
        return DensifyConfig(self.densify_start, self.densify_interval, self.densify_until, self.grad_threshold,
                             self.prune_opacity, self.split_factor, self.percent_dense, extent, self.max_gaussians)

    def learning_rates(self):
        return {f: getattr(self, "lr_" + f) for f in
                ("positions", "rotations", "log_scales", "opacity_logits", "sh_coeffs")}


def _parse_scalar(v, key):
    s = v.strip()
    if s.lower() in ("none", "null", ""):
        return None
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        raise ValidationError(f"config key {key!r}: cannot parse {v!r} as a number") from None


# ------------------------------------------------------------------ loop


@dataclass
class TrainResult:
    cloud: GaussianCloud
    metrics: list
    state: OptimizerState
    gsd_steps: int = 0
    gsd_fallbacks: int = 0
    log: list = field(default_factory=list)


def _depth_reference(data, view):
    est = data.depth_estimator
    if est is None:
        return None
    rel = est.estimate(data.images[view], view=int(view))
    valid = est.valid(int(view)) if hasattr(est, "valid") else np.ones(rel.shape, bool)
    return WarpResult(rel, valid)


def _depth_term(frame, ref):
    """1 - pcc between the estimated relative depth and the rendered depth of a training view."""
    if ref is None:
        return 0.0, None
    d, g = depth_guidance_grad(frame.depth[None], [ref], frame.alpha[None])
    return d, g[0]


def evaluate(cloud, data, config, depth_refs):
    test = [render(cloud, data.cameras[v]) for v in data.test_views]
    train = [render(cloud, data.cameras[v]) for v in data.train_views]
    row = {
        "psnr": float(np.mean([psnr(f.rgb, data.images[v]) for f, v in zip(test, data.test_views)]))
        if len(test) else float("nan"),
        "ssim": float(np.mean([ssim(f.rgb, data.images[v]) for f, v in zip(test, data.test_views)]))
        if len(test) else float("nan"),
    }
    lr, ld = [], []
    for f, v in zip(train, data.train_views):
        lr.append(total_loss(f.rgb, data.images[v], 0.0, 0.0).rgb)
        ld.append(_depth_term(f, depth_refs[int(v)])[0])
    row["loss_rgb"] = float(np.mean(lr))
    row["loss_depth"] = float(np.mean(ld))
    return row, test


def _sample_pair(rng, views):
    i, j = rng.choice(len(views), size=2, replace=False)
    return int(views[i]), int(views[j])


def gsd_step(cloud, data, config, schedule, rng, extractor=None):
    """One distillation step on a sampled trajectory; returns (CloudGradients, DistillationGradient)."""
    dc = config.distillation()
    j, k = _sample_pair(rng, data.train_views)
    cams = data.cameras
    traj = interpolate_trajectory(cams[j], cams[k], dc.frames_n, dc.anchor_s)
    rendered = [rasterize(cloud, pose) for pose in traj]
    x0 = np.stack([f.rgb for f, _ in rendered])
    t = int(rng.integers(dc.t_min, dc.t_max + 1))
    denoiser = data.prior.denoiser(traj, rng, schedule)
    y_j, y_k = data.images[j], data.images[k]
    spec = config.guidance()
    if dc.mode == "sds":
        noise = rng.standard_normal(x0.shape)
        out_rgb, out_depth = sds_gradient(x0, denoiser, schedule, t, noise, y_j, dc.omega), None
        result = None
    elif dc.mode == "sds_ddim":
        out_rgb = sds_ddim_gradient(x0, denoiser, schedule, t, dc.tau, y_j, dc.omega, dc.stride)
        out_depth, result = None, None
    else:
        context = GuidanceContext(y_k=y_k, anchor_index=traj.anchor_s - 1, extractor=extractor,
                                  depths=np.stack([f.depth for f, _ in rendered]),
                                  alphas=np.stack([f.alpha for f, _ in rendered]))
        term = spec.term("depth_warp")
        if term is not None and data.depth_estimator is not None:
            ref = _depth_reference(data, j)
            try:
                confident = ref.mask & (rendered[0][0].alpha > DEPTH_ALPHA_MIN)
                ref_depth = scale_relative_depth(ref.depth, rendered[0][0].depth, confident)
                # only pixels with geometry behind them are warped
                ref_depth = np.where(confident, ref_depth, 0.0)
                context.depth_targets = prepare_depth_targets(ref_depth, cams[j], traj, term.target_frames)
            except GuidanceSkip as exc:
                log.warning("depth guidance unavailable for view %d: %s", j, exc)
        result = gsd_gradient(x0, traj, denoiser, schedule, spec, t, dc.tau, y_j, y_k, context, dc.omega,
                              dc.stride, (j, k))
        out_rgb, out_depth = result.rgb, result.depth
    # applied per element, without the mean reduction used by the RGB loss
    scale = dc.lambda_gsd
    grads = CloudGradients.zeros_like(cloud)
    for i, (pose, (frame, ctx)) in enumerate(zip(traj, rendered)):
        d_adj = np.zeros_like(frame.depth) if out_depth is None else scale * out_depth[i]
        grads += render_backward(cloud, pose, scale * out_rgb[i], d_adj, context=ctx)
    return grads, result


def train(config: TrainConfig, data: SceneData, schedule=None, extractor=None, callback=None):
    """Run the full loop and return the trained cloud with its metrics log.

    Raises :class:`TrainingAbort` (carrying partial metrics) when the mean
    training-view PSNR at an evaluation point falls more than
    ``divergence_db`` below its best earlier value.
    """
    if isinstance(config, dict):
        config = TrainConfig.from_dict(config)
    data.validate(config.mode)
    schedule = schedule or make_schedule()
    extractor = extractor or PatchFeatures()
    rng = np.random.default_rng(config.seed)
    cloud = data.init_cloud.copy()
    cloud.check()
    state = OptimizerState.for_cloud(cloud, config.learning_rates(), seed=config.seed)
    dens = config.densify(data.extent)
    depth_refs = {int(v): _depth_reference(data, v) for v in data.train_views}
    depth_sources = sum(r is not None for r in depth_refs.values())
    result = TrainResult(cloud, [], state)
    best = [-np.inf]

    def record(it, active):
        row, _ = evaluate(cloud, data, config, depth_refs)
        row = {"iteration": it, **row, "gsd_active": int(active)}
        result.metrics.append(row)
        # near-perfect fits swing by several dB without diverging; clamp before comparing
        train_psnr = float(np.mean([min(psnr(render(cloud, data.cameras[v]).rgb, data.images[v]),
                                        config.divergence_ceiling_db) for v in data.train_views]))
        if train_psnr < best[0] - config.divergence_db:
            raise TrainingAbort(
                f"training-view PSNR fell to {train_psnr:.2f} dB from a best of {best[0]:.2f} dB "
                f"at iteration {it}",
                diagnostics={"iteration": it, "train_psnr": train_psnr, "best_train_psnr": best[0],
                             "metrics": result.metrics, "cloud": cloud, "n_gaussians": len(cloud)})
        best[0] = max(best[0], train_psnr)
        log.info("iter %d: psnr %.3f ssim %.4f loss_rgb %.5f loss_depth %.5f", it, row["psnr"], row["ssim"],
                 row["loss_rgb"], row["loss_depth"])
        if callback is not None:
            callback(row, cloud)

    record(0, config.mode != "none" and schedule_gate(0, config.gsd_start_iter).gsd)
    for it in range(config.iterations):
        gate = schedule_gate(it, config.gsd_start_iter, depth_sources)
        v = int(data.train_views[rng.integers(len(data.train_views))])
        cam = data.cameras[v]
        frame, ctx = rasterize(cloud, cam)
        gt = data.images[v]
        dterm, dadj = _depth_term(frame, depth_refs[v]) if gate.depth else (0.0, None)
        loss = total_loss(frame.rgb, gt, dterm, config.lambda_depth, dadj)
        d_depth = loss.dL_ddepth if loss.dL_ddepth is not None else np.zeros_like(frame.depth)
        grads, screen = render_backward(cloud, cam, loss.dL_drgb, d_depth, context=ctx, screen=True)
        accumulate_densify_stats(state, screen.mean_ndc, screen.splatted)

        if config.mode != "none" and gate.gsd and it % config.gsd_every == 0:
            g_gsd, dg = gsd_step(cloud, data, config, schedule, rng, extractor)
            grads += g_gsd
            result.gsd_steps += 1
            if dg is not None and dg.fallback:
                result.gsd_fallbacks += 1

        cloud, state = adam_step(cloud, grads, state)
        cloud, state = densify_and_prune(cloud, state, it, dens)
        result.cloud = cloud
        done = it + 1
        if done % config.eval_every == 0 or done == config.iterations:
            record(done, config.mode != "none" and schedule_gate(done, config.gsd_start_iter).gsd)
    result.cloud, result.state = cloud, state
    return result


# ------------------------------------------------------------------ checkpoints

_FAMILY_ORDER = ("positions", "rotations", "log_scales", "opacity_logits", "sh_coeffs")


def save_checkpoint(directory, cloud, state, iteration=0):
    """Cloud in the text format plus Adam moments and densify sums as stacked GSDF blocks."""
    from pathlib import Path

    from .io import pack_gsdf, write_cloud, write_config

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_cloud(d / "cloud.txt", cloud)
    n = len(cloud)
    blocks = []
    for f in _FAMILY_ORDER:
        blocks.append(pack_gsdf(state.m[f].reshape(n, -1)))
        blocks.append(pack_gsdf(state.v[f].reshape(n, -1)))
    blocks.append(pack_gsdf(np.stack([state.grad_accum, state.grad_count], axis=1)))
    (d / "optimizer.gsdf").write_bytes(b"".join(blocks))
    meta = {"iteration": iteration, "step": state.step, "skipped": state.skipped}
    meta.update({"lr_" + f: repr(state.lr[f]) for f in _FAMILY_ORDER})
    write_config(d / "optimizer.txt", meta)


def load_checkpoint(directory, seed=0):
    """Inverse of :func:`save_checkpoint`; moments come back at float32 precision."""
    from pathlib import Path

    from .io import read_cloud, read_config, unpack_gsdf

    d = Path(directory)
    cloud = read_cloud(d / "cloud.txt")
    meta = read_config(d / "optimizer.txt")
    state = OptimizerState.for_cloud(cloud, {f: float(meta["lr_" + f]) for f in _FAMILY_ORDER}, seed=seed)
    buf = (d / "optimizer.gsdf").read_bytes()
    pos = 0
    for f in _FAMILY_ORDER:
        shape = getattr(cloud, f).shape
        for acc in (state.m, state.v):
            arr, pos = unpack_gsdf(buf, pos)
            acc[f] = arr.astype(np.float64).reshape(shape)
    dens, pos = unpack_gsdf(buf, pos)
    dens = dens.reshape(len(cloud), 2).astype(np.float64)
    state.grad_accum, state.grad_count = dens[:, 0].copy(), dens[:, 1].copy()
    state.step, state.skipped = int(meta["step"]), int(meta["skipped"])
    state.check(cloud)
    return cloud, state, int(meta["iteration"])
