"""Seeded synthetic scenes rendered by the engine itself, with a train/test split."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import ValidationError, check_positive_int
from .rasterizer import render
from .scene import SH_C0, SH_OFFSET, Camera, GaussianCloud, random_unit_quaternions

TEST_EVERY = 8
WORLD_UP = np.array([0.0, 1.0, 0.0])


@dataclass
class SyntheticScene:
    gt_cloud: GaussianCloud
    cameras: list
    gt_images: np.ndarray
    gt_depths: np.ndarray
    gt_alphas: np.ndarray
    test_idx: np.ndarray
    train_pool: np.ndarray
    seed: int = 0

    @property
    def n_views(self):
        return len(self.cameras)

    def train_views(self, k):
        """``k`` training views sampled evenly from the trainable pool."""
        return evenly_sample(self.train_pool, k)


def split_views(n_views, every=TEST_EVERY):
    """Every ``every``-th view (starting at 0) is held out."""
    idx = np.arange(n_views)
    test = idx[idx % every == 0]
    return test, idx[idx % every != 0]


def evenly_sample(pool, k):
    pool = np.asarray(pool)
    k = check_positive_int(k, "k")
    if k > len(pool):
        raise ValidationError(f"cannot take {k} views from a pool of {len(pool)}")
    if k == 1:
        return pool[[len(pool) // 2]]
    pos = np.floor(np.linspace(0, len(pool) - 1, k) + 0.5).astype(int)
    return pool[pos]


def arc_cameras(n_views, target, resolution, radius=3.0, arc_deg=160.0, elevation_deg=15.0, focal=1.1):
    """Cameras on a horizontal arc around ``target``, all looking at it."""
    W = H = int(resolution)
    f = focal * W
    cams = []
    for i, th in enumerate(np.radians(np.linspace(-arc_deg / 2, arc_deg / 2, n_views))):
        el = np.radians(elevation_deg) * (0.5 + 0.5 * np.cos(np.pi * i / max(n_views - 1, 1)))
        offset = radius * np.array([np.sin(th) * np.cos(el), np.sin(el), -np.cos(th) * np.cos(el)])
        cams.append(Camera.look_at(target + offset, target, WORLD_UP, f, f, (W - 1) / 2, (H - 1) / 2, W, H))
    return cams


def make_gt_cloud(rng, n_gaussians, degree=1):
    n_blobs = min(int(rng.integers(3, 6)), n_gaussians)
    centers = rng.uniform(-0.45, 0.45, (n_blobs, 3))
    colors = rng.uniform(0.1, 0.95, (n_blobs, 3))
    spread = rng.uniform(0.12, 0.25, n_blobs)
    blob_scale = rng.uniform(0.04, 0.09, n_blobs)
    owner = np.sort(np.arange(n_gaussians) % n_blobs)
    pos = centers[owner] + rng.normal(0.0, 1.0, (n_gaussians, 3)) * spread[owner, None]
    scales = blob_scale[owner, None] * np.exp(rng.uniform(-0.4, 0.4, (n_gaussians, 3)))
    col = np.clip(colors[owner] + rng.normal(0.0, 0.05, (n_gaussians, 3)), 0.02, 0.98)
    sh = np.zeros((n_gaussians, degree ** 2, 3))
    sh[:, 0, :] = (col - SH_OFFSET) / SH_C0
    opac = rng.uniform(0.6, 0.95, n_gaussians)
    return GaussianCloud.from_activated(pos, random_unit_quaternions(rng, n_gaussians), scales, opac, sh, degree)


def make_synthetic_scene(seed, n_gaussians=200, n_views=16, resolution=64, degree=1):
    """Deterministic blob scene with ground-truth renders on an arc of cameras."""
    n_gaussians = check_positive_int(n_gaussians, "n_gaussians")
    n_views = check_positive_int(n_views, "n_views")
    resolution = check_positive_int(resolution, "resolution")
    if n_views < 4:
        raise ValidationError(f"need at least 4 views, got {n_views}")
    rng = np.random.default_rng(seed)
    cloud = make_gt_cloud(rng, n_gaussians, degree)
    cams = arc_cameras(n_views, cloud.positions.mean(axis=0), resolution)
    frames = [render(cloud, c) for c in cams]
    test, pool = split_views(n_views)
    return SyntheticScene(cloud, cams, np.stack([f.rgb for f in frames]), np.stack([f.depth for f in frames]),
                          np.stack([f.alpha for f in frames]), test, pool, seed)


def initial_cloud(scene, rng, n0=None, floater_frac=0.1, init_scale=None, init_opacity=0.1):
    """Initial Gaussians at jittered ground-truth points plus uniform floaters.

    Colors start gray and rotations at identity, so only the geometry prior
    comes from the ground truth.
    """
    gt = scene.gt_cloud.positions
    n0 = len(gt) if n0 is None else check_positive_int(n0, "n0")
    idx = rng.integers(0, len(gt), n0)
    lo, hi = gt.min(axis=0), gt.max(axis=0)
    extent = float(np.max(hi - lo)) or 1.0
    pos = gt[idx] + rng.normal(0.0, 0.02 * extent, (n0, 3))
    n_float = int(round(floater_frac * n0))
    pad = 0.1 * extent
    floaters = rng.uniform(lo - pad, hi + pad, (n_float, 3))
    pos = np.concatenate([pos, floaters])
    n = len(pos)
    s = 0.05 * extent if init_scale is None else init_scale
    q = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    sh = np.zeros((n, scene.gt_cloud.n_sh, 3))
    return GaussianCloud.from_activated(pos, q, np.full((n, 3), s), np.full(n, init_opacity), sh,
                                        scene.gt_cloud.degree)
