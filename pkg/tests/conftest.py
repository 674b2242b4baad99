import logging

import numpy as np
import pytest

from gsdsplat.scene import Camera, GaussianCloud, random_unit_quaternions

logging.getLogger("numba").setLevel(logging.WARNING)


def make_camera(res=32, f=None, R=None, T=None):
    f = 1.2 * res if f is None else f
    return Camera.from_intrinsics(f, f, (res - 1) / 2, (res - 1) / 2, res, res, R, T)


def random_cloud(rng, n=10, degree=2, depth=3.0, spread=0.5, opacity=(0.3, 0.9), scale=(0.08, 0.25)):
    pos = np.column_stack([rng.uniform(-spread, spread, n), rng.uniform(-spread, spread, n),
                           depth + rng.uniform(-0.5, 0.5, n)])
    q = random_unit_quaternions(rng, n)
    s = rng.uniform(*scale, (n, 3))
    o = rng.uniform(*opacity, n)
    sh = rng.normal(0.0, 0.4, (n, degree ** 2, 3))
    return GaussianCloud.from_activated(pos, q, s, o, sh, degree)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def camera():
    return make_camera()


@pytest.fixture(scope="session")
def tiny_scene():
    from gsdsplat.synthetic import make_synthetic_scene

    return make_synthetic_scene(3, n_gaussians=30, n_views=16, resolution=24)


FAMILIES = ("positions", "rotations", "log_scales", "opacity_logits", "sh_coeffs")


def fd_gradient_check(cloud, cam, rng, h=1e-6, rtol=1e-2, atol=1e-4, with_depth=True):
    """Compare render_backward against central differences of a random linear loss.

    The splat order and per-pixel skip/clip decisions are recorded once and
    replayed, so both sides of each difference stay on the same smooth piece.
    Returns {family: (worst violation ratio, checked count)}.
    """
    from gsdsplat.rasterizer import render_backward, render_frozen

    H, W = cam.height, cam.width
    w_rgb = rng.normal(size=(H, W, 3)) / np.sqrt(H * W)
    w_d = rng.normal(size=(H, W)) / np.sqrt(H * W) if with_depth else np.zeros((H, W))
    _, frozen = render_frozen(cloud, cam)

    def loss(c):
        f, _ = render_frozen(c, cam, frozen)
        return float(np.sum(w_rgb * f.rgb) + np.sum(w_d * f.depth))

    grads = render_backward(cloud, cam, w_rgb, w_d)
    out = {}
    for fam in FAMILIES:
        g = getattr(grads, fam)
        base = getattr(cloud, fam)
        worst = 0.0
        for idx in np.ndindex(base.shape):
            plus, minus = cloud.copy(), cloud.copy()
            getattr(plus, fam)[idx] += h
            getattr(minus, fam)[idx] -= h
            fd = (loss(plus) - loss(minus)) / (2 * h)
            tol = max(atol, rtol * abs(fd))
            worst = max(worst, abs(g[idx] - fd) / tol)
        out[fam] = (worst, base.size)
    return out
