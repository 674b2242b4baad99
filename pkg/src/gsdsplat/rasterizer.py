"""Differentiable splat rendering of a :class:`GaussianCloud` to RGB, depth and alpha."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import NamedTuple, Optional

import numpy as np

from . import _kernels
from ._validation import ValidationError, as_float_array
from .scene import SH_C1, SH_OFFSET, Camera, GaussianCloud, covariances, quat_to_rotmat, sh_basis, sigmoid

NEAR = 0.01
BLUR = 0.3


@dataclass
class RenderedFrame:
    rgb: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray


@dataclass
class CloudGradients:
    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray

    @classmethod
    def zeros_like(cls, cloud):
        return cls(np.zeros_like(cloud.positions), np.zeros_like(cloud.rotations),
                   np.zeros_like(cloud.log_scales), np.zeros_like(cloud.opacity_logits),
                   np.zeros_like(cloud.sh_coeffs))

    def __iadd__(self, other):
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def scaled(self, factor):
        return CloudGradients(*(getattr(self, f.name) * factor for f in fields(self)))

    def is_finite(self):
        return all(np.all(np.isfinite(getattr(self, f.name))) for f in fields(self))

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


class Projection(NamedTuple):
    mean2d: Optional[np.ndarray]
    cov2d: Optional[np.ndarray]
    depth: float
    culled: bool


def _projection_jacobian(K, u, z):
    """d(pixel)/d(camera-frame point) at a point with pixel ``u`` and depth ``z``."""
    J = np.broadcast_to(K[:2, :], u.shape[:-1] + (2, 3)).copy()
    J[..., :, 2] -= u
    return J / z[..., None, None]


def project_gaussian(mu, cov, camera, near=NEAR):
    """EWA projection of one Gaussian; Gaussians at or behind ``near`` come back culled."""
    mu = as_float_array(mu, (3,), "mu")
    cov = as_float_array(cov, (3, 3), "cov")
    Xc = camera.R @ mu + camera.T
    z = Xc[2]
    if z <= near:
        return Projection(None, None, float(z), True)
    p = camera.K @ Xc
    u = p[:2] / z
    J = _projection_jacobian(camera.K, u, np.asarray(z))
    cov2d = J @ camera.R @ cov @ camera.R.T @ J.T + BLUR * np.eye(2)
    return Projection(u, cov2d, float(z), False)


@dataclass
class _Prepared:
    """Per-Gaussian screen-space quantities plus what the backward pass needs."""

    visible: np.ndarray
    order: np.ndarray
    qn: np.ndarray
    qnorm: np.ndarray
    Rq: np.ndarray
    scales: np.ndarray
    Xc: np.ndarray
    z: np.ndarray
    means: np.ndarray
    J: np.ndarray
    Mcam: np.ndarray
    conic: np.ndarray
    conic3: np.ndarray
    dirs: np.ndarray
    dist: np.ndarray
    basis: np.ndarray
    color_raw: np.ndarray
    colors: np.ndarray
    opac: np.ndarray
    radius2: np.ndarray


def _prepare(cloud, camera, near):
    N = len(cloud)
    W = camera.R
    qnorm = np.linalg.norm(cloud.rotations, axis=1)
    qn = cloud.rotations / qnorm[:, None]
    Rq = quat_to_rotmat(qn)
    scales = cloud.scales
    L = Rq * scales[:, None, :]
    Sigma = L @ np.swapaxes(L, 1, 2)

    Xc = cloud.positions @ W.T + camera.T
    z = Xc[:, 2]
    visible = z > near
    zs = np.where(visible, z, 1.0)
    means = (Xc @ camera.K.T)[:, :2] / zs[:, None]
    J = _projection_jacobian(camera.K, means, zs)
    Mcam = W @ Sigma @ W.T
    cov2d = J @ Mcam @ np.swapaxes(J, 1, 2)
    cov2d[:, 0, 0] += BLUR
    cov2d[:, 1, 1] += BLUR
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = cov2d[:, 1, 1] / det
    conic[:, 1, 1] = cov2d[:, 0, 0] / det
    conic[:, 0, 1] = -cov2d[:, 0, 1] / det
    conic[:, 1, 0] = -cov2d[:, 1, 0] / det
    conic3 = np.stack([conic[:, 0, 0], 0.5 * (conic[:, 0, 1] + conic[:, 1, 0]), conic[:, 1, 1]], axis=1)

    v = cloud.positions - camera.center
    dist = np.linalg.norm(v, axis=1)
    dirs = v / np.where(dist > 0, dist, 1.0)[:, None]
    basis = sh_basis(dirs, cloud.degree)
    color_raw = np.einsum("nk,nkc->nc", basis, cloud.sh_coeffs) + SH_OFFSET
    colors = np.maximum(color_raw, 0.0)
    opac = sigmoid(cloud.opacity_logits)

    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    with np.errstate(divide="ignore"):
        level = 2.0 * np.log(opac * 255.0)
    radius2 = np.where((opac > _kernels.W_MIN) & visible, level * lam_max, -1.0)

    idx = np.nonzero(visible)[0]
    order = idx[np.lexsort((idx, z[idx]))].astype(np.int64)
    return _Prepared(visible, order, qn, qnorm, Rq, scales, Xc, zs, means, J, Mcam, conic, conic3,
                     dirs, dist, basis, color_raw, colors, opac, radius2)


class FrozenState(NamedTuple):
    """Splat ordering and per-pixel skip/clip decisions of one render."""

    order: np.ndarray
    state: np.ndarray


def _check_cloud(cloud):
    if len(cloud) == 0:
        raise ValidationError("cannot render an empty cloud")


def _composite(prep, camera, frozen=None, record=False):
    H, Wd = camera.height, camera.width
    order = prep.order if frozen is None else frozen.order
    if frozen is not None:
        state = frozen.state
    elif record:
        state = np.zeros((H, Wd, len(order)), dtype=np.int8)
    else:
        state = np.zeros((1, 1, 1), dtype=np.int8)
    rgb, alpha, dacc = _kernels.composite_forward(
        H, Wd, order, prep.means, prep.conic3, prep.colors, prep.z, prep.opac, prep.radius2,
        frozen is not None, state, record)
    return rgb, alpha, dacc, (FrozenState(order, state) if record else None)


def _finish(rgb_raw, alpha, dacc):
    valid = alpha > _kernels.ALPHA_EPS
    depth = np.where(valid, dacc / np.where(valid, alpha, 1.0), 0.0)
    return RenderedFrame(np.clip(rgb_raw, 0.0, 1.0), depth, np.clip(alpha, 0.0, 1.0))


class RenderContext(NamedTuple):
    """Forward-pass state that :func:`render_backward` can reuse."""

    prep: _Prepared
    rgb_raw: np.ndarray
    alpha: np.ndarray
    dacc: np.ndarray
    near: float


def render(cloud: GaussianCloud, camera: Camera, near: float = NEAR) -> RenderedFrame:
    """Front-to-back alpha compositing of every Gaussian in front of ``near``."""
    return rasterize(cloud, camera, near)[0]


def rasterize(cloud, camera, near=NEAR):
    """Like :func:`render`, also returning the context for a later backward pass."""
    _check_cloud(cloud)
    prep = _prepare(cloud, camera, near)
    rgb, alpha, dacc, _ = _composite(prep, camera)
    return _finish(rgb, alpha, dacc), RenderContext(prep, rgb, alpha, dacc, near)


def render_frozen(cloud, camera, frozen=None, near=NEAR):
    """Render while recording (``frozen=None``) or replaying splat decisions.

    Replaying keeps the per-pixel active set fixed, which makes the output a
    smooth function of the parameters; used for finite-difference checks.
    """
    _check_cloud(cloud)
    prep = _prepare(cloud, camera, near)
    rgb, alpha, dacc, rec = _composite(prep, camera, frozen=frozen, record=frozen is None)
    return _finish(rgb, alpha, dacc), (rec if frozen is None else frozen)


class ScreenGradients(NamedTuple):
    """Gradient w.r.t. projected centers in NDC units and which Gaussians were splatted."""

    mean_ndc: np.ndarray
    splatted: np.ndarray


def render_backward(cloud, camera, dL_drgb, dL_ddepth, dL_dalpha=None, near=NEAR,
                    context=None, screen=False):
    """Reverse-mode gradients of a scalar loss given its image-space adjoints.

    ``context`` from :func:`rasterize` on the same cloud and camera skips the
    repeated forward pass. With ``screen=True`` a :class:`ScreenGradients`
    is returned alongside, for densification statistics.
    """
    _check_cloud(cloud)
    H, Wd = camera.height, camera.width
    g_rgb = as_float_array(dL_drgb, (H, Wd, 3), "dL_drgb")
    g_depth = as_float_array(dL_ddepth, (H, Wd), "dL_ddepth")
    g_alpha = np.zeros((H, Wd)) if dL_dalpha is None else as_float_array(dL_dalpha, (H, Wd), "dL_dalpha")

    if context is None:
        prep = _prepare(cloud, camera, near)
        rgb_raw, alpha, dacc, _ = _composite(prep, camera)
    else:
        prep, rgb_raw, alpha, dacc = context.prep, context.rgb_raw, context.alpha, context.dacc
    valid = alpha > _kernels.ALPHA_EPS
    safe_alpha = np.where(valid, alpha, 1.0)
    depth = np.where(valid, dacc / safe_alpha, 0.0)
    g_raw = np.where(rgb_raw <= 1.0, g_rgb, 0.0)
    g_dacc = np.where(valid, g_depth / safe_alpha, 0.0)
    g_alpha_tot = np.where(valid, -g_depth * depth / safe_alpha, 0.0)
    g_alpha_tot = g_alpha_tot + np.where(alpha <= 1.0, g_alpha, 0.0)

    if len(prep.order) == 0:
        grads = CloudGradients.zeros_like(cloud)
        acc = np.zeros((len(cloud), 11))
    else:
        acc = _kernels.composite_backward(H, Wd, prep.order, prep.means, prep.conic3, prep.colors,
                                          prep.z, prep.opac, prep.radius2, g_raw, g_dacc, g_alpha_tot,
                                          len(cloud)).sum(axis=0)
        grads = _chain_to_params(cloud, camera, prep, acc)
    if not screen:
        return grads
    # pixel -> NDC: ndc = 2 u / size - 1
    mean_ndc = acc[:, 0:2] * np.array([Wd / 2.0, H / 2.0])
    return grads, ScreenGradients(mean_ndc, prep.radius2 > 0)


def _chain_to_params(cloud, camera, prep, acc):
    W = camera.R
    vis = prep.visible
    g_mean = acc[:, 0:2]
    g_A = acc[:, 2:6].reshape(-1, 2, 2)
    g_color = acc[:, 6:9]
    g_z = acc[:, 9]
    g_opac = acc[:, 10]

    g_logit = g_opac * prep.opac * (1.0 - prep.opac)

    A = prep.conic
    g_C = -np.swapaxes(A, 1, 2) @ g_A @ np.swapaxes(A, 1, 2)
    J, M = prep.J, prep.Mcam
    Jt = np.swapaxes(J, 1, 2)
    g_M = Jt @ g_C @ J
    g_J = g_C @ J @ np.swapaxes(M, 1, 2) + np.swapaxes(g_C, 1, 2) @ J @ M
    g_Sigma = W.T @ g_M @ W

    L = prep.Rq * prep.scales[:, None, :]
    g_L = (g_Sigma + np.swapaxes(g_Sigma, 1, 2)) @ L
    g_s = np.einsum("nab,nab->nb", prep.Rq, g_L)
    g_logs = g_s * prep.scales
    g_R = g_L * prep.scales[:, None, :]
    g_qn = _rotmat_adjoint(prep.qn, g_R)
    g_q = (g_qn - prep.qn * np.sum(prep.qn * g_qn, axis=1, keepdims=True)) / prep.qnorm[:, None]

    z = prep.z
    g_u = g_mean - g_J[:, :, 2] / z[:, None]
    g_Xc = np.einsum("na,nab->nb", g_u, J)
    g_Xc[:, 2] += -np.einsum("nab,nab->n", g_J, J) / z + g_z
    g_pos = g_Xc @ W

    active = prep.color_raw > 0
    g_craw = np.where(active, g_color, 0.0)
    g_sh = prep.basis[:, :, None] * g_craw[:, None, :]
    if cloud.degree >= 2:
        g_basis = np.einsum("nkc,nc->nk", cloud.sh_coeffs, g_craw)
        g_dir = SH_C1 * np.stack([-g_basis[:, 3], -g_basis[:, 1], g_basis[:, 2]], axis=1)
        d = prep.dirs
        g_v = (g_dir - d * np.sum(d * g_dir, axis=1, keepdims=True)) / prep.dist[:, None]
        g_pos = g_pos + g_v

    mask = vis[:, None]
    return CloudGradients(
        np.where(mask, g_pos, 0.0),
        np.where(mask, g_q, 0.0),
        np.where(mask, g_logs, 0.0),
        np.where(vis, g_logit, 0.0),
        np.where(vis[:, None, None], g_sh, 0.0),
    )


def _rotmat_adjoint(q, g):
    """Pull a 3x3 rotation-matrix gradient back onto (w, x, y, z)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g00, g01, g02 = g[:, 0, 0], g[:, 0, 1], g[:, 0, 2]
    g10, g11, g12 = g[:, 1, 0], g[:, 1, 1], g[:, 1, 2]
    g20, g21, g22 = g[:, 2, 0], g[:, 2, 1], g[:, 2, 2]
    gw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    gx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    gy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    gz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    return np.stack([gw, gx, gy, gz], axis=1)


def visible_count(cloud, camera, near=NEAR):
    return int(np.count_nonzero(_prepare(cloud, camera, near).visible))
