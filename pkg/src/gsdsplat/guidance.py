"""Guidance terms that correct a noise prediction toward known views.

Three distances are supported: warped-depth correlation, patch-feature L1
and pixel L1 (kept for ablations). :func:`correct_noise` combines their
gradients into a corrected noise prediction.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from ._validation import ValidationError, check_image

log = logging.getLogger(__name__)

KINDS = ("depth_warp", "feature", "pixel")
MIN_COVERAGE = 0.05
# rendered depth is normalised by alpha; below this its gradient is dominated by 1 / alpha
DEPTH_ALPHA_MIN = 0.5
MIN_VALID_DEPTH = 16


class GuidanceSkip(ValueError):
    """A guidance term cannot be evaluated for this input and is skipped."""


def gamma(t, schedule):
    """Image-space to noise-space conversion factor sqrt(ab) / sqrt(1 - ab)."""
    if not (1 <= t <= schedule.T):
        raise ValidationError(f"gamma needs 1 <= t <= T, got t={t}")
    ab = schedule[t]
    if ab >= 1.0:
        raise ZeroDivisionError(f"alphabar[{t}] = 1 makes gamma infinite")
    out = math.sqrt(ab) / math.sqrt(1.0 - ab)
    if not math.isfinite(out):
        raise ZeroDivisionError(f"gamma({t}) is not finite")
    return out


@dataclass
class GuidanceTerm:
    kind: str
    weight: float = 1.0
    target_frames: Optional[tuple] = None


@dataclass
class GuidanceSpec:
    """Weighted guidance terms plus the strength schedule ``rho``.

    ``rho`` is a constant, a ``{t: value}`` table (piecewise constant from
    the largest key not above ``t``) or a callable. ``guide_on`` selects
    whether distances are measured on ``x_t`` itself or on its clean estimate.
    """

    terms: list = field(default_factory=list)
    rho: object = 1.0
    guide_on: str = "xt"

    def __post_init__(self):
        seen = set()
        for term in self.terms:
            if term.kind not in KINDS:
                raise ValidationError(f"unknown guidance kind {term.kind!r}")
            if term.kind in seen:
                raise ValidationError(f"duplicate guidance term {term.kind!r}")
            if not term.weight >= 0:
                raise ValidationError(f"guidance weight must be >= 0, got {term.weight}")
            seen.add(term.kind)
        if self.guide_on not in ("xt", "x0hat"):
            raise ValidationError(f"guide_on must be 'xt' or 'x0hat', got {self.guide_on!r}")

    @classmethod
    def from_weights(cls, rho=1.0, guide_on="xt", **weights):
        terms = [GuidanceTerm(k, float(w)) for k, w in weights.items() if w]
        return cls(terms, rho, guide_on)

    def term(self, kind):
        for t in self.terms:
            if t.kind == kind:
                return t
        return None

    def rho_at(self, t):
        if callable(self.rho):
            return float(self.rho(t))
        if isinstance(self.rho, dict):
            keys = sorted(k for k in self.rho if k <= t)
            return float(self.rho[keys[-1]]) if keys else 0.0
        return float(self.rho)

    def lambda_t(self, t, schedule):
        return gamma(t, schedule) * self.rho_at(t)

    def scaled(self, factor):
        return GuidanceSpec([GuidanceTerm(t.kind, t.weight * factor, t.target_frames) for t in self.terms],
                            self.rho, self.guide_on)


# ------------------------------------------------------------------ depth warping


@dataclass
class WarpResult:
    depth: np.ndarray
    mask: np.ndarray

    @property
    def coverage(self):
        return float(self.mask.mean())

    @property
    def ok(self):
        return self.coverage >= MIN_COVERAGE


def _relative_pose(cam_src, cam_dst):
    """(R, T) taking source-camera coordinates to destination-camera coordinates."""
    if np.array_equal(cam_src.R, cam_dst.R) and np.array_equal(cam_src.T, cam_dst.T):
        return np.eye(3), np.zeros(3)
    Rs, Rd = cam_src.R, cam_dst.R
    R = np.empty((3, 3))
    for a in range(3):
        for b in range(3):
            R[a, b] = Rd[a, 0] * Rs[b, 0] + Rd[a, 1] * Rs[b, 1] + Rd[a, 2] * Rs[b, 2]
    Ts = cam_src.T
    T = np.array([cam_dst.T[a] - (R[a, 0] * Ts[0] + R[a, 1] * Ts[1] + R[a, 2] * Ts[2]) for a in range(3)])
    return R, T


def warp_depth(depth_src, cam_src, cam_dst, near=1e-6):
    """Forward-warp a depth map into another view, keeping the nearest surface per pixel."""
    depth_src = np.asarray(depth_src, dtype=np.float64)
    H, W = cam_src.height, cam_src.width
    if depth_src.shape != (H, W):
        raise ValidationError(f"depth map shape {depth_src.shape} does not match camera {H}x{W}")
    if not np.array_equal(cam_src.K, cam_dst.K) or (cam_dst.height, cam_dst.width) != (H, W):
        raise ValidationError("warp_depth requires cameras with identical intrinsics")
    K = cam_src.K
    fx, s, cx, fy, cy = K[0, 0], K[0, 1], K[0, 2], K[1, 1], K[1, 2]
    R, T = _relative_pose(cam_src, cam_dst)

    ys, xs = np.nonzero(np.isfinite(depth_src) & (depth_src > 0))
    d = depth_src[ys, xs]
    xf, yf = xs.astype(np.float64), ys.astype(np.float64)
    ry = (yf - cy) / fy
    rx = (xf - cx - s * ry) / fx
    X0, X1, X2 = d * rx, d * ry, d * 1.0
    Y0 = R[0, 0] * X0 + R[0, 1] * X1 + R[0, 2] * X2 + T[0]
    Y1 = R[1, 0] * X0 + R[1, 1] * X1 + R[1, 2] * X2 + T[1]
    Y2 = R[2, 0] * X0 + R[2, 1] * X1 + R[2, 2] * X2 + T[2]
    front = Y2 > near
    Y0, Y1, Y2 = Y0[front], Y1[front], Y2[front]
    u = (fx * Y0 + s * Y1 + cx * Y2) / Y2
    v = (fy * Y1 + cy * Y2) / Y2
    ui = np.floor(u + 0.5)
    vi = np.floor(v + 0.5)
    inside = (ui >= 0) & (ui < W) & (vi >= 0) & (vi < H)
    flat = (vi[inside] * W + ui[inside]).astype(np.int64)
    out = np.full(H * W, np.inf)
    np.minimum.at(out, flat, Y2[inside])
    mask = np.isfinite(out)
    out[~mask] = 0.0
    return WarpResult(out.reshape(H, W), mask.reshape(H, W))


def fit_affine_depth(rel_depth, gaussian_depth, valid):
    """Least-squares (a, b) with a * rel + b ~ gaussian depth over ``valid``."""
    valid = np.asarray(valid, dtype=bool)
    if valid.sum() < MIN_VALID_DEPTH:
        raise GuidanceSkip(f"only {int(valid.sum())} valid depth pixels (need {MIN_VALID_DEPTH})")
    r = np.asarray(rel_depth, dtype=np.float64)[valid]
    g = np.asarray(gaussian_depth, dtype=np.float64)[valid]
    rm, gm = r.mean(), g.mean()
    rc = r - rm
    var = np.dot(rc, rc)
    if var <= 1e-12 * max(1.0, rm * rm) * len(r):
        raise GuidanceSkip("relative depth is constant over the valid region")
    a = np.dot(rc, g - gm) / var
    if not a > 0:
        raise GuidanceSkip(f"depth alignment produced non-positive scale {a:.3g}")
    return a, gm - a * rm


def scale_relative_depth(rel_depth, gaussian_depth, valid):
    """Map relative depth into the renderer's metric range by a positive affine fit."""
    a, b = fit_affine_depth(rel_depth, gaussian_depth, valid)
    return a * np.asarray(rel_depth, dtype=np.float64) + b


def pcc(a, b):
    """Pearson correlation coefficient of two equal-length vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape or a.size < 2:
        raise ValidationError("pcc needs two vectors of equal length >= 2")
    ac = a - a.mean()
    bc = b - b.mean()
    na, nb = math.sqrt(np.dot(ac, ac)), math.sqrt(np.dot(bc, bc))
    if na == 0 or nb == 0:
        raise GuidanceSkip("pcc undefined for zero-variance input")
    return _snap(np.dot(ac, bc) / (na * nb), a.size)


def _snap(r, n):
    """Clip to [-1, 1]; values within rounding error of +-1 are returned as +-1."""
    if 1.0 - abs(r) <= 8.0 * n * np.finfo(np.float64).eps:
        return math.copysign(1.0, r)
    return float(np.clip(r, -1.0, 1.0))


def _pcc_and_grad(a, b):
    """pcc(a, b) and its gradient with respect to ``b``."""
    ac = a - a.mean()
    bc = b - b.mean()
    na, nb = math.sqrt(np.dot(ac, ac)), math.sqrt(np.dot(bc, bc))
    if na == 0 or nb == 0:
        raise GuidanceSkip("pcc undefined for zero-variance input")
    r = np.dot(ac, bc) / (na * nb)
    return _snap(r, a.size), ac / (na * nb) - r * bc / (nb * nb)


def prepare_depth_targets(ref_depth, cam_ref, trajectory, target_frames=None):
    """Warp a metric-aligned reference depth into every (targeted) trajectory frame."""
    frames = range(len(trajectory)) if target_frames is None else target_frames
    targets = [None] * len(trajectory)
    for i in frames:
        targets[i] = warp_depth(ref_depth, cam_ref, trajectory[i])
    return targets


def _depth_frame_terms(rendered_depths, targets, alphas):
    for i, target in enumerate(targets):
        if target is None:
            continue
        if not target.ok:
            log.warning("depth guidance: frame %d mask coverage %.3f below %.2f, skipped",
                        i, target.coverage, MIN_COVERAGE)
            continue
        mask = target.mask
        if alphas is not None:
            mask = mask & (np.asarray(alphas[i]) > DEPTH_ALPHA_MIN)
        if mask.sum() < 2:
            continue
        try:
            r, g = _pcc_and_grad(target.depth[mask], np.asarray(rendered_depths[i], dtype=np.float64)[mask])
        except GuidanceSkip:
            log.warning("depth guidance: frame %d has zero depth variance, skipped", i)
            continue
        yield i, mask, r, g


def depth_guidance_distance(rendered_depths, targets, alphas=None):
    """Sum over frames of 1 - pcc(warped reference, rendered depth) on the warp mask."""
    total = 0.0
    used = 0
    for _, _, r, _ in _depth_frame_terms(rendered_depths, targets, alphas):
        total += 1.0 - r
        used += 1
    if used == 0:
        log.warning("depth guidance: every frame skipped; term contributes zero")
    return total


def depth_guidance_grad(rendered_depths, targets, alphas=None):
    """(distance, d distance / d rendered depths)."""
    rendered_depths = np.asarray(rendered_depths, dtype=np.float64)
    grad = np.zeros_like(rendered_depths)
    total = 0.0
    for i, mask, r, g in _depth_frame_terms(rendered_depths, targets, alphas):
        total += 1.0 - r
        grad[i][mask] = -g
    return total, grad


# -------------------------------------------------------------- feature guidance


class FeatureExtractor:
    """Deterministic image -> feature map. Differentiable extractors implement ``vjp``."""

    differentiable = False

    def extract(self, image):
        raise NotImplementedError

    def vjp(self, image, grad_features):
        raise NotImplementedError

    def __call__(self, image):
        return self.extract(image)


class IdentityFeatures(FeatureExtractor):
    differentiable = True

    def extract(self, image):
        return np.asarray(image, dtype=np.float64)

    def vjp(self, image, grad_features):
        return np.asarray(grad_features, dtype=np.float64)


class PatchFeatures(FeatureExtractor):
    """12 features per square patch: channel means, channel standard deviations
    and, per channel, mean absolute horizontal and vertical differences
    (within the patch), L2-normalized per patch."""

    differentiable = True
    n_features = 12

    def __init__(self, patch=8):
        self.patch = int(patch)

    def _crop(self, image):
        H, W = image.shape[:2]
        p = self.patch
        Hc, Wc = (H // p) * p, (W // p) * p
        if Hc == 0 or Wc == 0:
            raise ValidationError(f"image {H}x{W} smaller than patch size {p}")
        y0, x0 = (H - Hc) // 2, (W - Wc) // 2
        if (Hc, Wc) != (H, W):
            log.info("patch features: center-cropping %dx%d to %dx%d", H, W, Hc, Wc)
        return y0, x0, Hc, Wc

    def _patches(self, image):
        image = check_image(image)
        y0, x0, Hc, Wc = self._crop(image)
        p = self.patch
        crop = image[y0:y0 + Hc, x0:x0 + Wc]
        return crop.reshape(Hc // p, p, Wc // p, p, 3).transpose(0, 2, 1, 3, 4), (y0, x0, Hc, Wc)

    def raw(self, image):
        """Un-normalized features, shape (rows, cols, 12)."""
        P, _ = self._patches(image)
        mean = P.mean(axis=(2, 3))
        std = np.sqrt(np.maximum(((P - mean[:, :, None, None, :]) ** 2).mean(axis=(2, 3)), 0.0))
        gh = np.abs(np.diff(P, axis=3)).mean(axis=(2, 3))
        gv = np.abs(np.diff(P, axis=2)).mean(axis=(2, 3))
        grads = np.stack([gh, gv], axis=-1).reshape(P.shape[0], P.shape[1], 6)
        return np.concatenate([mean, std, grads], axis=-1)

    def extract(self, image):
        f = self.raw(image)
        n = np.linalg.norm(f, axis=-1, keepdims=True)
        return np.where(n > 0, f / np.where(n > 0, n, 1.0), f)

    def vjp(self, image, grad_features):
        image = np.asarray(image, dtype=np.float64)
        P, (y0, x0, Hc, Wc) = self._patches(image)
        p = self.patch
        f = self.raw(image)
        n = np.linalg.norm(f, axis=-1, keepdims=True)
        out = np.where(n > 0, f / np.where(n > 0, n, 1.0), f)
        g = np.asarray(grad_features, dtype=np.float64)
        g_f = np.where(n > 0, (g - out * np.sum(out * g, axis=-1, keepdims=True)) / np.where(n > 0, n, 1.0), g)

        g_mean, g_std = g_f[..., 0:3], g_f[..., 3:6]
        g_grad = g_f[..., 6:12].reshape(f.shape[0], f.shape[1], 3, 2)
        mean = f[..., 0:3]
        std = f[..., 3:6]
        npx = p * p
        gP = np.broadcast_to((g_mean / npx)[:, :, None, None, :], P.shape).copy()
        safe = np.where(std > 0, std, 1.0)
        coef = np.where(std > 0, g_std / (npx * safe), 0.0)
        gP += coef[:, :, None, None, :] * (P - mean[:, :, None, None, :])
        ndiff = p * (p - 1)
        sh = np.sign(np.diff(P, axis=3)) * (g_grad[..., 0] / ndiff)[:, :, None, None, :]
        gP[:, :, :, 1:, :] += sh
        gP[:, :, :, :-1, :] -= sh
        sv = np.sign(np.diff(P, axis=2)) * (g_grad[..., 1] / ndiff)[:, :, None, None, :]
        gP[:, :, 1:, :, :] += sv
        gP[:, :, :-1, :, :] -= sv

        full = np.zeros_like(image)
        full[y0:y0 + Hc, x0:x0 + Wc] = gP.transpose(0, 2, 1, 3, 4).reshape(Hc, Wc, 3)
        return full


def builtin_patch_features(image, patch=8):
    return PatchFeatures(patch).extract(image)


def feature_guidance_distance(extractor, y_k, x_frame):
    """Mean absolute difference between the features of two same-size images."""
    y_k = check_image(y_k, "y_k")
    x_frame = check_image(x_frame, "x_frame")
    if y_k.shape != x_frame.shape:
        raise ValidationError(f"image shapes differ: {y_k.shape} vs {x_frame.shape}")
    fy, fx = extractor(y_k), extractor(x_frame)
    return float(np.mean(np.abs(fy - fx)))


def feature_guidance_grad(extractor, y_k, x_frame):
    fy, fx = extractor(y_k), extractor(x_frame)
    dist = float(np.mean(np.abs(fy - fx)))
    return dist, extractor.vjp(x_frame, np.sign(fx - fy) / fx.size)


def pixel_guidance_distance(y_k, x_frame):
    return float(np.mean(np.abs(np.asarray(y_k) - np.asarray(x_frame))))


def pixel_guidance_grad(y_k, x_frame):
    x_frame = np.asarray(x_frame, dtype=np.float64)
    y_k = np.asarray(y_k, dtype=np.float64)
    if x_frame.shape != y_k.shape:
        raise ValidationError(f"image shapes differ: {y_k.shape} vs {x_frame.shape}")
    diff = x_frame - y_k
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


# ------------------------------------------------------------------- correction


@dataclass
class GuidanceContext:
    """Everything the guidance terms compare against for one trajectory.

    ``anchor_index`` is the 0-based frame holding the second training view;
    ``depths``/``alphas`` are the rendered channels attached to the frames.
    """

    y_k: Optional[np.ndarray] = None
    anchor_index: Optional[int] = None
    extractor: Optional[FeatureExtractor] = None
    depth_targets: Optional[list] = None
    depths: Optional[np.ndarray] = None
    alphas: Optional[np.ndarray] = None


class Correction(NamedTuple):
    rgb: np.ndarray
    depth: Optional[np.ndarray]
    distance: float
    used: tuple


def guidance_gradient(x, spec, context):
    """Weighted distance sum and its gradients w.r.t. the frames and the depth channel."""
    g_rgb = np.zeros_like(x)
    g_depth = None if context.depths is None else np.zeros_like(np.asarray(context.depths, dtype=np.float64))
    total = 0.0
    used = []
    for term in spec.terms:
        if term.weight == 0:
            continue
        try:
            if term.kind == "pixel":
                s = context.anchor_index
                d, g = pixel_guidance_grad(context.y_k, x[s])
                grad_rgb, grad_depth = _at_frame(x, s, g), None
            elif term.kind == "feature":
                s = context.anchor_index
                extractor = context.extractor or PatchFeatures()
                d, g = feature_guidance_grad(extractor, context.y_k, x[s])
                grad_rgb, grad_depth = _at_frame(x, s, g), None
            else:
                if context.depth_targets is None or context.depths is None:
                    raise GuidanceSkip("no depth targets in context")
                targets = context.depth_targets
                if term.target_frames is not None:
                    targets = [t if i in term.target_frames else None for i, t in enumerate(targets)]
                d, grad_depth = depth_guidance_grad(context.depths, targets, context.alphas)
                grad_rgb = None
        except (GuidanceSkip, ValidationError) as exc:
            log.warning("guidance term %s skipped: %s", term.kind, exc)
            continue
        parts = [p for p in (grad_rgb, grad_depth) if p is not None]
        if not all(np.all(np.isfinite(p)) for p in parts) or not math.isfinite(d):
            log.warning("guidance term %s produced a non-finite gradient; dropped", term.kind)
            continue
        total += term.weight * d
        if grad_rgb is not None:
            g_rgb += term.weight * grad_rgb
        if grad_depth is not None:
            g_depth += term.weight * grad_depth
        used.append(term.kind)
    return total, g_rgb, g_depth, tuple(used)


def _at_frame(x, s, g):
    out = np.zeros_like(x)
    out[s] = g
    return out


def correct_noise(eps, x_t, t, spec, context, schedule):
    """Corrected noise prediction eps - lambda_t * grad sum_i eta_i D_i.

    Returns a :class:`Correction` whose ``rgb`` has the shape of ``eps`` and
    whose ``depth`` (when depth guidance is configured) is the matching
    correction on the attached depth channel.
    """
    eps = np.asarray(eps, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    if eps.shape != x_t.shape:
        raise ValidationError(f"eps shape {eps.shape} differs from x_t shape {x_t.shape}")
    if not spec.terms:
        return Correction(eps, None, 0.0, ())
    lam = spec.lambda_t(t, schedule)
    if lam == 0:
        return Correction(eps, None, 0.0, ())
    x_eval = x_t
    chain = 1.0
    if spec.guide_on == "x0hat":
        ab = schedule[t]
        x_eval = (x_t - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        chain = 1.0 / math.sqrt(ab)
    dist, g_rgb, g_depth, used = guidance_gradient(x_eval, spec, context)
    rgb = eps - lam * chain * g_rgb
    depth = None if g_depth is None else -lam * g_depth
    return Correction(rgb, depth, dist, used)


# -------------------------------------------------------------- depth estimators


class DepthEstimator:
    """Monocular relative-depth source: ``estimate(image, view=None) -> H x W``."""

    def estimate(self, image, view=None):
        raise NotImplementedError


class NoisyAffineDepth(DepthEstimator):
    """Ground-truth depth under a random positive affine map plus relative noise.

    Each view gets its own fixed (scale, shift, noise) draw from ``seed``.
    """

    def __init__(self, gt_depths, seed=0, noise=0.01):
        self.gt_depths = [np.asarray(d, dtype=np.float64) for d in gt_depths]
        self.noise = noise
        self.seed = seed
        self._cache = {}

    def estimate(self, image=None, view=None):
        if view is None:
            raise ValidationError("NoisyAffineDepth needs the view index")
        if view not in self._cache:
            rng = np.random.default_rng([self.seed, view])
            gt = self.gt_depths[view]
            a = rng.uniform(0.3, 3.0)
            b = rng.uniform(0.0, 2.0)
            valid = gt > 0
            scale = np.std(gt[valid]) if valid.any() else 1.0
            rel = a * gt + b + self.noise * a * scale * rng.standard_normal(gt.shape)
            self._cache[view] = (np.where(valid, rel, 0.0), valid)
        return self._cache[view][0].copy()

    def valid(self, view):
        self.estimate(view=view)
        return self._cache[view][1]
