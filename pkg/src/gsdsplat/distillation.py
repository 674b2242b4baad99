"""Score-distillation gradient estimators (SDS, SDS-DDIM, GSD) and the training loss."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ._validation import ValidationError
from .diffusion import ddim_invert
from .guidance import GuidanceContext, GuidanceSpec, correct_noise
from .metrics import ssim_and_grad

log = logging.getLogger(__name__)

MODES = ("sds", "sds_ddim", "gsd")


def omega_fn(name_or_fn, schedule):
    """Resolve a weighting ``omega(t)`` from a name or a callable."""
    if callable(name_or_fn):
        return name_or_fn
    if name_or_fn in ("1-alphabar", "one_minus_alphabar"):
        return lambda t: 1.0 - schedule[t]
    if name_or_fn in ("1", "const", "constant", 1, 1.0):
        return lambda t: 1.0
    if name_or_fn in ("sqrt(1-alphabar)", "sqrt_one_minus_alphabar"):
        return lambda t: float(np.sqrt(1.0 - schedule[t]))
    raise ValidationError(f"unknown omega {name_or_fn!r}")


@dataclass
class DistillationConfig:
    mode: str = "gsd"
    omega: object = "1-alphabar"
    t_min: int = 200
    t_max: int = 600
    tau: int = 100
    stride: int = 25
    frames_n: int = 6
    anchor_s: int = 4
    activation_iteration: int = 3000
    lambda_depth: float = 0.05
    lambda_gsd: float = 0.5

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.activation_iteration < 0:
            raise ValidationError("activation_iteration must be >= 0")
        if not (0 < self.tau < self.t_min <= self.t_max):
            raise ValidationError(f"need 0 < tau < t_min <= t_max, got tau={self.tau}, "
                                  f"t_min={self.t_min}, t_max={self.t_max}")
        if not (2 <= self.anchor_s <= self.frames_n):
            raise ValidationError(f"need 2 <= anchor_s <= frames_n, got {self.anchor_s}, {self.frames_n}")


@dataclass
class DistillationGradient:
    """Image-space adjoints for the trajectory frames of one distillation step."""

    rgb: np.ndarray
    depth: Optional[np.ndarray] = None
    t: int = 0
    tau: int = 0
    pair: tuple = ()
    used: tuple = ()
    fallback: bool = False


def _omega(omega, schedule):
    return omega_fn("1-alphabar" if omega is None else omega, schedule)


def sds_gradient(x, denoiser, schedule, t, noise, condition=None, omega=None):
    """omega(t) * (eps_hat(x_t, t, y) - eps) for x_t noised with the injected ``noise``."""
    x = np.asarray(x, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x.shape != noise.shape:
        raise ValidationError(f"noise shape {noise.shape} differs from image shape {x.shape}")
    ab = schedule[t]
    x_t = np.sqrt(ab) * x + np.sqrt(1.0 - ab) * noise
    eps_hat = np.asarray(denoiser(x_t, t, condition), dtype=np.float64)
    return _omega(omega, schedule)(t) * (eps_hat - noise)


def _sds_ddim_parts(x, denoiser, schedule, t, tau, condition, stride):
    x_t, x_tm = ddim_invert(x, t, tau, denoiser, schedule, condition, stride=stride)
    eps_t = np.asarray(denoiser(x_t, t, condition), dtype=np.float64)
    eps_tm = np.asarray(denoiser(x_tm, t - tau, condition), dtype=np.float64)
    return x_t, x_tm, eps_t, eps_tm


def sds_ddim_gradient(x, denoiser, schedule, t, tau, condition=None, omega=None, stride=25):
    """omega(t) * (eps_hat(x_t, t) - eps_hat(x_{t-tau}, t - tau)) along one DDIM inversion."""
    _, _, eps_t, eps_tm = _sds_ddim_parts(x, denoiser, schedule, t, tau, condition, stride)
    return _omega(omega, schedule)(t) * (eps_t - eps_tm)


def gsd_gradient(frames, trajectory, denoiser, schedule, spec: GuidanceSpec, t, tau, y_j, y_k,
                 context: Optional[GuidanceContext] = None, omega=None, stride=25, pair=()):
    """Guided noise-difference gradient for a rendered trajectory clip.

    Both noise predictions are corrected with the same guidance before they
    are differenced. The returned ``rgb`` (and ``depth``) arrays are adjoints
    to be fed to the renderer's backward pass frame by frame.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[0] != len(trajectory):
        raise ValidationError(f"frames shape {frames.shape} does not match a {len(trajectory)}-frame trajectory")
    w = _omega(omega, schedule)(t)
    x_t, x_tm, eps_t, eps_tm = _sds_ddim_parts(frames, denoiser, schedule, t, tau, y_j, stride)
    if not spec.terms:
        return DistillationGradient(w * (eps_t - eps_tm), None, t, tau, pair)
    if context is None:
        context = GuidanceContext(y_k=y_k, anchor_index=trajectory.anchor_s - 1)
    elif context.y_k is None:
        context.y_k = y_k
    try:
        F_t = correct_noise(eps_t, x_t, t, spec, context, schedule)
        F_tm = correct_noise(eps_tm, x_tm, t - tau, spec, context, schedule)
    except Exception as exc:  # guidance failure degrades to the unguided estimator
        log.warning("guidance failed (%s); falling back to unguided noise difference", exc)
        return DistillationGradient(w * (eps_t - eps_tm), None, t, tau, pair, (), True)
    depth = None
    if F_t.depth is not None or F_tm.depth is not None:
        zt = 0.0 if F_t.depth is None else F_t.depth
        ztm = 0.0 if F_tm.depth is None else F_tm.depth
        depth = w * (zt - ztm)
    used = tuple(sorted(set(F_t.used) | set(F_tm.used)))
    return DistillationGradient(w * (F_t.rgb - F_tm.rgb), depth, t, tau, pair, used)


@dataclass
class LossResult:
    total: float
    rgb: float
    l1: float
    ssim: float
    depth: float
    dL_drgb: np.ndarray
    dL_ddepth: Optional[np.ndarray] = None


L1_WEIGHT = 0.8
DSSIM_WEIGHT = 0.2


def total_loss(rendered, gt, depth_term=0.0, lambda_depth=0.05, depth_adjoint=None):
    """L_rgb + lambda_depth * depth term, with L_rgb = 0.8 * L1 + 0.2 * (1 - SSIM).

    The distillation gradient is not part of this scalar; it is injected as an
    image-space adjoint separately.
    """
    r = np.asarray(rendered, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if r.shape != g.shape:
        raise ValidationError(f"render {r.shape} and ground truth {g.shape} differ in resolution")
    diff = r - g
    l1 = float(np.mean(np.abs(diff)))
    s, s_grad = ssim_and_grad(r, g)
    rgb_loss = L1_WEIGHT * l1 + DSSIM_WEIGHT * (1.0 - s)
    d_rgb = L1_WEIGHT * np.sign(diff) / diff.size - DSSIM_WEIGHT * s_grad
    total = rgb_loss + lambda_depth * float(depth_term)
    d_depth = None if depth_adjoint is None else lambda_depth * np.asarray(depth_adjoint, dtype=np.float64)
    return LossResult(total, rgb_loss, l1, s, float(depth_term), d_rgb, d_depth)


@dataclass
class GateFlags:
    gsd: bool
    depth: bool


def schedule_gate(iteration, activation_iteration=3000, depth_sources=1):
    """Which loss terms are active at ``iteration``."""
    if iteration < 0:
        raise ValidationError("iteration must be >= 0")
    return GateFlags(gsd=iteration >= activation_iteration, depth=depth_sources >= 1)
