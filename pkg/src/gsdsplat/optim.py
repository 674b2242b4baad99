"""Adam updates and densification/pruning for a :class:`GaussianCloud`."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ._validation import ValidationError
from .scene import PARAM_FAMILIES, GaussianCloud, quat_to_rotmat

log = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-15

DEFAULT_LR = {
    "positions": 1e-3,
    "rotations": 1e-3,
    "log_scales": 5e-3,
    "opacity_logits": 5e-2,
    "sh_coeffs": 1e-2,
}


@dataclass
class DensifyConfig:
    start: int = 500
    interval: int = 100
    until: int = None
    grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    split_factor: float = 1.6
    percent_dense: float = 0.01
    extent: float = 1.0
    max_gaussians: int = 2000

    def due(self, iteration):
        if iteration < self.start or iteration % self.interval != 0:
            return False
        return self.until is None or iteration <= self.until


@dataclass
class OptimizerState:
    lr: dict
    m: dict
    v: dict
    step: int = 0
    grad_accum: np.ndarray = None
    grad_count: np.ndarray = None
    skipped: int = 0
    rng: np.random.Generator = field(default=None, repr=False)

    @classmethod
    def for_cloud(cls, cloud, lr=None, seed=0):
        rates = dict(DEFAULT_LR)
        rates.update(lr or {})
        missing = set(PARAM_FAMILIES) - set(rates)
        if missing:
            raise ValidationError(f"no learning rate for {sorted(missing)}")
        m = {f: np.zeros_like(getattr(cloud, f)) for f in PARAM_FAMILIES}
        v = {f: np.zeros_like(getattr(cloud, f)) for f in PARAM_FAMILIES}
        n = len(cloud)
        return cls(rates, m, v, 0, np.zeros(n), np.zeros(n), 0, np.random.default_rng(seed))

    def __len__(self):
        return len(self.grad_accum)

    def check(self, cloud):
        n = len(cloud)
        sizes = [len(self.grad_accum), len(self.grad_count)] + [len(a) for a in self.m.values()] + \
            [len(a) for a in self.v.values()]
        if any(s != n for s in sizes):
            raise ValidationError(f"optimizer accumulators {sizes} do not match cloud size {n}")

    def select(self, index):
        """Keep the accumulator rows of ``index`` (new rows start at zero when index is -1)."""
        index = np.asarray(index)
        keep = index >= 0

        def take(a):
            out = np.zeros((len(index),) + a.shape[1:])
            out[keep] = a[index[keep]]
            return out

        self.m = {f: take(a) for f, a in self.m.items()}
        self.v = {f: take(a) for f, a in self.v.items()}
        self.grad_accum = np.zeros(len(index))
        self.grad_count = np.zeros(len(index))


def adam_step(cloud: GaussianCloud, grads, state: OptimizerState):
    """One bias-corrected Adam update of every parameter family, in place.

    Non-finite gradients skip the whole step. Quaternions are renormalized
    afterwards.
    """
    state.check(cloud)
    for f, g in grads.items():
        if g.shape != getattr(cloud, f).shape:
            raise ValidationError(f"gradient for {f} has shape {g.shape}, expected {getattr(cloud, f).shape}")
    if not grads.is_finite():
        state.skipped += 1
        log.warning("non-finite gradient at step %d; update skipped", state.step + 1)
        return cloud, state
    state.step += 1
    bc1 = 1.0 - BETA1 ** state.step
    bc2 = 1.0 - BETA2 ** state.step
    for f, g in grads.items():
        m = state.m[f] = BETA1 * state.m[f] + (1.0 - BETA1) * g
        v = state.v[f] = BETA2 * state.v[f] + (1.0 - BETA2) * g * g
        update = state.lr[f] * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        setattr(cloud, f, getattr(cloud, f) - update)
    cloud.normalize_rotations()
    return cloud, state


def accumulate_densify_stats(state, position_grad, visible=None):
    """Add the per-Gaussian positional-gradient norm to the running statistic.

    The training loop passes screen-space (NDC) center gradients, the scale
    at which the default threshold is meaningful.
    """
    norms = np.linalg.norm(position_grad, axis=1)
    hit = norms > 0 if visible is None else np.asarray(visible, dtype=bool)
    state.grad_accum[hit] += norms[hit]
    state.grad_count[hit] += 1


def densify_and_prune(cloud, state, iteration, config: DensifyConfig = None):
    """Clone/split high-gradient Gaussians and prune transparent ones.

    Acts only on iterations where ``config.due`` holds. Returns the new cloud
    and the (resized) state.
    """
    config = config or DensifyConfig()
    state.check(cloud)
    if not config.due(iteration):
        return cloud, state
    n = len(cloud)
    mean_grad = np.where(state.grad_count > 0, state.grad_accum / np.maximum(state.grad_count, 1), 0.0)
    cand = np.nonzero(mean_grad > config.grad_threshold)[0]
    budget = max(config.max_gaussians - n, 0)
    if len(cand) > budget:
        keep = np.argsort(-mean_grad[cand], kind="stable")[:budget]
        cand = np.sort(cand[keep])
    big = cloud.scales[cand].max(axis=1) > config.percent_dense * config.extent if len(cand) else np.zeros(0, bool)
    clone_idx, split_idx = cand[~big], cand[big]

    # source row of every output row; new Gaussians (-1) start with zero moments
    parts = [cloud]
    index = [np.arange(n)]
    if len(clone_idx):
        parts.append(cloud.subset(clone_idx))
        index.append(np.full(len(clone_idx), -1))
    if len(split_idx):
        parent = np.repeat(split_idx, 2)
        child = cloud.subset(parent)
        s = child.scales
        R = quat_to_rotmat(child.rotations)
        offset = np.einsum("nij,nj->ni", R, s * state.rng.standard_normal(s.shape))
        child.positions = child.positions + offset
        child.log_scales = np.log(s / config.split_factor)
        parts.append(child)
        index.append(np.full(len(parent), -1))
    new_cloud = parts[0]
    for p in parts[1:]:
        new_cloud = new_cloud.concat(p)
    index = np.concatenate(index)

    drop = np.zeros(len(new_cloud), dtype=bool)
    drop[split_idx] = True
    transparent = new_cloud.opacities < config.prune_opacity
    if np.all(drop | transparent):
        log.warning("pruning would empty the cloud at iteration %d; prune skipped", iteration)
        transparent[:] = False
    keep = ~(drop | transparent)
    new_cloud = new_cloud.subset(keep)
    state.select(index[keep])
    log.debug("iteration %d: cloned %d, split %d, pruned %d -> %d Gaussians", iteration, len(clone_idx),
              len(split_idx), int(np.sum(transparent & ~drop)), len(new_cloud))
    return new_cloud, state
