"""Noise schedules, deterministic DDIM inversion and denoisers."""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._validation import PropagationError, ValidationError, as_float_array


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal levels ``alphabar[0..T]`` with ``alphabar[0] = 1``."""

    alphabar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alphabar, dtype=np.float64)
        if ab.ndim != 1 or len(ab) < 3:
            raise ValidationError("alphabar must hold at least 3 entries (T >= 2)")
        if ab[0] != 1.0:
            raise ValidationError("alphabar[0] must equal 1")
        if np.any(ab <= 0) or np.any(ab > 1) or np.any(np.diff(ab) >= 0):
            raise ValidationError("alphabar must be strictly decreasing within (0, 1]")
        ab.setflags(write=False)
        object.__setattr__(self, "alphabar", ab)

    @property
    def T(self):
        return len(self.alphabar) - 1

    @property
    def betas(self):
        return 1.0 - self.alphabar[1:] / self.alphabar[:-1]

    def __getitem__(self, t):
        return self.alphabar[t]


def make_schedule(T=1000, beta_start=1e-4, beta_end=0.02):
    """Linear-beta schedule."""
    if int(T) != T or T < 2:
        raise ValidationError(f"T must be an integer >= 2, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ValidationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, int(T))
    return NoiseSchedule(np.concatenate([[1.0], np.cumprod(1.0 - betas)]))


class Denoiser:
    """Noise predictor ``predict(x_t, t, condition) -> eps_hat`` (same shape as ``x_t``).

    Subclasses that cannot serve concurrent calls set ``single_flight = True``;
    calls made through ``__call__`` are then serialized.
    """

    single_flight = False

    def __init__(self):
        self._lock = threading.Lock()

    def predict(self, x_t, t, condition=None):
        raise NotImplementedError

    def __call__(self, x_t, t, condition=None):
        if self.single_flight:
            with self._lock:
                return self.predict(x_t, t, condition)
        return self.predict(x_t, t, condition)


class ZeroDenoiser(Denoiser):
    def predict(self, x_t, t, condition=None):
        return np.zeros_like(x_t)


class ConstantDenoiser(Denoiser):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def predict(self, x_t, t, condition=None):
        return np.broadcast_to(np.asarray(self.value, dtype=np.float64), np.shape(x_t)).copy()


class AnalyticGaussianDenoiser(Denoiser):
    """Exact noise predictor for clean data distributed as Normal(data_mean, data_var).

    The condition image is accepted for interface compatibility and ignored.
    Frames are independent, so a frame batch is handled elementwise.
    """

    def __init__(self, data_mean, data_var, schedule):
        super().__init__()
        self.data_mean = np.asarray(data_mean, dtype=np.float64)
        self.data_var = np.asarray(data_var, dtype=np.float64)
        if np.any(self.data_var < 0):
            raise ValidationError("data_var must be non-negative")
        self.schedule = schedule

    def predict(self, x_t, t, condition=None):
        return predict_analytic(x_t, t, self, self.schedule)


def predict_analytic(x_t, t, denoiser, schedule):
    """Posterior-mean noise estimate E[eps | x_t] for Gaussian clean data.

    At t = 0 (alphabar = 1) the input is the clean sample itself and the
    estimate is zero.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    m = np.broadcast_to(denoiser.data_mean, x_t.shape)
    s2 = denoiser.data_var
    if not (0 <= t <= schedule.T):
        raise ValidationError(f"timestep {t} outside [0, {schedule.T}]")
    ab = schedule[t]
    if ab == 1.0:
        return np.zeros_like(x_t)
    sab = np.sqrt(ab)
    x0_mean = (sab * s2 * x_t + (1.0 - ab) * m) / (ab * s2 + (1.0 - ab))
    return (x_t - sab * x0_mean) / np.sqrt(1.0 - ab)


def _eps(denoiser, x, t, condition):
    eps = np.asarray(denoiser(x, t, condition), dtype=np.float64)
    if eps.shape != np.shape(x):
        raise ValidationError(f"denoiser returned shape {eps.shape} for input {np.shape(x)}")
    if not np.all(np.isfinite(eps)):
        raise PropagationError(f"denoiser produced non-finite output at timestep {t}")
    return eps


def predict_x0(x_t, eps, t, schedule):
    """Clean-image estimate from a noisy state and its noise prediction."""
    ab = schedule[t]
    return x_t / np.sqrt(ab) - np.sqrt(1.0 - ab) * eps / np.sqrt(ab)


def ddim_invert_step(x_prev, t_prev, denoiser, schedule, condition=None, t_next=None):
    """One deterministic inversion step from ``t_prev`` to ``t_next`` (default ``t_prev + 1``)."""
    x_prev = as_float_array(x_prev, name="x_prev")
    t_next = t_prev + 1 if t_next is None else t_next
    if not (0 <= t_prev < t_next <= schedule.T):
        raise ValidationError(f"need 0 <= t_prev < t_next <= T, got {t_prev}, {t_next}")
    eps = _eps(denoiser, x_prev, t_prev, condition)
    x0_hat = predict_x0(x_prev, eps, t_prev, schedule)
    ab = schedule[t_next]
    sab = np.sqrt(ab)
    return sab * (x0_hat + np.sqrt(1.0 - ab) / sab * eps)


def ddim_forward_step(x_t, t, t_prev, denoiser, schedule, condition=None, implicit=True,
                      tol=1e-14, max_iter=500):
    """Deterministic DDIM step from ``t`` back to ``t_prev``.

    With ``implicit=True`` the inversion relation is solved exactly for the
    earlier state by fixed-point iteration (noise evaluated at the earlier
    state), making this the inverse of :func:`ddim_invert_step`. With
    ``implicit=False`` it is the usual sampling step using the noise at ``t``.
    """
    x_t = as_float_array(x_t, name="x_t")
    if not (0 <= t_prev < t <= schedule.T):
        raise ValidationError(f"need 0 <= t_prev < t <= T, got {t_prev}, {t}")
    ab_t, ab_p = schedule[t], schedule[t_prev]
    eps = _eps(denoiser, x_t, t, condition)
    x = np.sqrt(ab_p) * predict_x0(x_t, eps, t, schedule) + np.sqrt(1.0 - ab_p) * eps
    if not implicit:
        return x
    ratio = np.sqrt(ab_p) / np.sqrt(ab_t)
    for _ in range(max_iter):
        eps = _eps(denoiser, x, t_prev, condition)
        x_new = ratio * (x_t - np.sqrt(1.0 - ab_t) * eps) + np.sqrt(1.0 - ab_p) * eps
        delta = np.max(np.abs(x_new - x))
        x = x_new
        if delta <= tol * max(1.0, np.max(np.abs(x))):
            break
    return x


def inversion_timesteps(t_end, stride, start=0):
    """Strided timesteps from ``start`` to ``t_end`` inclusive, landing exactly on ``t_end``."""
    steps = list(range(start, t_end, max(1, int(stride))))
    return steps + [t_end]


class Inversion(NamedTuple):
    x_t: np.ndarray
    x_t_minus_tau: np.ndarray
    timesteps: list
    states: list


def ddim_invert(x0, t, tau, denoiser, schedule, condition=None, stride=25, return_trajectory=False):
    """Invert ``x0`` up to ``t``, returning the states at ``t`` and ``t - tau``.

    Both states come from the same deterministic pass, which is forced to
    visit ``t - tau`` exactly.
    """
    if not (0 < tau < t <= schedule.T):
        raise ValidationError(f"need 0 < tau < t <= T, got t={t}, tau={tau}")
    x = as_float_array(x0, name="x0")
    steps = inversion_timesteps(t - tau, stride) + inversion_timesteps(t, stride, t - tau)[1:]
    states = [x]
    for a, b in zip(steps[:-1], steps[1:]):
        x = ddim_invert_step(x, a, denoiser, schedule, condition, t_next=b)
        states.append(x)
    mid = steps.index(t - tau)
    if return_trajectory:
        return Inversion(states[-1], states[mid], steps, states)
    return states[-1], states[mid]
