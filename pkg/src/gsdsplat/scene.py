"""Explicit Gaussian scene representation, cameras and camera trajectories."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import SingularityError, ValidationError, as_float_array

# Real SH normalization constants for bands 0 and 1.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

SH_OFFSET = 0.5
QUAT_TOL = 1e-6


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_rotmat(q):
    """Rotation matrix of a (w, x, y, z) quaternion; batched over leading axes.

    The quaternion is used as given, so callers normalize first.
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R):
    """Unit quaternion (w >= 0) of a single 3x3 rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        S = math.sqrt(tr + 1.0) * 2
        q = [0.25 * S, (R[2, 1] - R[1, 2]) / S, (R[0, 2] - R[2, 0]) / S, (R[1, 0] - R[0, 1]) / S]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        S = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / S, 0.25 * S, (R[0, 1] + R[1, 0]) / S, (R[0, 2] + R[2, 0]) / S]
    elif R[1, 1] > R[2, 2]:
        S = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / S, (R[0, 1] + R[1, 0]) / S, 0.25 * S, (R[1, 2] + R[2, 1]) / S]
    else:
        S = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / S, (R[0, 2] + R[2, 0]) / S, (R[1, 2] + R[2, 1]) / S, 0.25 * S]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def random_unit_quaternions(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


# --------------------------------------------------------------------------- types


@dataclass
class GaussianCloud:
    """Learnable Gaussian scene.

    Scales are held as logs and opacities as logits so unconstrained updates
    keep them valid; ``scales`` and ``opacities`` give the activated values.
    """

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    degree: int = 1

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        self.rotations = np.array(self.rotations, dtype=np.float64).reshape(-1, 4)
        self.log_scales = np.array(self.log_scales, dtype=np.float64).reshape(-1, 3)
        self.opacity_logits = np.array(self.opacity_logits, dtype=np.float64).reshape(-1)
        if self.degree not in (1, 2):
            raise ValidationError(f"SH degree must be 1 or 2, got {self.degree}")
        n_sh = self.degree ** 2
        self.sh_coeffs = np.array(self.sh_coeffs, dtype=np.float64).reshape(-1, n_sh, 3)
        n = len(self.positions)
        for name in ("rotations", "log_scales", "opacity_logits", "sh_coeffs"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"{name} has {len(getattr(self, name))} entries, expected {n}")

    @classmethod
    def from_activated(cls, positions, rotations, scales, opacities, sh_coeffs, degree=1):
        scales = np.asarray(scales, dtype=np.float64)
        if np.any(scales <= 0):
            raise ValidationError("scales must be strictly positive")
        return cls(positions, rotations, np.log(scales), logit(opacities), sh_coeffs, degree)

    def __len__(self):
        return len(self.positions)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def n_sh(self):
        return self.degree ** 2

    def copy(self):
        return GaussianCloud(self.positions.copy(), self.rotations.copy(), self.log_scales.copy(),
                             self.opacity_logits.copy(), self.sh_coeffs.copy(), self.degree)

    def subset(self, index):
        return GaussianCloud(self.positions[index], self.rotations[index], self.log_scales[index],
                             self.opacity_logits[index], self.sh_coeffs[index], self.degree)

    def concat(self, other):
        if other.degree != self.degree:
            raise ValidationError("cannot concatenate clouds of different SH degree")
        return GaussianCloud(
            np.concatenate([self.positions, other.positions]),
            np.concatenate([self.rotations, other.rotations]),
            np.concatenate([self.log_scales, other.log_scales]),
            np.concatenate([self.opacity_logits, other.opacity_logits]),
            np.concatenate([self.sh_coeffs, other.sh_coeffs]),
            self.degree,
        )

    def normalize_rotations(self):
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        self.rotations = self.rotations / np.where(norms > 0, norms, 1.0)

    def check(self):
        """Raise if any structural invariant is violated."""
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(norms - 1) > QUAT_TOL):
            raise ValidationError("rotations are not unit quaternions")
        if not all(np.all(np.isfinite(getattr(self, f))) for f in PARAM_FAMILIES):
            raise ValidationError("cloud contains non-finite parameters")


PARAM_FAMILIES = ("positions", "rotations", "log_scales", "opacity_logits", "sh_coeffs")


@dataclass
class Camera:
    """Pinhole camera; ``R``/``T`` map world points into the camera frame."""

    K: np.ndarray
    R: np.ndarray
    T: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.K = as_float_array(self.K, (3, 3), "K")
        self.R = as_float_array(self.R, (3, 3), "R")
        self.T = as_float_array(self.T, (3,), "T")
        if int(self.width) != self.width or int(self.height) != self.height or self.width < 1 or self.height < 1:
            raise ValidationError(f"invalid resolution {self.width}x{self.height}")
        self.width, self.height = int(self.width), int(self.height)
        if np.max(np.abs(self.R.T @ self.R - np.eye(3))) > 1e-9 or abs(np.linalg.det(self.R) - 1) > 1e-9:
            raise ValidationError("R must be a proper rotation (R^T R = I, det R = 1)")
        if self.K[1, 0] != 0 or self.K[2, 0] != 0 or self.K[2, 1] != 0 or self.K[2, 2] != 1:
            raise ValidationError("K must be upper-triangular with K[2, 2] = 1")
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValidationError("focal lengths must be positive")

    @classmethod
    def from_intrinsics(cls, fx, fy, cx, cy, width, height, R=None, T=None):
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(K, np.eye(3) if R is None else R, np.zeros(3) if T is None else T, width, height)

    @classmethod
    def look_at(cls, center, target, up, fx, fy, cx, cy, width, height):
        """Camera at ``center`` looking at ``target`` (+z forward, +y down in image)."""
        center = np.asarray(center, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - center
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        return cls.from_intrinsics(fx, fy, cx, cy, width, height, R, -R @ center)

    @property
    def center(self):
        return -self.R.T @ self.T

    @property
    def fx(self):
        return self.K[0, 0]

    @property
    def fy(self):
        return self.K[1, 1]

    @property
    def cx(self):
        return self.K[0, 2]

    @property
    def cy(self):
        return self.K[1, 2]

    def same_intrinsics(self, other):
        return (np.array_equal(self.K, other.K) and self.width == other.width
                and self.height == other.height)


@dataclass
class Trajectory:
    poses: list
    anchor_s: int
    params: np.ndarray = field(default=None)

    @property
    def n(self):
        return len(self.poses)

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i):
        return self.poses[i]


# ---------------------------------------------------------------------- operations


def covariance_from_rs(rotation, scale):
    """Covariance R S S^T R^T from a unit quaternion and positive per-axis scale."""
    q = as_float_array(rotation, (4,), "rotation")
    s = as_float_array(scale, (3,), "scale")
    if abs(np.linalg.norm(q) - 1.0) > QUAT_TOL:
        raise ValidationError(f"quaternion norm {np.linalg.norm(q)} is not 1")
    if np.any(s <= 0):
        raise ValidationError(f"scale must be positive, got {s}")
    M = quat_to_rotmat(q) * s[None, :]
    return M @ M.T


def covariances(cloud):
    """Batched covariances of every Gaussian in ``cloud`` (rotations normalized)."""
    q = cloud.rotations / np.linalg.norm(cloud.rotations, axis=1, keepdims=True)
    M = quat_to_rotmat(q) * cloud.scales[:, None, :]
    return M @ np.swapaxes(M, 1, 2)


def gaussian_density(p, mu, cov, index=None):
    """Normalized trivariate Gaussian density at ``p``."""
    p = as_float_array(p, (3,), "p")
    mu = as_float_array(mu, (3,), "mu")
    cov = as_float_array(cov, (3, 3), "cov")
    cond = np.linalg.cond(cov)
    if not np.isfinite(cond) or cond >= 1e12:
        who = "" if index is None else f" (Gaussian {index})"
        raise SingularityError(f"covariance is near-singular{who}: condition number {cond:.3g}")
    d = p - mu
    maha = d @ np.linalg.solve(cov, d)
    return (2 * np.pi) ** -1.5 * np.linalg.det(cov) ** -0.5 * np.exp(-0.5 * maha)


def sh_basis(dirs, degree):
    """Real SH basis values for unit directions ``dirs`` (..., 3) -> (..., degree**2)."""
    dirs = np.asarray(dirs, dtype=np.float64)
    out = np.empty(dirs.shape[:-1] + (degree ** 2,))
    out[..., 0] = SH_C0
    if degree >= 2:
        x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    return out


def eval_sh(coeffs, view_dir, degree):
    """View-dependent RGB of one Gaussian: offset SH sum clamped at zero."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if degree not in (1, 2):
        raise ValidationError(f"degree must be 1 or 2, got {degree}")
    if coeffs.shape != (degree ** 2, 3):
        raise ValidationError(f"expected {degree ** 2} SH coefficients of shape 3, got {coeffs.shape}")
    d = as_float_array(view_dir, (3,), "view_dir")
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValidationError("view_dir must be unit length")
    return np.maximum(sh_basis(d, degree) @ coeffs + SH_OFFSET, 0.0)


def interpolate_trajectory(cam_j, cam_k, n, s):
    """Camera path through ``cam_j`` (frame 1) and ``cam_k`` (frame ``s``).

    Frame i sits at u = (i - 1) / (s - 1); rotations follow the shortest-arc
    slerp, camera centers move linearly, and frames past ``s`` extrapolate the
    same path up to u = 2.
    """
    if int(n) != n or n < 2:
        raise ValidationError(f"frame count n must be >= 2, got {n}")
    if int(s) != s or s < 2 or s > n:
        raise ValidationError(f"anchor index s must satisfy 2 <= s <= n, got s={s}, n={n}")
    if not cam_j.same_intrinsics(cam_k):
        raise ValidationError("trajectory endpoints must share intrinsics and resolution")
    n, s = int(n), int(s)
    qj = rotmat_to_quat(cam_j.R)
    qk = rotmat_to_quat(cam_k.R)
    if np.dot(qj, qk) < 0:
        qk = -qk
    q_rel = quat_mul(qk, qj * np.array([1, -1, -1, -1]))
    if q_rel[0] < 0:
        q_rel = -q_rel
    half = math.atan2(np.linalg.norm(q_rel[1:]), q_rel[0])
    axis_norm = np.linalg.norm(q_rel[1:])
    axis = q_rel[1:] / axis_norm if axis_norm > 0 else np.zeros(3)
    cj, ck = cam_j.center, cam_k.center

    params = np.minimum(np.arange(n) / (s - 1), 2.0)
    poses = []
    for i, u in enumerate(params):
        if i == 0:
            poses.append(cam_j)
            continue
        if i == s - 1:
            poses.append(cam_k)
            continue
        qu = np.concatenate([[math.cos(u * half)], math.sin(u * half) * axis])
        R = quat_to_rotmat(quat_mul(qu, qj))
        c = cj + u * (ck - cj)
        poses.append(Camera(cam_j.K.copy(), R, -R @ c, cam_j.width, cam_j.height))
    return Trajectory(poses, s, params)


def rotation_angle_between(Ra, Rb):
    """Angle (radians) of the relative rotation Rb Ra^T."""
    c = (np.trace(Rb @ Ra.T) - 1) / 2
    return math.acos(min(1.0, max(-1.0, c)))
