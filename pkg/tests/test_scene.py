import math

import numpy as np
import pytest

from gsdsplat._validation import SingularityError, ValidationError
from gsdsplat.scene import (
    SH_C0,
    Camera,
    GaussianCloud,
    covariance_from_rs,
    covariances,
    eval_sh,
    gaussian_density,
    interpolate_trajectory,
    quat_to_rotmat,
    random_unit_quaternions,
    rotation_angle_between,
    rotmat_to_quat,
)

from conftest import make_camera


def _rot_y(deg):
    a = math.radians(deg)
    return np.array([[math.cos(a), 0, math.sin(a)], [0, 1, 0], [-math.sin(a), 0, math.cos(a)]])


class TestCovariance:
    def test_identity(self):
        np.testing.assert_array_equal(covariance_from_rs([1, 0, 0, 0], [1, 1, 1]), np.eye(3))

    def test_axis_scale(self):
        np.testing.assert_array_equal(covariance_from_rs([1, 0, 0, 0], [2, 1, 1]), np.diag([4.0, 1, 1]))

    def test_matches_explicit_product(self, rng):
        for q in random_unit_quaternions(rng, 10):
            w, x, y, z = q
            # rotation matrix written out independently of quat_to_rotmat
            R = np.array([
                [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
            ])
            expected = R @ np.diag([1.0, 4.0, 9.0]) @ R.T
            assert np.max(np.abs(covariance_from_rs(q, [1, 2, 3]) - expected)) < 1e-12

    def test_eigenvalues_are_squared_scales(self, rng):
        q = random_unit_quaternions(rng, 1)[0]
        ev = np.sort(np.linalg.eigvalsh(covariance_from_rs(q, [0.5, 2.0, 1.5])))
        np.testing.assert_allclose(ev, [0.25, 2.25, 4.0], rtol=1e-12)

    def test_rejects_non_unit_quaternion(self):
        with pytest.raises(ValidationError):
            covariance_from_rs([1, 0.1, 0, 0], [1, 1, 1])

    def test_rejects_non_positive_scale(self):
        with pytest.raises(ValidationError):
            covariance_from_rs([1, 0, 0, 0], [1, 0, 1])

    def test_batched_matches_single(self, rng):
        q = random_unit_quaternions(rng, 5)
        s = rng.uniform(0.1, 2, (5, 3))
        cloud = GaussianCloud.from_activated(np.zeros((5, 3)), q, s, np.full(5, 0.5), np.zeros((5, 1, 3)))
        for i, C in enumerate(covariances(cloud)):
            np.testing.assert_allclose(C, covariance_from_rs(q[i], s[i]), atol=1e-14)


class TestDensity:
    def test_peak(self):
        assert gaussian_density([0, 0, 0], [0, 0, 0], np.eye(3)) == pytest.approx((2 * np.pi) ** -1.5, rel=1e-14)
        assert gaussian_density([0, 0, 0], [0, 0, 0], np.eye(3)) == pytest.approx(0.0634936, abs=1e-7)

    def test_unit_mahalanobis(self):
        assert gaussian_density([1, 0, 0], [0, 0, 0], np.eye(3)) == pytest.approx(0.0385108, abs=1e-7)

    def test_matches_explicit_inverse(self, rng):
        for _ in range(10):
            q = random_unit_quaternions(rng, 1)[0]
            S = covariance_from_rs(q, rng.uniform(0.3, 2, 3))
            mu, p = rng.normal(size=3), rng.normal(size=3)
            # adjugate inverse and cofactor determinant, written out by hand
            a, b, c = S[0]
            d, e, f = S[1]
            g, h, i = S[2]
            det = a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)
            adj = np.array([[e * i - f * h, c * h - b * i, b * f - c * e],
                            [f * g - d * i, a * i - c * g, c * d - a * f],
                            [d * h - e * g, b * g - a * h, a * e - b * d]])
            r = p - mu
            expected = (2 * np.pi) ** -1.5 / math.sqrt(det) * math.exp(-0.5 * r @ (adj / det) @ r)
            assert gaussian_density(p, mu, S) == pytest.approx(expected, rel=1e-12)

    def test_singular_names_gaussian(self):
        with pytest.raises(SingularityError, match="Gaussian 7"):
            gaussian_density([0, 0, 0], [0, 0, 0], np.diag([1.0, 1.0, 1e-14]), index=7)

    def test_integrates_to_one(self, rng):
        S = covariance_from_rs(random_unit_quaternions(rng, 1)[0], [0.5, 1.0, 1.5])
        half = 6 * np.sqrt(np.max(np.diag(S)))
        from scipy.stats import qmc

        pts = (qmc.Sobol(3, seed=5).random_base2(18) * 2 - 1) * half
        inv = np.linalg.inv(S)
        vals = (2 * np.pi) ** -1.5 / np.sqrt(np.linalg.det(S)) * np.exp(-0.5 * np.einsum("ni,ij,nj->n", pts, inv, pts))
        assert np.mean(vals) * (2 * half) ** 3 == pytest.approx(1.0, rel=0.02)
        # spot-check that the library agrees with the vectorized evaluation
        assert gaussian_density(pts[0], np.zeros(3), S) == pytest.approx(vals[0], rel=1e-12)


class TestSH:
    def test_constant_band(self):
        out = eval_sh(np.ones((1, 3)), [0.0, 0.0, 1.0], 1)
        y00 = 1.0 / (2.0 * math.sqrt(math.pi))
        np.testing.assert_allclose(out, y00 + 0.5, rtol=1e-15)
        assert SH_C0 == pytest.approx(y00, rel=1e-15)

    def test_zero_coefficients(self):
        np.testing.assert_array_equal(eval_sh(np.zeros((4, 3)), [1.0, 0, 0], 2), [0.5, 0.5, 0.5])

    def test_band1_parity(self):
        c = np.zeros((4, 3))
        c[1:] = [[0.1, 0.2, 0.05], [0.3, -0.1, 0.1], [0.05, 0.05, 0.2]]
        up = eval_sh(c, [0, 0, 1.0], 2) - 0.5
        down = eval_sh(c, [0, 0, -1.0], 2) - 0.5
        np.testing.assert_allclose(up, -down, atol=1e-15)

    def test_clamped_at_zero(self):
        assert np.all(eval_sh(np.full((1, 3), -10.0), [0, 0, 1.0], 1) == 0)

    def test_linear_before_clamp(self, rng):
        c = rng.normal(0, 0.1, (4, 3))
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        np.testing.assert_allclose(eval_sh(2.5 * c, d, 2) - 0.5, 2.5 * (eval_sh(c, d, 2) - 0.5), atol=1e-14)

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            eval_sh(np.zeros((3, 3)), [0, 0, 1.0], 2)


class TestCloudAndCamera:
    def test_list_lengths_checked(self):
        with pytest.raises(ValidationError):
            GaussianCloud(np.zeros((2, 3)), np.zeros((3, 4)), np.zeros((2, 3)), np.zeros(2), np.zeros((2, 1, 3)))

    def test_degree_checked(self):
        with pytest.raises(ValidationError):
            GaussianCloud(np.zeros((1, 3)), [[1, 0, 0, 0]], np.zeros((1, 3)), [0.0], np.zeros((1, 9, 3)), 3)

    def test_scales_from_logs(self, rng):
        s = rng.uniform(0.1, 1, (4, 3))
        c = GaussianCloud.from_activated(np.zeros((4, 3)), np.tile([1.0, 0, 0, 0], (4, 1)), s, np.full(4, 0.3),
                                         np.zeros((4, 1, 3)))
        np.testing.assert_allclose(c.scales, s, rtol=1e-15)
        np.testing.assert_allclose(c.opacities, 0.3, rtol=1e-14)

    def test_camera_rejects_reflection(self):
        with pytest.raises(ValidationError):
            make_camera(R=np.diag([1.0, 1.0, -1.0]))

    def test_camera_rejects_non_triangular_k(self):
        K = np.array([[10.0, 0, 5], [1.0, 10, 5], [0, 0, 1]])
        with pytest.raises(ValidationError):
            Camera(K, np.eye(3), np.zeros(3), 10, 10)

    def test_quaternion_round_trip(self, rng):
        for q in random_unit_quaternions(rng, 20):
            q = q if q[0] >= 0 else -q
            np.testing.assert_allclose(rotmat_to_quat(quat_to_rotmat(q)), q, atol=1e-12)


class TestTrajectory:
    def _pair(self, deg=20.0, shift=(1.0, 0.0, 0.0)):
        a = make_camera(R=np.eye(3), T=np.array([0.0, 0.0, 3.0]))
        R = _rot_y(deg)
        c = np.asarray(shift, dtype=float)
        b = make_camera(R=R, T=-R @ c)
        return a, b

    def test_endpoints_only(self):
        a, b = self._pair()
        tr = interpolate_trajectory(a, b, 2, 2)
        assert tr.poses[0] is a and tr.poses[1] is b

    def test_pure_translation_midpoint(self):
        a = make_camera(T=np.array([0.0, 0.0, 3.0]))
        b = make_camera(T=np.array([1.0, -2.0, 3.0]))
        mid = interpolate_trajectory(a, b, 3, 3)[1]
        np.testing.assert_allclose(mid.center, (a.center + b.center) / 2, atol=1e-14)
        np.testing.assert_allclose(mid.R, np.eye(3), atol=1e-14)

    def test_extrapolated_angles(self):
        a, b = self._pair(20.0)
        tr = interpolate_trajectory(a, b, 5, 3)
        np.testing.assert_allclose(tr.params, [0, 0.5, 1.0, 1.5, 2.0])
        angles = [math.degrees(rotation_angle_between(a.R, p.R)) for p in tr.poses[1:]]
        np.testing.assert_allclose(angles, [10, 20, 30, 40], atol=1e-6)

    def test_anchor_exact(self):
        a, b = self._pair(35.0)
        tr = interpolate_trajectory(a, b, 6, 4)
        assert np.array_equal(tr[0].R, a.R) and np.array_equal(tr[0].T, a.T)
        assert np.array_equal(tr[3].R, b.R) and np.array_equal(tr[3].T, b.T)

    def test_extrapolation_capped(self):
        a, b = self._pair()
        tr = interpolate_trajectory(a, b, 8, 2)
        assert tr.params.max() == 2.0

    def test_antipodal_sign(self):
        a, b = self._pair(170.0)
        mid = interpolate_trajectory(a, b, 3, 3)[1]
        assert math.degrees(rotation_angle_between(a.R, mid.R)) == pytest.approx(85.0, abs=1e-6)

    @pytest.mark.parametrize("n,s", [(4, 5), (4, 1), (1, 1)])
    def test_bad_anchor(self, n, s):
        a, b = self._pair()
        with pytest.raises(ValidationError):
            interpolate_trajectory(a, b, n, s)

    def test_intrinsics_must_match(self):
        a = make_camera(32)
        b = make_camera(16)
        with pytest.raises(ValidationError):
            interpolate_trajectory(a, b, 3, 2)
