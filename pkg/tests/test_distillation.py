import math

import numpy as np
import pytest

from gsdsplat._validation import ValidationError
from gsdsplat.diffusion import (
    AnalyticGaussianDenoiser,
    ConstantDenoiser,
    Denoiser,
    ddim_invert_step,
    make_schedule,
    predict_analytic,
)
from gsdsplat.distillation import (
    DistillationConfig,
    gsd_gradient,
    omega_fn,
    schedule_gate,
    sds_ddim_gradient,
    sds_gradient,
    total_loss,
)
from gsdsplat.guidance import FeatureExtractor, GuidanceContext, GuidanceSpec, gamma
from gsdsplat.metrics import ssim
from gsdsplat.optim import OptimizerState, adam_step
from gsdsplat.rasterizer import CloudGradients, render, render_backward
from gsdsplat.scene import SH_C0, GaussianCloud, interpolate_trajectory

from conftest import make_camera


@pytest.fixture(scope="module")
def sched():
    return make_schedule()


def _traj(n=2, s=2, res=16):
    a = make_camera(res)
    b = make_camera(res, T=np.array([0.3, 0.0, 0.0]))
    return interpolate_trajectory(a, b, n, s)


class _Echo(Denoiser):
    """Returns whatever noise was last injected."""

    def __init__(self, noise):
        super().__init__()
        self.noise = noise

    def predict(self, x_t, t, condition=None):
        return self.noise.copy()


class TestSDS:
    def test_perfect_denoiser(self, sched, rng):
        noise = rng.normal(size=(4, 4, 3))
        g = sds_gradient(rng.uniform(size=noise.shape), _Echo(noise), sched, 300, noise)
        assert not g.any()

    def test_on_distribution_zero(self, sched, rng):
        m = rng.uniform(size=(4, 4, 3))
        g = sds_gradient(m, AnalyticGaussianDenoiser(m, 0.0, sched), sched, 300, rng.normal(size=m.shape))
        np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_closed_form(self, sched, rng):
        m, x = rng.uniform(size=(2, 4, 4, 3))
        t = 420
        ab = sched[t]
        g = sds_gradient(x, AnalyticGaussianDenoiser(m, 0.0, sched), sched, t, rng.normal(size=x.shape))
        expected = (1 - ab) * math.sqrt(ab) * (x - m) / math.sqrt(1 - ab)
        np.testing.assert_allclose(g, expected, atol=1e-10)

    def test_shape_checked(self, sched):
        with pytest.raises(ValidationError):
            sds_gradient(np.zeros(3), ConstantDenoiser(0.0), sched, 10, np.zeros(4))


class TestSDSDDIM:
    def test_constant_denoiser_zero(self, sched, rng):
        g = sds_ddim_gradient(rng.uniform(size=(4, 4, 3)), ConstantDenoiser(0.37), sched, 500, 100)
        assert np.array_equal(g, np.zeros((4, 4, 3)))

    def test_fixed_point(self, sched, rng):
        m = rng.uniform(size=(4, 4, 3))
        g = sds_ddim_gradient(m, AnalyticGaussianDenoiser(m, 0.0, sched), sched, 500, 100)
        np.testing.assert_allclose(g, 0.0, atol=1e-12)

    def test_composition_oracle(self, sched, rng):
        m, x = rng.uniform(size=(2, 5, 5, 3))
        den = AnalyticGaussianDenoiser(m, 0.05, sched)
        t, tau, stride = 430, 100, 25
        steps = list(range(0, t - tau, stride)) + [t - tau] + list(range(t - tau + stride, t, stride)) + [t]
        state, at = x, {0: x}
        for a, b in zip(steps[:-1], steps[1:]):
            state = ddim_invert_step(state, a, den, sched, t_next=b)
            at[b] = state
        expected = (1 - sched[t]) * (predict_analytic(at[t], t, den, sched)
                                     - predict_analytic(at[t - tau], t - tau, den, sched))
        g = sds_ddim_gradient(x, den, sched, t, tau, stride=stride)
        np.testing.assert_allclose(g, expected, atol=1e-10)

    def test_omega_scaling_exact(self, sched, rng):
        m, x = rng.uniform(size=(2, 4, 4, 3))
        den = AnalyticGaussianDenoiser(m, 0.05, sched)
        base = omega_fn("1-alphabar", sched)
        double = lambda t: 2.0 * base(t)  # noqa: E731
        noise = rng.normal(size=x.shape)
        assert np.array_equal(sds_ddim_gradient(x, den, sched, 400, 50, omega=double),
                              2.0 * sds_ddim_gradient(x, den, sched, 400, 50))
        assert np.array_equal(sds_gradient(x, den, sched, 400, noise, omega=double),
                              2.0 * sds_gradient(x, den, sched, 400, noise))

    def test_unknown_omega(self, sched):
        with pytest.raises(ValidationError):
            omega_fn("cosine", sched)


class TestGSD:
    def _setup(self, sched, rng, n=2):
        frames = rng.uniform(size=(n, 16, 16, 3))
        m = rng.uniform(size=frames.shape)
        return frames, AnalyticGaussianDenoiser(m, 0.05, sched), _traj(n, 2)

    def test_empty_spec_bitwise(self, sched, rng):
        frames, den, traj = self._setup(sched, rng, 3)
        traj = _traj(3, 2)
        g = gsd_gradient(frames, traj, den, sched, GuidanceSpec(), 450, 100, None, None)
        assert np.array_equal(g.rgb, sds_ddim_gradient(frames, den, sched, 450, 100))
        for i in range(3):
            per = AnalyticGaussianDenoiser(den.data_mean[i], 0.05, sched)
            assert np.array_equal(g.rgb[i], sds_ddim_gradient(frames[i], per, sched, 450, 100))

    def test_equal_corrections_cancel(self, sched, rng):
        frames, den, traj = self._setup(sched, rng)
        y_k = np.full((16, 16, 3), -10.0)  # every pixel above the reference: constant subgradient
        spec = GuidanceSpec.from_weights(rho=lambda t: 1.0 / gamma(t, sched), pixel=1.0)
        g = gsd_gradient(frames, traj, den, sched, spec, 450, 100, None, y_k)
        assert g.used == ("pixel",)
        np.testing.assert_allclose(g.rgb, sds_ddim_gradient(frames, den, sched, 450, 100), atol=1e-14)

    def test_end_to_end_oracle(self, sched, rng):
        frames, den, traj = self._setup(sched, rng)
        y_j, y_k = rng.uniform(size=(2, 16, 16, 3))
        t, tau, stride, rho = 330, 60, 25, 0.4
        spec = GuidanceSpec.from_weights(rho=rho, pixel=1.0)
        g = gsd_gradient(frames, traj, den, sched, spec, t, tau, y_j, y_k, stride=stride)

        steps = list(range(0, t - tau, stride)) + [t - tau] + list(range(t - tau + stride, t, stride)) + [t]
        state, at = frames, {}
        for a, b in zip(steps[:-1], steps[1:]):
            state = ddim_invert_step(state, a, den, sched, t_next=b)
            at[b] = state

        def corrected(tt):
            x = at[tt]
            eps = predict_analytic(x, tt, den, sched)
            lam = math.sqrt(sched[tt]) / math.sqrt(1 - sched[tt]) * rho
            out = eps.copy()
            out[1] -= lam * np.sign(x[1] - y_k) / y_k.size
            return out

        expected = (1 - sched[t]) * (corrected(t) - corrected(t - tau))
        np.testing.assert_allclose(g.rgb, expected, atol=1e-9)

    def test_guidance_failure_falls_back(self, sched, rng):
        frames, den, traj = self._setup(sched, rng)

        class Broken(FeatureExtractor):
            def extract(self, image):
                raise RuntimeError("extractor unavailable")

        spec = GuidanceSpec.from_weights(feature=1.0)
        ctx = GuidanceContext(anchor_index=1, extractor=Broken())
        g = gsd_gradient(frames, traj, den, sched, spec, 450, 100, None, frames[1], context=ctx)
        assert g.fallback and np.array_equal(g.rgb, sds_ddim_gradient(frames, den, sched, 450, 100))

    def test_fixed_point_all_estimators(self, sched, rng):
        m = rng.uniform(size=(2, 16, 16, 3))
        den = AnalyticGaussianDenoiser(m, 0.0, sched)
        g = gsd_gradient(m, _traj(), den, sched, GuidanceSpec(), 450, 100, None, m[1])
        np.testing.assert_allclose(g.rgb, 0.0, atol=1e-10)
        np.testing.assert_allclose(sds_ddim_gradient(m, den, sched, 450, 100), 0.0, atol=1e-10)
        np.testing.assert_allclose(sds_gradient(m, den, sched, 450, rng.normal(size=m.shape)), 0.0, atol=1e-10)

    def test_frame_count_checked(self, sched, rng):
        frames, den, _ = self._setup(sched, rng)
        with pytest.raises(ValidationError):
            gsd_gradient(frames, _traj(3, 2), den, sched, GuidanceSpec(), 450, 100, None, None)


class TestTotalLoss:
    def test_identical(self, rng):
        img = rng.uniform(size=(16, 16, 3))
        res = total_loss(img, img)
        assert res.l1 == 0 and res.total == pytest.approx(0.0, abs=1e-12)

    def test_offset(self, rng):
        gt = rng.uniform(0, 0.8, (16, 16, 3))
        res = total_loss(gt + 0.1, gt)
        assert 0.8 * res.l1 == pytest.approx(0.08, abs=1e-12)
        assert res.ssim == pytest.approx(ssim(gt + 0.1, gt), rel=1e-15)
        assert res.rgb == pytest.approx(0.08 + 0.2 * (1 - res.ssim), abs=1e-12)

    def test_zero_depth_weight(self, rng):
        a, b = rng.uniform(size=(2, 16, 16, 3))
        assert total_loss(a, b, 5.0, lambda_depth=0.0).total == total_loss(a, b, 0.0, lambda_depth=0.0).total

    def test_depth_weight(self, rng):
        a, b = rng.uniform(size=(2, 16, 16, 3))
        r = total_loss(a, b, 2.0, lambda_depth=0.05, depth_adjoint=np.ones((16, 16)))
        assert r.total == pytest.approx(r.rgb + 0.1, rel=1e-15)
        assert np.all(r.dL_ddepth == 0.05)

    def test_rgb_adjoint_fd(self, rng):
        a, b = rng.uniform(size=(2, 16, 16, 3))
        r = total_loss(a, b)
        h = 1e-7
        for _ in range(10):
            idx = tuple(int(rng.integers(0, s)) for s in a.shape)
            p, m = a.copy(), a.copy()
            p[idx] += h
            m[idx] -= h
            fd = (total_loss(p, b).total - total_loss(m, b).total) / (2 * h)
            assert r.dL_drgb[idx] == pytest.approx(fd, rel=1e-4, abs=1e-9)

    def test_resolution_mismatch(self):
        with pytest.raises(ValidationError):
            total_loss(np.zeros((16, 16, 3)), np.zeros((15, 16, 3)))


class TestGate:
    def test_default_activation(self):
        assert not schedule_gate(0).gsd
        assert not schedule_gate(2999).gsd
        assert schedule_gate(3000).gsd

    def test_zero_activation(self):
        assert schedule_gate(0, 0).gsd

    def test_depth_flag(self):
        assert schedule_gate(0).depth and not schedule_gate(0, depth_sources=0).depth

    def test_negative(self):
        with pytest.raises(ValidationError):
            schedule_gate(-1)


class TestConfig:
    def test_defaults(self):
        c = DistillationConfig()
        assert (c.mode, c.activation_iteration, c.lambda_depth) == ("gsd", 3000, 0.05)

    @pytest.mark.parametrize("kw", [{"mode": "vsd"}, {"tau": 300}, {"anchor_s": 7}, {"activation_iteration": -1}])
    def test_invalid(self, kw):
        with pytest.raises(ValidationError):
            DistillationConfig(**kw)


def test_sds_descends_toward_data_mean(sched):
    cam = make_camera(16)
    target = np.array([0.7, 0.3, 0.2])
    sh = np.zeros((1, 1, 3))
    sh[0, 0] = (np.array([0.3, 0.6, 0.5]) - 0.5) / SH_C0
    cloud = GaussianCloud.from_activated([[0, 0, 3.0]], [[1.0, 0, 0, 0]], [[0.6] * 3], [0.9], sh)
    tgt_cloud = cloud.copy()
    tgt_cloud.sh_coeffs[0, 0] = (target - 0.5) / SH_C0
    m = render(tgt_cloud, cam).rgb
    den = AnalyticGaussianDenoiser(m, 0.0, sched)
    state = OptimizerState.for_cloud(cloud, {"positions": 0.0, "rotations": 0.0, "log_scales": 0.0,
                                             "opacity_logits": 0.0, "sh_coeffs": 1e-2})
    rng = np.random.default_rng(0)
    dist = []
    for _ in range(100):
        x = render(cloud, cam).rgb
        dist.append(np.linalg.norm(x - m))
        t = int(rng.integers(200, 600))
        g = sds_gradient(x, den, sched, t, rng.standard_normal(x.shape))
        grads = render_backward(cloud, cam, g, np.zeros((16, 16)))
        adam_step(cloud, grads, state)
    avg = np.convolve(dist, np.ones(10) / 10, mode="valid")
    assert np.all(np.diff(avg) < 0)
    assert dist[-1] < 0.5 * dist[0]
    assert isinstance(grads, CloudGradients)
