"""scikit-learn style wrapper around the training loop."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import ValidationError
from .metrics import psnr
from .rasterizer import render
from .scene import Camera
from .synthetic import SyntheticScene
from .training import SceneData, TrainConfig, scene_data_from_synthetic, train


class GaussianSplatReconstructor(BaseEstimator):
    """Fit a Gaussian cloud to posed images; predict renders for new cameras.

    ``fit`` takes a :class:`SceneData` or a :class:`SyntheticScene` (from
    which ``views`` training views are drawn). Keys of :class:`TrainConfig`
    not exposed as parameters go in ``extra``.
    """

    def __init__(self, iterations=3000, mode="gsd", seed=0, views=3, gsd_start_iter=3000, lambda_depth=0.05,
                 lambda_gsd=0.5, rho=1.0, eta_depth=1.0, eta_feature=1.0, eta_pixel=0.0, frames_n=6, anchor_s=4,
                 max_gaussians=1000, extra=None):
        self.iterations = iterations
        self.mode = mode
        self.seed = seed
        self.views = views
        self.gsd_start_iter = gsd_start_iter
        self.lambda_depth = lambda_depth
        self.lambda_gsd = lambda_gsd
        self.rho = rho
        self.eta_depth = eta_depth
        self.eta_feature = eta_feature
        self.eta_pixel = eta_pixel
        self.frames_n = frames_n
        self.anchor_s = anchor_s
        self.max_gaussians = max_gaussians
        self.extra = extra

    def _train_config(self):
        params = self.get_params()
        params.pop("views")
        extra = params.pop("extra") or {}
        return TrainConfig.from_dict({**params, **extra})

    def _data(self, X):
        if isinstance(X, SceneData):
            return X
        if isinstance(X, SyntheticScene):
            return scene_data_from_synthetic(X, self.views, seed=self.seed)
        raise ValidationError(f"expected SceneData or SyntheticScene, got {type(X).__name__}")

    def fit(self, X, y=None):
        data = self._data(X)
        result = train(self._train_config(), data)
        self.cloud_ = result.cloud
        self.metrics_ = result.metrics
        self.n_gaussians_ = len(result.cloud)
        self.data_ = data
        return self

    def predict(self, X):
        """Renders (n, H, W, 3) for a camera, a list of cameras, or the test views of a scene."""
        check_is_fitted(self, "cloud_")
        cams = self._cameras(X)
        return np.stack([render(self.cloud_, c).rgb for c in cams])

    def predict_depth(self, X):
        check_is_fitted(self, "cloud_")
        return np.stack([render(self.cloud_, c).depth for c in self._cameras(X)])

    def score(self, X, y=None):
        """Mean PSNR over held-out views (or over ``y`` for a camera list)."""
        check_is_fitted(self, "cloud_")
        if y is not None:
            pred = self.predict(X)
            y = np.asarray(y, dtype=np.float64)
            if y.shape != pred.shape:
                raise ValidationError(f"targets {y.shape} do not match predictions {pred.shape}")
            return float(np.mean([psnr(p, t) for p, t in zip(pred, y)]))
        data = self._data(X) if not isinstance(X, SceneData) else X
        pred = self.predict(data)
        return float(np.mean([psnr(p, data.images[v]) for p, v in zip(pred, data.test_views)]))

    def _cameras(self, X):
        if isinstance(X, Camera):
            return [X]
        if isinstance(X, (SceneData, SyntheticScene)):
            data = X if isinstance(X, SceneData) else self._data(X)
            return [data.cameras[v] for v in data.test_views]
        cams = list(X)
        if not all(isinstance(c, Camera) for c in cams):
            raise ValidationError("predict expects cameras or a scene")
        return cams
