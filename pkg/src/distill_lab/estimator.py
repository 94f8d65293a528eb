"""scikit-learn style front-end over the trainer.

``fit`` takes a :class:`~distill_lab.scene.SceneDataset`, ``predict`` renders
cameras, ``score`` is the masked-region PSNR against the object-free target.
Hyperparameters are plain constructor arguments so ``get_params``,
``set_params`` and ``sklearn.base.clone`` work as usual.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .distill import DistillWeights, Estimator
from .renderer import Camera, SamplingConfig, camera_rays, render
from .scene import SceneDataset
from .trainer import LossWeights, TrainConfig, TrainingProblem, evaluate, train
from .validation import check_is_fitted, check_scalar, check_views


class RadianceFieldInpainter(BaseEstimator):
    def __init__(self, estimator="bsd", iterations=2000, lr=0.05, batch_size=1024, omega1=7.5, omega2=6.5,
                 omega3=0.0, omega=0.0, geometry_omega1=1.5, geometry_omega2=0.5, lambda1=0.1, lambda2=1e-4,
                 lambda3=1e-4, t_min=0.02, t_max=0.98, n_samples=48, near=1.0, far=5.0, distill_resolution=64,
                 eval_views=(2, 7, 12, 17), random_state=0, jobs=1):
        self.estimator = estimator
        self.iterations = iterations
        self.lr = lr
        self.batch_size = batch_size
        self.omega1 = omega1
        self.omega2 = omega2
        self.omega3 = omega3
        self.omega = omega
        self.geometry_omega1 = geometry_omega1
        self.geometry_omega2 = geometry_omega2
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda3 = lambda3
        self.t_min = t_min
        self.t_max = t_max
        self.n_samples = n_samples
        self.near = near
        self.far = far
        self.distill_resolution = distill_resolution
        self.eval_views = eval_views
        self.random_state = random_state
        self.jobs = jobs

    def _train_config(self) -> TrainConfig:
        Estimator(self.estimator)
        check_scalar(self.iterations, "iterations", lo=1, integer=True)
        check_scalar(self.lr, "lr", lo=0, lo_open=True)
        check_scalar(self.random_state, "random_state", lo=0, integer=True)
        return TrainConfig(
            iterations=self.iterations, lr=self.lr, batch_size=self.batch_size,
            t_min=self.t_min, t_max=self.t_max, seed=self.random_state, estimator=self.estimator,
            appearance=DistillWeights(self.omega, self.omega1, self.omega2, self.omega3),
            geometry=DistillWeights(self.omega, self.geometry_omega1, self.geometry_omega2, self.omega3),
            loss=LossWeights(self.lambda1, self.lambda2, self.lambda3),
            sampling=SamplingConfig(n_samples=self.n_samples, near=self.near, far=self.far, clip_to_bbox=True),
            distill_resolution=self.distill_resolution, eval_views=tuple(self.eval_views),
            eval_every=0, checkpoint_every=self.iterations, jobs=self.jobs,
        )

    def fit(self, X: SceneDataset, y=None):
        if not isinstance(X, SceneDataset):
            raise TypeError(f"fit expects a SceneDataset, got {type(X).__name__}")
        X.validate()
        check_views(self.eval_views, len(X), "eval_views")
        cfg = self._train_config()
        result = train(TrainingProblem(X, cfg), cfg)
        if result.status != "ok":
            raise FloatingPointError(result.error)
        self.grid_ = result.grid
        self.history_ = [r.row() for r in result.reports]
        self.train_config_ = cfg
        return self

    def predict(self, X) -> np.ndarray:
        """Render each camera; returns an ``(n, H, W, 3)`` stack (cameras must share a size)."""
        check_is_fitted(self, "grid_")
        cams = [X] if isinstance(X, Camera) else list(X)
        if not cams:
            raise ValueError("no cameras to render")
        cfg = self.train_config_.sampling
        images = [render(self.grid_, camera_rays(c, cfg, self.grid_), cfg, normals=False, keep_segments=False,
                         jobs=self.jobs).color for c in cams]
        return np.stack(images)

    def score(self, X: SceneDataset, y=None) -> float:
        """Masked-region PSNR (dB) over the held-out evaluation views."""
        check_is_fitted(self, "grid_")
        views = check_views(self.eval_views, len(X), "eval_views")
        m = evaluate(self.grid_, X, views, self.train_config_.sampling, jobs=self.jobs)
        return float(m["psnr_masked"])
