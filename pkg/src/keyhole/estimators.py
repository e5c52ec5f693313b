"""scikit-learn style estimators wrapping the reconstruction solvers.

Measurements are passed as an ``(L, T)`` array: one transient histogram per
row.  Poses are ``(L, 3)`` translation arrays or sequences of
:class:`~keyhole.forward.RigidTransform`.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .forward import DEFAULT_BIN_WIDTH, FalloffModel, ForwardModel, GridGeometry, RigidTransform
from .reconstruction import (
    EMConfig,
    PoseStack,
    _as_measurements,
    em_reconstruct,
    estimate_trajectory,
    gd_reconstruct,
    posterior_from_residuals,
    squared_residuals,
)
from .simulator import CandidateGrid, default_candidate_grid


def _as_poses(poses) -> list[RigidTransform]:
    poses = getattr(poses, "poses", poses)
    if isinstance(poses, np.ndarray) or (len(poses) and not isinstance(poses[0], RigidTransform)):
        arr = check_array(poses, dtype=float)
        if arr.shape[1] != 3:
            raise ValueError(f"pose array must have 3 columns, got {arr.shape[1]}")
        return [RigidTransform(tuple(t)) for t in arr]
    return list(poses)


class _KeyholeBase(BaseEstimator):
    def _forward_model(self, n_bins: int) -> ForwardModel:
        falloff = self.falloff if isinstance(self.falloff, FalloffModel) else FalloffModel.from_dict(self.falloff)
        geometry = GridGeometry(tuple(self.recon_shape), self.pixel_pitch, tuple(self.plane_offset))
        return ForwardModel(geometry, falloff, n_bins, self.bin_width, self.t0, self.gain)

    def _config(self) -> EMConfig:
        return EMConfig(
            n_iter=self.n_iter,
            sigma=self.sigma,
            lam=self.lam,
            learning_rate=self.learning_rate,
            betas=tuple(self.betas),
            anneal_factor=self.anneal_factor,
            seed=self.random_state,
            recon_shape=tuple(self.recon_shape),
            init_scale=self.init_scale,
        )

    def _validate(self, X, reset: bool):
        X = check_array(X, dtype=float, ensure_min_samples=1)
        if reset:
            self.n_features_in_ = X.shape[1]
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} bins, estimator was fitted with {self.n_features_in_}")
        return _as_measurements(X)


class KeyholeEM(TransformerMixin, _KeyholeBase):
    """Unknown-trajectory reconstruction by annealed EM.

    After ``fit``: ``albedo_`` (H x W), ``weights_`` (L x K posterior),
    ``trajectory_`` (most probable pose per measurement), ``diagnostics_``
    (one dict per iteration) and ``candidates_``.

    ``transform`` returns posterior pose weights for new measurements and
    ``predict`` their most probable translations.
    """

    def __init__(
        self,
        candidate_grid=None,
        n_iter=30,
        sigma=200.0,
        lam=2000.0,
        learning_rate=0.1,
        betas=(0.5, 0.999),
        anneal_factor=1.3,
        random_state=0,
        recon_shape=(64, 64),
        pixel_pitch=0.5 / 64,
        plane_offset=(0.0, 0.0, 0.0),
        falloff="retro",
        bin_width=DEFAULT_BIN_WIDTH,
        t0=0.0,
        gain=1.0,
        init_scale=0.1,
        n_jobs=1,
    ):
        self.candidate_grid = candidate_grid
        self.n_iter = n_iter
        self.sigma = sigma
        self.lam = lam
        self.learning_rate = learning_rate
        self.betas = betas
        self.anneal_factor = anneal_factor
        self.random_state = random_state
        self.recon_shape = recon_shape
        self.pixel_pitch = pixel_pitch
        self.plane_offset = plane_offset
        self.falloff = falloff
        self.bin_width = bin_width
        self.t0 = t0
        self.gain = gain
        self.init_scale = init_scale
        self.n_jobs = n_jobs

    def _candidates(self):
        grid = self.candidate_grid
        if grid is None:
            return default_candidate_grid("constant_y")
        if isinstance(grid, dict):
            return CandidateGrid.from_dict(grid)
        if isinstance(grid, CandidateGrid):
            return grid
        return _as_poses(grid)

    def fit(self, X, y=None):
        Y = self._validate(X, reset=True)
        model = self._forward_model(Y.shape[1])
        self.candidates_ = self._candidates()
        poses = getattr(self.candidates_, "poses", self.candidates_)
        self._stack = PoseStack.from_model(model, poses, n_jobs=self.n_jobs)
        result = em_reconstruct(Y, self.candidates_, model, self._config(), stack=self._stack)
        self.albedo_ = result.albedo.values
        self.weights_ = result.weights
        self.diagnostics_ = result.diagnostics
        self.trajectory_ = estimate_trajectory(result.weights, self.candidates_)
        self.n_iter_ = len(result.diagnostics)
        return self

    def transform(self, X):
        check_is_fitted(self, "albedo_")
        Y = self._validate(X, reset=False)
        res2 = squared_residuals(Y, self._stack.forward(self.albedo_))
        return posterior_from_residuals(res2, self.sigma, 1.0)

    def predict(self, X):
        weights = self.transform(X)
        poses = estimate_trajectory(weights, self.candidates_)
        return np.array([p.translation for p in poses])


class KnownTrajectoryGD(_KeyholeBase):
    """Known-trajectory MAP reconstruction (Adam on the penalized least squares).

    ``fit(X, poses)`` stores ``albedo_`` and the objective trace ``trace_``;
    ``predict(poses)`` renders histograms of the fitted albedo.
    """

    def __init__(
        self,
        iterations=200,
        lam=2000.0,
        learning_rate=0.1,
        betas=(0.5, 0.999),
        random_state=0,
        recon_shape=(64, 64),
        pixel_pitch=0.5 / 64,
        plane_offset=(0.0, 0.0, 0.0),
        falloff="retro",
        bin_width=DEFAULT_BIN_WIDTH,
        t0=0.0,
        gain=1.0,
        init_scale=0.1,
        n_jobs=1,
    ):
        self.iterations = iterations
        self.lam = lam
        self.learning_rate = learning_rate
        self.betas = betas
        self.random_state = random_state
        self.recon_shape = recon_shape
        self.pixel_pitch = pixel_pitch
        self.plane_offset = plane_offset
        self.falloff = falloff
        self.bin_width = bin_width
        self.t0 = t0
        self.gain = gain
        self.init_scale = init_scale
        self.n_jobs = n_jobs

    # GD has no EM-only knobs; feed neutral values to the shared config.
    n_iter = 1
    sigma = 1.0
    anneal_factor = 1.3

    def fit(self, X, poses):
        Y = self._validate(X, reset=True)
        poses = _as_poses(poses)
        if len(poses) != Y.shape[0]:
            raise ValueError(f"{len(poses)} poses given for {Y.shape[0]} measurements")
        self._model = self._forward_model(Y.shape[1])
        albedo, trace = gd_reconstruct(
            Y, poses, self._model, self._config(), self.iterations, return_trace=True, n_jobs=self.n_jobs
        )
        self.albedo_ = albedo.values
        self.trace_ = np.asarray(trace)
        return self

    def predict(self, poses):
        check_is_fitted(self, "albedo_")
        stack = PoseStack.from_model(self._model, _as_poses(poses), n_jobs=self.n_jobs)
        return stack.forward(self.albedo_)
