"""Albedo recovery from keyhole measurements.

Two solvers share the same objective machinery:

* :func:`em_reconstruct` marginalizes an unknown trajectory over a discrete
  set of candidate poses with annealed expectation-maximization.
* :func:`gd_reconstruct` is the known-trajectory MAP baseline.

The albedo is parameterized as ``rho = nu**2`` and every ascent runs Adam on
``nu``.  The log-prior is ``-|L rho|_1 - |rho|_1`` with ``L`` the zero-padded
5-point Laplacian.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from .forward import AlbedoGrid, ForwardModel, RigidTransform, SystemMatrix, TransientHistogram
from .optim import Adam

logger = logging.getLogger(__name__)

LAPLACIAN_STENCIL = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


@dataclass(frozen=True)
class EMConfig:
    n_iter: int = 30
    sigma: float = 200.0
    lam: float = 2000.0
    learning_rate: float = 0.1
    betas: tuple[float, float] = (0.5, 0.999)
    anneal_factor: float = 1.3
    seed: int = 0
    recon_shape: tuple[int, int] = (64, 64)
    init_scale: float = 0.1

    def __post_init__(self):
        if self.n_iter < 1:
            raise ValueError("n_iter must be >= 1")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not self.anneal_factor > 1:
            raise ValueError("anneal_factor must be > 1")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ValueError("momentum decays must lie in [0, 1)")
        object.__setattr__(self, "betas", (float(b1), float(b2)))
        object.__setattr__(self, "recon_shape", tuple(int(v) for v in self.recon_shape))

    def to_dict(self) -> dict:
        return {
            "n_iter": self.n_iter,
            "sigma": self.sigma,
            "lam": self.lam,
            "learning_rate": self.learning_rate,
            "betas": list(self.betas),
            "anneal_factor": self.anneal_factor,
            "seed": self.seed,
            "recon_shape": list(self.recon_shape),
            "init_scale": self.init_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EMConfig":
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown EM config fields: {sorted(unknown)}")
        kwargs = dict(d)
        for key in ("betas", "recon_shape"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass
class ReconState:
    nu: np.ndarray
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    iteration: int = 0

    @property
    def albedo(self) -> np.ndarray:
        return self.nu * self.nu


def initial_state(config: EMConfig) -> ReconState:
    rng = np.random.default_rng(config.seed)
    return ReconState(config.init_scale * rng.standard_normal(config.recon_shape))


def annealing_schedule(n_iter: int, factor: float = 1.3) -> np.ndarray:
    """Inverse temperatures growing geometrically by ``factor`` and ending at 1."""
    if n_iter < 1 or not factor > 1:
        raise ValueError("need n_iter >= 1 and factor > 1")
    betas = np.empty(n_iter)
    betas[0] = factor ** -(n_iter - 1)
    for n in range(1, n_iter):
        betas[n] = min(1.0, factor * betas[n - 1])
    betas[-1] = 1.0
    return betas


# -- prior -------------------------------------------------------------------

def laplacian(img: np.ndarray) -> np.ndarray:
    """5-point Laplacian with zero padding; the operator is symmetric."""
    out = -4.0 * img
    out[1:, :] += img[:-1, :]
    out[:-1, :] += img[1:, :]
    out[:, 1:] += img[:, :-1]
    out[:, :-1] += img[:, 1:]
    return out


def log_prior(rho: np.ndarray) -> float:
    return -float(np.abs(laplacian(rho)).sum() + np.abs(rho).sum())


def log_prior_grad(rho: np.ndarray) -> np.ndarray:
    """Subgradient in ``rho`` (valid for ``rho >= 0``; ``sign(0) = 0``)."""
    return -laplacian(np.sign(laplacian(rho))) - 1.0


# -- pose stacks ---------------------------------------------------------------

class PoseStack:
    """K system matrices stacked into one sparse operator.

    ``forward`` maps an H x W albedo to a (K, T) array of predicted
    histograms; ``adjoint`` maps a (K, T) array back to an H x W image.
    """

    def __init__(self, matrix: sp.csr_matrix, n_poses: int, n_bins: int, shape):
        self.matrix = matrix
        self.matrix_t = matrix.T.tocsr()
        self.n_poses = n_poses
        self.n_bins = n_bins
        self.shape = tuple(shape)

    @classmethod
    def from_systems(cls, systems: Sequence[SystemMatrix]) -> "PoseStack":
        if isinstance(systems, PoseStack):
            return systems
        systems = list(systems)
        if not systems:
            raise ValueError("need at least one system")
        shapes = {s.shape for s in systems}
        bins = {s.n_bins for s in systems}
        if len(shapes) != 1 or len(bins) != 1:
            raise ValueError("all systems must share albedo shape and bin count")
        matrix = sp.vstack([s.matrix for s in systems], format="csr")
        matrix.sort_indices()
        return cls(matrix, len(systems), bins.pop(), shapes.pop())

    @classmethod
    def from_model(cls, model: ForwardModel, poses, n_jobs: int = 1) -> "PoseStack":
        return cls.from_systems(model.systems(list(poses), n_jobs=n_jobs))

    def forward(self, rho: np.ndarray) -> np.ndarray:
        return (self.matrix @ rho.ravel()).reshape(self.n_poses, self.n_bins)

    def adjoint(self, r: np.ndarray) -> np.ndarray:
        return (self.matrix_t @ r.ravel()).reshape(self.shape)


def _as_measurements(measurements) -> np.ndarray:
    if isinstance(measurements, np.ndarray):
        y = measurements.astype(float, copy=False)
    else:
        y = np.stack([m.counts if isinstance(m, TransientHistogram) else np.asarray(m, float) for m in measurements])
    if y.ndim != 2 or y.shape[0] < 1:
        raise ValueError("measurements must be an (L, T) array with L >= 1")
    if not np.all(np.isfinite(y)):
        raise ValueError("measurements contain non-finite values")
    return y


def _check_compatible(y: np.ndarray, stack: PoseStack) -> None:
    if y.shape[1] != stack.n_bins:
        raise ValueError(f"measurements have {y.shape[1]} bins, systems have {stack.n_bins}")


def squared_residuals(y: np.ndarray, predicted: np.ndarray, chunk_elems: int = 4_000_000) -> np.ndarray:
    """``|y_i - predicted_k|^2`` for every pair, shape (L, K)."""
    n_meas, n_bins = y.shape
    out = np.empty((n_meas, predicted.shape[0]))
    step = max(1, chunk_elems // max(1, predicted.size))
    for i0 in range(0, n_meas, step):
        diff = y[i0 : i0 + step, None, :] - predicted[None, :, :]
        out[i0 : i0 + step] = np.einsum("ikt,ikt->ik", diff, diff)
    return out


# -- E-step ------------------------------------------------------------------

def posterior_from_residuals(res2: np.ndarray, sigma: float, beta: float) -> np.ndarray:
    if not 0 < beta <= 1:
        raise ValueError("beta must lie in (0, 1]")
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    logw = -beta * res2 / (2.0 * sigma**2)
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(axis=1, keepdims=True)
    return w


def e_step(measurements, systems, rho, sigma: float, beta: float = 1.0) -> np.ndarray:
    """Per-measurement posterior over candidate poses, shape (L, K).

    Log-weights ``-beta * |y_i - A_k rho|^2 / (2 sigma^2)`` are normalized per
    row with the max-subtraction trick.
    """
    y = _as_measurements(measurements)
    stack = PoseStack.from_systems(systems)
    _check_compatible(y, stack)
    res2 = squared_residuals(y, stack.forward(np.asarray(rho, float)))
    return posterior_from_residuals(res2, sigma, beta)


# -- surrogate objective ---------------------------------------------------------

def q_terms(rho, weights, measurements, systems, lam: float) -> tuple[float, float, float]:
    """Return ``(Q, data_term, prior_term)`` of the weighted MAP surrogate."""
    y = _as_measurements(measurements)
    stack = PoseStack.from_systems(systems)
    _check_compatible(y, stack)
    rho = np.asarray(rho, float)
    weights = np.asarray(weights, float)
    res2 = squared_residuals(y, stack.forward(rho))
    data = -float(np.sum(weights * res2))
    prior = lam * float(weights.sum()) * log_prior(rho) if lam else 0.0
    return data + prior, data, prior


def q_value(rho, weights, measurements, systems, lam: float) -> float:
    return q_terms(rho, weights, measurements, systems, lam)[0]


class _Surrogate:
    """Q(rho) for fixed weights, reduced to per-pose sufficient statistics."""

    def __init__(self, y: np.ndarray, weights: np.ndarray, stack: PoseStack, prior_weight: float):
        self.stack = stack
        self.ybar = weights.T @ y
        self.wsum = weights.sum(axis=0)
        self.const = float(np.einsum("ik,i->", weights, np.einsum("it,it->i", y, y)))
        self.prior_weight = prior_weight

    def terms(self, rho: np.ndarray) -> tuple[float, float, float]:
        f = self.stack.forward(rho)
        data = -(self.const - 2.0 * np.sum(self.ybar * f) + np.sum(self.wsum * np.einsum("kt,kt->k", f, f)))
        prior = self.prior_weight * log_prior(rho) if self.prior_weight else 0.0
        return data + prior, float(data), prior

    def grad_rho(self, rho: np.ndarray) -> np.ndarray:
        f = self.stack.forward(rho)
        g = 2.0 * self.stack.adjoint(self.ybar - self.wsum[:, None] * f)
        if self.prior_weight:
            g = g + self.prior_weight * log_prior_grad(rho)
        return g

    def grad_nu(self, nu: np.ndarray) -> np.ndarray:
        return self.grad_rho(nu * nu) * (2.0 * nu)


def q_gradient(nu, weights, measurements, systems, lam: float) -> np.ndarray:
    """Gradient of Q with respect to ``nu`` where ``rho = nu**2``."""
    y = _as_measurements(measurements)
    stack = PoseStack.from_systems(systems)
    _check_compatible(y, stack)
    weights = np.asarray(weights, float)
    surrogate = _Surrogate(y, weights, stack, lam * float(weights.sum()))
    return surrogate.grad_nu(np.asarray(nu, float))


# -- M-step ------------------------------------------------------------------------

def _ascend(nu, grad_fn, steps: int, config: EMConfig, trace_fn=None):
    opt = Adam(config.learning_rate, config.betas)
    trace = []
    for _ in range(steps):
        nu = opt.step(nu, grad_fn(nu))
        if trace_fn is not None:
            trace.append(trace_fn(nu))
    return nu, opt, trace


def m_step(
    state: ReconState,
    weights,
    measurements,
    systems,
    config: EMConfig,
    inner_steps: int,
    diagnostics: dict | None = None,
) -> ReconState:
    """Run ``inner_steps`` Adam ascent steps on Q with fresh optimizer moments.

    If ``diagnostics`` is a dict it receives ``q_start`` / ``q`` (surrogate
    before and after) plus the data and prior terms; a decrease is logged,
    not corrected.
    """
    if inner_steps < 1:
        raise ValueError("inner_steps must be >= 1")
    y = _as_measurements(measurements)
    stack = PoseStack.from_systems(systems)
    _check_compatible(y, stack)
    weights = np.asarray(weights, float)
    surrogate = _Surrogate(y, weights, stack, config.lam * float(weights.sum()))
    return _m_step(state, surrogate, config, inner_steps, diagnostics)


def _m_step(state, surrogate, config, inner_steps, diagnostics=None):
    q_start = surrogate.terms(state.albedo)[0] if diagnostics is not None else None
    nu, opt, _ = _ascend(state.nu, surrogate.grad_nu, inner_steps, config)
    new = ReconState(nu, opt.m, opt.v, state.iteration + 1)
    if diagnostics is not None:
        q, data, prior = surrogate.terms(new.albedo)
        diagnostics.update(q_start=q_start, q=q, data_term=data, prior_term=prior, inner_steps=inner_steps)
        if q < q_start - 1e-6 * abs(q_start):
            logger.debug("M-step %d decreased Q: %.6g -> %.6g", state.iteration, q_start, q)
    return new


# -- solvers --------------------------------------------------------------------------

class EMResult(NamedTuple):
    albedo: AlbedoGrid
    weights: np.ndarray
    diagnostics: list
    state: ReconState


def _candidate_poses(candidates) -> tuple[RigidTransform, ...]:
    poses = getattr(candidates, "poses", candidates)
    poses = tuple(poses)
    if not poses:
        raise ValueError("candidate set is empty")
    return poses


def em_reconstruct(
    measurements,
    candidates,
    model: ForwardModel,
    config: EMConfig = EMConfig(),
    *,
    betas: Sequence[float] | None = None,
    inner_steps=None,
    stack: PoseStack | None = None,
    n_jobs: int = 1,
) -> EMResult:
    """Annealed EM over a discrete candidate pose set.

    Iteration ``n`` computes posterior weights at inverse temperature
    ``betas[n]`` (default: :func:`annealing_schedule`) and then runs ``n + 1``
    Adam steps on the surrogate.  ``inner_steps`` may override the step count
    with an int or a callable of ``n``.  Final weights are evaluated at
    ``beta = 1``.
    """
    y = _as_measurements(measurements)
    if tuple(config.recon_shape) != tuple(model.geometry.shape):
        raise ValueError(f"recon_shape {config.recon_shape} differs from model geometry {model.geometry.shape}")
    if stack is None:
        stack = PoseStack.from_model(model, _candidate_poses(candidates), n_jobs=n_jobs)
    _check_compatible(y, stack)
    schedule = annealing_schedule(config.n_iter, config.anneal_factor) if betas is None else np.asarray(betas, float)
    if len(schedule) != config.n_iter:
        raise ValueError("beta schedule length must equal n_iter")

    state = initial_state(config)
    diagnostics = []
    for n, beta in enumerate(schedule):
        rho = state.albedo
        weights = posterior_from_residuals(squared_residuals(y, stack.forward(rho)), config.sigma, beta)
        steps = n + 1 if inner_steps is None else (inner_steps(n) if callable(inner_steps) else int(inner_steps))
        surrogate = _Surrogate(y, weights, stack, config.lam * float(weights.sum()))
        record = {"iteration": n, "beta": float(beta)}
        state = _m_step(state, surrogate, config, steps, record)
        diagnostics.append(record)
        logger.info("EM iter %d beta=%.4g Q=%.6g", n, beta, record["q"])

    rho = state.albedo
    weights = posterior_from_residuals(squared_residuals(y, stack.forward(rho)), config.sigma, 1.0)
    albedo = AlbedoGrid(rho, model.geometry.pixel_pitch, model.geometry.plane_offset)
    return EMResult(albedo, weights, diagnostics, state)


def gd_objective(rho, measurements, systems, lam: float) -> float:
    """Known-pose MAP objective ``sum_i -|y_i - A_i rho|^2 + lam log p(rho)``."""
    y = _as_measurements(measurements)
    stack = PoseStack.from_systems(systems)
    if stack.n_poses != y.shape[0]:
        raise ValueError("need exactly one system per measurement")
    _check_compatible(y, stack)
    rho = np.asarray(rho, float)
    r = y - stack.forward(rho)
    return -float(np.sum(r * r)) + (lam * log_prior(rho) if lam else 0.0)


def _known_pose_surrogate(y, poses, model=None, systems=None, lam=0.0, n_jobs=1) -> _Surrogate:
    # Identical poses share one system; the one-hot weights then reproduce
    # the known-pose objective exactly through the weighted surrogate.
    keys = [(p.translation, p.rotation) for p in poses]
    index, unique = {}, []
    for i, key in enumerate(keys):
        if key not in index:
            index[key] = len(unique)
            unique.append(i)
    if systems is not None:
        stack = PoseStack.from_systems([systems[i] for i in unique])
    else:
        stack = PoseStack.from_model(model, [poses[i] for i in unique], n_jobs=n_jobs)
    onehot = np.zeros((len(poses), len(unique)))
    onehot[np.arange(len(poses)), [index[k] for k in keys]] = 1.0
    return _Surrogate(y, onehot, stack, lam)


def gd_gradient(nu, measurements, systems, lam: float) -> np.ndarray:
    """Gradient in ``nu`` of :func:`gd_objective` (``rho = nu**2``)."""
    y = _as_measurements(measurements)
    systems = list(systems)
    if len(systems) != y.shape[0]:
        raise ValueError("need exactly one system per measurement")
    surrogate = _known_pose_surrogate(y, [s.pose for s in systems], systems=systems, lam=lam)
    return surrogate.grad_nu(np.asarray(nu, float))


def gd_reconstruct(
    measurements,
    known_poses: Sequence[RigidTransform],
    model: ForwardModel,
    config: EMConfig = EMConfig(),
    iterations: int = 200,
    return_trace: bool = False,
    n_jobs: int = 1,
):
    """Known-trajectory baseline: ``iterations`` Adam steps on the MAP objective.

    Returns the albedo, or ``(albedo, trace)`` where ``trace[j]`` is the
    objective after step ``j``.
    """
    y = _as_measurements(measurements)
    poses = list(getattr(known_poses, "poses", known_poses))
    if len(poses) != y.shape[0]:
        raise ValueError(f"{len(poses)} poses given for {y.shape[0]} measurements")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if tuple(config.recon_shape) != tuple(model.geometry.shape):
        raise ValueError(f"recon_shape {config.recon_shape} differs from model geometry {model.geometry.shape}")
    surrogate = _known_pose_surrogate(y, poses, model=model, lam=config.lam, n_jobs=n_jobs)
    _check_compatible(y, surrogate.stack)
    trace_fn = (lambda nu: surrogate.terms(nu * nu)[0]) if return_trace else None
    nu, _, trace = _ascend(initial_state(config).nu, surrogate.grad_nu, iterations, config, trace_fn)
    albedo = AlbedoGrid(nu * nu, model.geometry.pixel_pitch, model.geometry.plane_offset)
    return (albedo, trace) if return_trace else albedo


def estimate_trajectory(weights, candidates) -> list[RigidTransform]:
    """Most probable candidate per measurement (ties go to the lowest index)."""
    poses = _candidate_poses(candidates)
    weights = np.asarray(weights, float)
    if weights.ndim != 2 or weights.shape[1] != len(poses):
        raise ValueError("weights must be (L, K) with K matching the candidate set")
    return [poses[k] for k in np.argmax(weights, axis=1)]
