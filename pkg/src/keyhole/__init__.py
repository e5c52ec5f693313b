"""Keyhole imaging: reconstruct a hidden moving object from single-pixel transient histograms."""

__version__ = "0.1.0"

from .estimators import KeyholeEM, KnownTrajectoryGD
from .evaluation import (
    RTF,
    DisambiguationSearch,
    SSIMParams,
    disambiguated_ssim,
    ssim,
    trajectory_rmse,
    transform_image,
)
from .forward import (
    AlbedoGrid,
    FalloffModel,
    ForwardModel,
    GridGeometry,
    RigidTransform,
    SystemMatrix,
    TransientHistogram,
    adjoint,
    assemble_system,
    render,
)
from .reconstruction import (
    EMConfig,
    annealing_schedule,
    e_step,
    em_reconstruct,
    estimate_trajectory,
    gd_reconstruct,
    log_prior,
    m_step,
    q_gradient,
    q_value,
)
from .simulator import (
    CandidateGrid,
    NoiseModel,
    TrajectorySet,
    apply_poisson_snr,
    default_candidate_grid,
    make_trajectory,
    preset_trajectory,
    rasterize_object,
    simulate_sequence,
)

__all__ = [
    "AlbedoGrid", "CandidateGrid", "DisambiguationSearch", "EMConfig", "FalloffModel", "ForwardModel",
    "GridGeometry", "KeyholeEM", "KnownTrajectoryGD", "NoiseModel", "RTF", "RigidTransform", "SSIMParams",
    "SystemMatrix", "TrajectorySet", "TransientHistogram", "adjoint", "annealing_schedule", "apply_poisson_snr",
    "assemble_system", "default_candidate_grid", "disambiguated_ssim", "e_step", "em_reconstruct",
    "estimate_trajectory", "gd_reconstruct", "log_prior", "m_step", "make_trajectory", "preset_trajectory",
    "q_gradient", "q_value", "rasterize_object", "render", "simulate_sequence", "ssim", "trajectory_rmse",
    "transform_image",
]
