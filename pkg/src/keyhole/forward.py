"""Confocal transient forward model for a rigidly moving planar object.

The relay point sits at the origin of the global frame and the visible wall
faces ``+z``.  A planar albedo image spans the local x (columns) and y (rows,
row 0 on top) axes and is placed in the hidden scene by a rigid transform.
Each pixel contributes ``gain * pixel_area / g(x)`` photons, split linearly
between the two time bins bracketing its round-trip time of flight.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

SPEED_OF_LIGHT = 299_792_458.0
DEFAULT_BIN_WIDTH = 16e-12
DEFAULT_N_BINS = 1024

FALLOFF_PRESETS = {
    "diffuse": (4.0, 0.0),
    "retro": (2.0, 0.0),
    "experimental": (4.0, 4.0),
    # drop-off r^-2 cos^4 => g = r^2 cos^-4
    "supplement": (2.0, -4.0),
}


@dataclass(frozen=True)
class GridGeometry:
    """Shape and placement of a planar albedo grid in its local frame."""

    shape: tuple[int, int]
    pixel_pitch: float
    plane_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        h, w = (int(v) for v in self.shape)
        if h < 1 or w < 1:
            raise ValueError(f"grid shape must be positive, got {self.shape}")
        if not self.pixel_pitch > 0:
            raise ValueError(f"pixel_pitch must be > 0, got {self.pixel_pitch}")
        object.__setattr__(self, "shape", (h, w))
        object.__setattr__(self, "pixel_pitch", float(self.pixel_pitch))
        object.__setattr__(self, "plane_offset", tuple(float(v) for v in self.plane_offset))

    @property
    def n_pixels(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def pixel_area(self) -> float:
        return self.pixel_pitch**2

    def pixel_centers(self) -> np.ndarray:
        """Local coordinates of every pixel center, row-major, shape (H*W, 3)."""
        h, w = self.shape
        cols = (np.arange(w) - (w - 1) / 2) * self.pixel_pitch + self.plane_offset[0]
        rows = ((h - 1) / 2 - np.arange(h)) * self.pixel_pitch + self.plane_offset[1]
        xx, yy = np.meshgrid(cols, rows)
        zz = np.full_like(xx, self.plane_offset[2])
        return np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)


@dataclass(frozen=True)
class AlbedoGrid:
    """Non-negative planar albedo with physical extent."""

    values: np.ndarray
    pixel_pitch: float
    plane_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise ValueError(f"albedo must be 2-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("albedo contains non-finite values")
        if np.any(values < 0):
            raise ValueError("albedo must be non-negative")
        object.__setattr__(self, "values", values)
        # validates pitch and shape
        object.__setattr__(self, "plane_offset", self.geometry.plane_offset)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(self.values.shape, self.pixel_pitch, self.plane_offset)


@dataclass(frozen=True)
class RigidTransform:
    """Object pose: in-plane rotation about the local z axis, then translation."""

    translation: tuple[float, float, float]
    rotation: float = 0.0

    def __post_init__(self):
        t = tuple(float(v) for v in self.translation)
        if len(t) != 3 or not all(np.isfinite(t)):
            raise ValueError(f"translation must be 3 finite values, got {self.translation}")
        if not np.isfinite(self.rotation):
            raise ValueError("rotation must be finite")
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", float(self.rotation))

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if self.rotation != 0.0:
            c, s = np.cos(self.rotation), np.sin(self.rotation)
            x = c * points[:, 0] - s * points[:, 1]
            y = s * points[:, 0] + c * points[:, 1]
            points = np.stack([x, y, points[:, 2]], axis=1)
        return points + np.asarray(self.translation)


@dataclass(frozen=True)
class TransientHistogram:
    counts: np.ndarray
    bin_width: float = DEFAULT_BIN_WIDTH
    t0: float = 0.0

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=float)
        if counts.ndim != 1 or counts.size < 1:
            raise ValueError("histogram counts must be a non-empty 1-D vector")
        if not np.all(np.isfinite(counts)):
            raise ValueError("histogram counts must be finite")
        if not self.bin_width > 0:
            raise ValueError("bin_width must be > 0")
        object.__setattr__(self, "counts", counts)

    @property
    def n_bins(self) -> int:
        return self.counts.size


@dataclass(frozen=True)
class FalloffModel:
    """Radiometric falloff ``g(x) = |x|^p * cos(phi)^q``.

    ``phi`` is the angle between ``wall_normal`` and ``x``.  Presets are
    available through :meth:`preset`.
    """

    kind: str = "retro"
    radial_exponent: float = 2.0
    angular_exponent: float = 0.0
    wall_normal: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        normal = np.asarray(self.wall_normal, dtype=float)
        if normal.shape != (3,) or abs(np.linalg.norm(normal) - 1.0) > 1e-9:
            raise ValueError(f"wall_normal must be a unit 3-vector, got {self.wall_normal}")
        if self.kind in FALLOFF_PRESETS:
            if (self.radial_exponent, self.angular_exponent) != FALLOFF_PRESETS[self.kind]:
                raise ValueError(f"preset {self.kind!r} fixes exponents to {FALLOFF_PRESETS[self.kind]}")
        elif self.kind != "custom":
            raise ValueError(f"unknown falloff kind {self.kind!r}")
        object.__setattr__(self, "wall_normal", tuple(normal.tolist()))

    @classmethod
    def preset(cls, kind: str, wall_normal=(0.0, 0.0, 1.0)) -> "FalloffModel":
        if kind not in FALLOFF_PRESETS:
            raise ValueError(f"unknown falloff preset {kind!r}; choose from {sorted(FALLOFF_PRESETS)}")
        p, q = FALLOFF_PRESETS[kind]
        return cls(kind, p, q, wall_normal)

    @classmethod
    def custom(cls, radial_exponent: float, angular_exponent: float = 0.0, wall_normal=(0.0, 0.0, 1.0)):
        return cls("custom", float(radial_exponent), float(angular_exponent), wall_normal)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "radial_exponent": self.radial_exponent,
            "angular_exponent": self.angular_exponent,
            "wall_normal": list(self.wall_normal),
        }

    @classmethod
    def from_dict(cls, d) -> "FalloffModel":
        if isinstance(d, str):
            return cls.preset(d)
        kind = d.get("kind", "retro")
        normal = tuple(d.get("wall_normal", (0.0, 0.0, 1.0)))
        if kind == "custom":
            return cls.custom(d["radial_exponent"], d.get("angular_exponent", 0.0), normal)
        return cls.preset(kind, normal)


def bin_index(r, bin_width: float = DEFAULT_BIN_WIDTH, t0: float = 0.0):
    """Split a one-way distance into its round-trip time bins.

    Returns ``(lo, w)``: the energy goes ``w`` to bin ``lo`` and ``1 - w`` to
    bin ``lo + 1``.  Works elementwise on arrays.
    """
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("distance must be non-negative")
    if not bin_width > 0:
        raise ValueError("bin_width must be > 0")
    b = (2.0 * r - SPEED_OF_LIGHT * t0) / (SPEED_OF_LIGHT * bin_width)
    lo = np.floor(b)
    w = 1.0 - (b - lo)
    if lo.ndim == 0:
        return int(lo), float(w)
    return lo.astype(np.int64), w


def falloff_eval(model: FalloffModel, x_global) -> np.ndarray | float:
    """Evaluate ``g`` at one point (3-vector) or many points (N x 3)."""
    x = np.asarray(x_global, dtype=float)
    scalar = x.ndim == 1
    x = np.atleast_2d(x)
    r = np.linalg.norm(x, axis=1)
    if np.any(r == 0):
        raise ValueError("falloff undefined at the relay point (|x| = 0)")
    g = r**model.radial_exponent
    if model.angular_exponent != 0:
        cos_phi = (x @ np.asarray(model.wall_normal)) / r
        if np.any(cos_phi <= 0):
            raise ValueError("point lies behind the relay wall (cos phi <= 0)")
        g = g * cos_phi**model.angular_exponent
    return float(g[0]) if scalar else g


@dataclass(frozen=True)
class SystemMatrix:
    """Sparse (T x H*W) map from a vectorized albedo to one histogram."""

    matrix: sp.csr_matrix
    pose: RigidTransform
    shape: tuple[int, int]
    bin_width: float = DEFAULT_BIN_WIDTH
    t0: float = 0.0
    n_dropped: int = 0

    @property
    def n_bins(self) -> int:
        return self.matrix.shape[0]

    @property
    def out_of_range(self) -> bool:
        """True when every pixel fell outside the histogram window."""
        return self.n_dropped == self.shape[0] * self.shape[1]


def _system_triplets(centers, pose, falloff, n_bins, bin_width, t0, gain, area, scan_origin):
    x = pose.apply(centers)
    if scan_origin is not None:
        x = x - np.asarray(scan_origin, dtype=float)
    r = np.linalg.norm(x, axis=1)
    value = gain * area / falloff_eval(falloff, x)
    lo, w = bin_index(r, bin_width, t0)
    ok = (lo >= 0) & (lo < n_bins - 1)
    cols = np.flatnonzero(ok)
    lo, w, value = lo[ok], w[ok], value[ok]
    rows = np.concatenate([lo, lo + 1])
    data = np.concatenate([value * w, value * (1.0 - w)])
    cols = np.concatenate([cols, cols])
    keep = data != 0
    return rows[keep], cols[keep], data[keep], int((~ok).sum())


def assemble_system(
    geometry,
    pose: RigidTransform,
    falloff: FalloffModel,
    n_bins: int = DEFAULT_N_BINS,
    bin_width: float = DEFAULT_BIN_WIDTH,
    t0: float = 0.0,
    gain: float = 1.0,
    scan_origin=None,
) -> SystemMatrix:
    """Materialize the forward model for one pose.

    ``geometry`` is a :class:`GridGeometry` or anything exposing ``shape``,
    ``pixel_pitch`` and ``plane_offset`` (e.g. an :class:`AlbedoGrid`).
    ``scan_origin`` moves the virtual sensor away from the relay point.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    geom = GridGeometry(geometry.shape, geometry.pixel_pitch, geometry.plane_offset)
    rows, cols, data, dropped = _system_triplets(
        geom.pixel_centers(), pose, falloff, n_bins, bin_width, t0, gain, geom.pixel_area, scan_origin
    )
    matrix = sp.csr_matrix((data, (rows, cols)), shape=(n_bins, geom.n_pixels))
    matrix.sum_duplicates()
    matrix.sort_indices()
    return SystemMatrix(matrix, pose, geom.shape, bin_width, t0, dropped)


def render(system: SystemMatrix, albedo) -> TransientHistogram:
    values = albedo.values if isinstance(albedo, AlbedoGrid) else np.asarray(albedo, dtype=float)
    if values.shape != system.shape:
        raise ValueError(f"albedo shape {values.shape} does not match system {system.shape}")
    counts = system.matrix @ values.ravel()
    return TransientHistogram(counts, system.bin_width, system.t0)


def adjoint(system: SystemMatrix, histogram) -> np.ndarray:
    """Apply the transpose of the forward map; returns an H x W image."""
    y = histogram.counts if isinstance(histogram, TransientHistogram) else np.asarray(histogram, dtype=float)
    if y.shape != (system.n_bins,):
        raise ValueError(f"histogram length {y.shape} does not match system ({system.n_bins},)")
    return (system.matrix.T @ y).reshape(system.shape)


@dataclass(frozen=True)
class ForwardModel:
    """Everything needed to assemble systems for arbitrary poses.

    Bundles the grid geometry, time binning, falloff and a global photon gain
    so simulation and reconstruction share one definition of ``f(rho, theta)``.
    """

    geometry: GridGeometry
    falloff: FalloffModel = field(default_factory=lambda: FalloffModel.preset("retro"))
    n_bins: int = DEFAULT_N_BINS
    bin_width: float = DEFAULT_BIN_WIDTH
    t0: float = 0.0
    gain: float = 1.0

    def system(self, pose: RigidTransform) -> SystemMatrix:
        return assemble_system(
            self.geometry, pose, self.falloff, self.n_bins, self.bin_width, self.t0, self.gain
        )

    def systems(self, poses: Sequence[RigidTransform], n_jobs: int = 1) -> list[SystemMatrix]:
        """Assemble one system per pose; output order follows ``poses``."""
        if n_jobs > 1 and len(poses) > 1:
            with ThreadPoolExecutor(max_workers=n_jobs) as pool:
                return list(pool.map(self.system, poses))
        return [self.system(p) for p in poses]

    def stacked(self, poses: Sequence[RigidTransform], n_jobs: int = 1) -> sp.csr_matrix:
        """Vertically stack the systems of ``poses`` into a (K*T x H*W) CSR matrix."""
        return stack_systems(self.systems(poses, n_jobs))

    def to_dict(self) -> dict:
        return {
            "shape": list(self.geometry.shape),
            "pixel_pitch": self.geometry.pixel_pitch,
            "plane_offset": list(self.geometry.plane_offset),
            "falloff": self.falloff.to_dict(),
            "n_bins": self.n_bins,
            "bin_width": self.bin_width,
            "t0": self.t0,
            "gain": self.gain,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForwardModel":
        geometry = GridGeometry(tuple(d["shape"]), d["pixel_pitch"], tuple(d.get("plane_offset", (0, 0, 0))))
        return cls(
            geometry,
            FalloffModel.from_dict(d.get("falloff", "retro")),
            int(d.get("n_bins", DEFAULT_N_BINS)),
            float(d.get("bin_width", DEFAULT_BIN_WIDTH)),
            float(d.get("t0", 0.0)),
            float(d.get("gain", 1.0)),
        )


def stack_systems(systems: Iterable[SystemMatrix]) -> sp.csr_matrix:
    stacked = sp.vstack([s.matrix for s in systems], format="csr")
    stacked.sort_indices()
    return stacked
