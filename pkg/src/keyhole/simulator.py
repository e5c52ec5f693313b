"""Trajectories, candidate pose grids, object rasterization and noisy measurement sequences."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .forward import (
    DEFAULT_BIN_WIDTH,
    DEFAULT_N_BINS,
    AlbedoGrid,
    FalloffModel,
    ForwardModel,
    RigidTransform,
    TransientHistogram,
    render,
)

logger = logging.getLogger(__name__)

PLANES = ("constant_x", "constant_y", "constant_z")
_FIXED_AXIS = {"constant_x": 0, "constant_y": 1, "constant_z": 2}
_FREE_AXES = {"constant_x": (1, 2), "constant_y": (0, 2), "constant_z": (0, 1)}

# Plane placement used by the presets: value of the fixed coordinate and the
# center of the free coordinates.  All dyadic, so on-lattice shifts are exact.
PLANE_LAYOUT = {
    "constant_z": {"fixed": 1.0, "center": (0.0, 0.0)},
    "constant_x": {"fixed": 0.375, "center": (0.0, 1.0)},
    "constant_y": {"fixed": -0.375, "center": (0.0, 1.0)},
}


def _check_plane(plane: str) -> None:
    if plane not in PLANES:
        raise ValueError(f"plane must be one of {PLANES}, got {plane!r}")


@dataclass(frozen=True)
class TrajectorySet:
    poses: tuple[RigidTransform, ...]
    plane: str
    label: str = ""

    def __post_init__(self):
        _check_plane(self.plane)
        poses = tuple(self.poses)
        if not poses:
            raise ValueError("a trajectory needs at least one pose")
        axis = _FIXED_AXIS[self.plane]
        fixed = np.array([p.translation[axis] for p in poses])
        if np.max(np.abs(fixed - fixed[0])) > 1e-12:
            raise ValueError(f"poses leave the {self.plane} plane")
        object.__setattr__(self, "poses", poses)

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def translations(self) -> np.ndarray:
        return np.array([p.translation for p in self.poses])

    def shifted(self, delta) -> "TrajectorySet":
        """Translate every pose by ``delta`` (meters)."""
        delta = np.asarray(delta, dtype=float)
        poses = [RigidTransform(tuple(np.asarray(p.translation) + delta), p.rotation) for p in self.poses]
        return TrajectorySet(tuple(poses), self.plane, self.label)

    def to_dict(self) -> dict:
        return {
            "plane": self.plane,
            "label": self.label,
            "translations": self.translations.tolist(),
            "rotations": [p.rotation for p in self.poses],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectorySet":
        rotations = d.get("rotations") or [0.0] * len(d["translations"])
        poses = tuple(RigidTransform(tuple(t), r) for t, r in zip(d["translations"], rotations))
        return cls(poses, d["plane"], d.get("label", ""))


@dataclass(frozen=True)
class CandidateGrid:
    """Equispaced 2-D lattice of candidate translations inside one plane.

    Poses are stored row-major: row index walks the second free axis, column
    index the first.
    """

    plane: str
    center: tuple[float, float, float]
    extent: tuple[float, float]
    shape: tuple[int, int]

    def __post_init__(self):
        _check_plane(self.plane)
        rows, cols = (int(v) for v in self.shape)
        if rows < 1 or cols < 1:
            raise ValueError("candidate grid shape must be positive")
        if any(e < 0 for e in self.extent):
            raise ValueError("candidate grid extent must be non-negative")
        object.__setattr__(self, "shape", (rows, cols))
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "extent", tuple(float(v) for v in self.extent))

    def _axis(self, n: int, center: float, extent: float) -> np.ndarray:
        if n == 1:
            return np.array([center])
        return center - extent / 2 + np.arange(n) * (extent / (n - 1))

    @property
    def translations(self) -> np.ndarray:
        rows, cols = self.shape
        a0, a1 = _FREE_AXES[self.plane]
        u = self._axis(cols, self.center[a0], self.extent[0])
        v = self._axis(rows, self.center[a1], self.extent[1])
        uu, vv = np.meshgrid(u, v)
        t = np.tile(np.asarray(self.center), (rows * cols, 1))
        t[:, a0] = uu.ravel()
        t[:, a1] = vv.ravel()
        return t

    @property
    def poses(self) -> tuple[RigidTransform, ...]:
        return tuple(RigidTransform(tuple(t)) for t in self.translations)

    def __len__(self) -> int:
        return self.shape[0] * self.shape[1]

    def to_dict(self) -> dict:
        return {"plane": self.plane, "center": list(self.center), "extent": list(self.extent), "shape": list(self.shape)}

    @classmethod
    def from_dict(cls, d: dict) -> "CandidateGrid":
        plane = d["plane"]
        center = d.get("center")
        if center is None:
            center = _embed(plane, PLANE_LAYOUT[plane]["center"], PLANE_LAYOUT[plane]["fixed"])
        return cls(plane, tuple(center), tuple(d.get("extent", (1.0, 1.0))), tuple(d.get("shape", (17, 17))))


def default_candidate_grid(plane: str, shape=(17, 17), extent=(1.0, 1.0)) -> CandidateGrid:
    """Grid of ``shape`` covering ``extent`` meters around the plane's preset center."""
    _check_plane(plane)
    layout = PLANE_LAYOUT[plane]
    return CandidateGrid(plane, _embed(plane, layout["center"], layout["fixed"]), extent, shape)


@dataclass(frozen=True)
class NoiseModel:
    kind: str = "poisson_snr"
    target_snr: float = 15.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("poisson_snr", "gaussian", "none"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind != "none" and not self.target_snr > 0:
            raise ValueError("target_snr must be > 0")


def _embed(plane: str, uv, fixed: float) -> tuple[float, float, float]:
    t = [0.0, 0.0, 0.0]
    t[_FIXED_AXIS[plane]] = float(fixed)
    a0, a1 = _FREE_AXES[plane]
    t[a0], t[a1] = float(uv[0]), float(uv[1])
    return tuple(t)


def make_trajectory(
    plane: str,
    waypoints: Sequence[Sequence[float]],
    samples_per_segment: int,
    closed: bool = False,
    label: str = "",
) -> TrajectorySet:
    """Piecewise-linear trajectory through 3-D ``waypoints``.

    Each segment contributes ``samples_per_segment`` poses, joints are shared
    and the final waypoint is included.  With ``closed`` the path returns to
    the first waypoint without repeating it.
    """
    _check_plane(plane)
    pts = np.asarray(waypoints, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 2:
        raise ValueError("need at least two 3-D waypoints")
    if samples_per_segment < 1:
        raise ValueError("samples_per_segment must be >= 1")
    axis = _FIXED_AXIS[plane]
    if np.max(np.abs(pts[:, axis] - pts[0, axis])) > 1e-12:
        raise ValueError(f"waypoints are not all in the {plane} plane")
    if closed:
        pts = np.vstack([pts, pts[:1]])

    n = samples_per_segment
    out = []
    for a, b in zip(pts[:-1], pts[1:]):
        if np.array_equal(a, b):
            continue
        for k in range(n):
            out.append(a + (b - a) * k / n)
    if not closed or not out:
        out.append(pts[-1])
    if len(out) == 1:
        logger.warning("degenerate trajectory: all waypoints coincide, L=1")
    poses = tuple(RigidTransform(tuple(p)) for p in out)
    return TrajectorySet(poses, plane, label)


def _square(half: float):
    return [(-half, -half), (half, -half), (half, half), (-half, half), (-half, -half)]


def _zigzag(half: float):
    return [(-half, half), (half, half), (-half, -half), (half, -half)]


def _octagon(side: float):
    s, d = side / 2, side
    return [
        (-s, -s - d), (s, -s - d), (s + d, -s), (s + d, s),
        (s, s + d), (-s, s + d), (-s - d, s), (-s - d, -s),
    ]


# (shape, samples per segment, closed); L = 103 / 193 / 360 respectively.
_SHAPES = {
    "zigzag": (_zigzag(17 / 64), 34, False),
    "square": (_square(0.375), 48, False),
    "octagon": (_octagon(45 / 256), 45, True),
}
PRESETS = {
    "a": ("constant_z", "zigzag"), "b": ("constant_x", "zigzag"), "c": ("constant_y", "zigzag"),
    "d": ("constant_z", "square"), "e": ("constant_x", "square"), "f": ("constant_y", "square"),
    "g": ("constant_z", "octagon"), "h": ("constant_x", "octagon"), "i": ("constant_y", "octagon"),
}


def preset_trajectory(name: str) -> TrajectorySet:
    """One of the nine bundled trajectories ``"a"`` .. ``"i"``.

    Columns of the preset table are the constant-z, constant-x and constant-y
    planes; rows are a zig-zag (103 poses), a square loop (193) and a closed
    octagon (360).
    """
    if name not in PRESETS:
        raise ValueError(f"unknown trajectory preset {name!r}; choose from {sorted(PRESETS)}")
    plane, shape = PRESETS[name]
    uv, n, closed = _SHAPES[shape]
    layout = PLANE_LAYOUT[plane]
    cu, cv = layout["center"]
    waypoints = [_embed(plane, (cu + u, cv + v), layout["fixed"]) for u, v in uv]
    return make_trajectory(plane, waypoints, n, closed=closed, label=name)


def trajectory_from_config(cfg) -> TrajectorySet:
    """Build a trajectory from a preset name or a ``{"plane", "waypoints", ...}`` mapping."""
    if isinstance(cfg, str):
        return preset_trajectory(cfg)
    if "preset" in cfg:
        return preset_trajectory(cfg["preset"])
    if "translations" in cfg:
        return TrajectorySet.from_dict(cfg)
    return make_trajectory(
        cfg["plane"], cfg["waypoints"], int(cfg["samples_per_segment"]),
        closed=bool(cfg.get("closed", False)), label=cfg.get("label", ""),
    )


def rasterize_object(
    image,
    physical_size: float = 0.5,
    binarize: bool = False,
    threshold: float = 0.5,
    plane_offset=(0.0, 0.0, 0.0),
) -> AlbedoGrid:
    img = np.asarray(image, dtype=float)
    if img.ndim != 2 or min(img.shape) < 1:
        raise ValueError("object image must be a non-empty 2-D array")
    if not np.all(np.isfinite(img)):
        raise ValueError("object image contains non-finite pixels")
    if not physical_size > 0:
        raise ValueError("physical_size must be > 0")
    if binarize:
        img = (img >= threshold).astype(float)
    return AlbedoGrid(np.clip(img, 0.0, None), physical_size / max(img.shape), plane_offset)


def shift_albedo(albedo: AlbedoGrid, dx: int, dy: int) -> AlbedoGrid:
    """Shift image content by whole pixels (+dx right / +x, +dy up / +y), zero fill.

    The shifted object occupies the same local positions as the original
    moved by ``(dx, dy) * pixel_pitch``; content pushed off the grid is lost.
    """
    h, w = albedo.shape
    out = np.zeros_like(albedo.values)
    src = albedo.values
    # rows grow downward, +y is up
    r0, r1 = max(0, -dy), min(h, h - dy)
    c0, c1 = max(0, dx), min(w, w + dx)
    if r0 < r1 and c0 < c1:
        out[r0:r1, c0:c1] = src[r0 + dy : r1 + dy, c0 - dx : c1 - dx]
    return AlbedoGrid(out, albedo.pixel_pitch, albedo.plane_offset)


def apply_poisson_snr(clean, target_snr: float, rng: np.random.Generator) -> TransientHistogram:
    """Poisson noise scaled so the peak bin has SNR ``target_snr``.

    The clean histogram is scaled by ``s = target_snr**2 / max(clean)``,
    Poisson-sampled, and scaled back by ``1/s``.
    """
    hist = clean if isinstance(clean, TransientHistogram) else TransientHistogram(clean)
    counts = hist.counts
    if np.any(counts < 0):
        raise ValueError("clean counts must be non-negative")
    peak = counts.max()
    if peak <= 0:
        raise ValueError("cannot set an SNR on an all-zero histogram")
    if not target_snr > 0:
        raise ValueError("target_snr must be > 0")
    scale = target_snr**2 / peak
    noisy = rng.poisson(scale * counts) / scale
    return TransientHistogram(noisy, hist.bin_width, hist.t0)


def _apply_noise(hist: TransientHistogram, noise: NoiseModel, rng) -> TransientHistogram:
    if noise.kind == "none":
        return hist
    if noise.kind == "poisson_snr":
        return apply_poisson_snr(hist, noise.target_snr, rng)
    std = hist.counts.max() / noise.target_snr
    return TransientHistogram(hist.counts + rng.normal(0.0, std, hist.n_bins), hist.bin_width, hist.t0)


def simulate_sequence(
    albedo: AlbedoGrid,
    trajectory: TrajectorySet,
    falloff: FalloffModel | None = None,
    n_bins: int = DEFAULT_N_BINS,
    noise: NoiseModel | None = None,
    *,
    bin_width: float = DEFAULT_BIN_WIDTH,
    t0: float = 0.0,
    gain: float = 1.0,
    n_jobs: int = 1,
) -> list[TransientHistogram]:
    """Render one histogram per pose and add noise.

    Each measurement draws from its own generator spawned from the noise
    seed, so results do not depend on ``n_jobs``.
    """
    if len(trajectory) == 0:
        raise ValueError("trajectory is empty")
    falloff = falloff or FalloffModel.preset("retro")
    noise = noise or NoiseModel("none")
    model = ForwardModel(albedo.geometry, falloff, n_bins, bin_width, t0, gain)
    systems = model.systems(trajectory.poses, n_jobs=n_jobs)
    clean = [render(s, albedo) for s in systems]
    if noise.kind == "none":
        return clean
    children = np.random.SeedSequence(noise.seed).spawn(len(clean))
    return [_apply_noise(h, noise, np.random.default_rng(c)) for h, c in zip(clean, children)]


def stack_histograms(histograms: Sequence[TransientHistogram]) -> np.ndarray:
    return np.stack([h.counts for h in histograms])
