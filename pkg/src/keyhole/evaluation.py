"""SSIM, disambiguated SSIM and trajectory error metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage


@dataclass(frozen=True)
class SSIMParams:
    """Local-statistics window and stabilizing constants.

    ``window`` is ``"uniform"`` (default size 8) or ``"gaussian"`` (size 11,
    ``sigma`` 1.5).
    """

    window: str = "uniform"
    size: int = 8
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03

    def __post_init__(self):
        if self.window not in ("uniform", "gaussian"):
            raise ValueError(f"unknown SSIM window {self.window!r}")
        if self.size < 1 or self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("SSIM window size and constants must be positive")

    @classmethod
    def gaussian(cls):
        return cls("gaussian", 11, 1.5)

    def kernel(self, size: int) -> np.ndarray:
        if self.window == "uniform":
            return np.full(size, 1.0 / size)
        x = np.arange(size) - (size - 1) / 2
        k = np.exp(-0.5 * (x / self.sigma) ** 2)
        return k / k.sum()


def _local_mean(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable weighted mean over all fully-contained windows of the last two axes."""
    k = kernel.size
    out = sliding_window_view(x, k, axis=-1) @ kernel
    return sliding_window_view(out, k, axis=-2) @ kernel


class _SSIMReference:
    """Precomputed statistics of the reference image for repeated comparisons."""

    def __init__(self, a: np.ndarray, params: SSIMParams, data_range: float):
        size = min(params.size, *a.shape)
        self.kernel = params.kernel(size)
        self.a = a
        self.mu_a = _local_mean(a, self.kernel)
        self.var_a = _local_mean(a * a, self.kernel) - self.mu_a * self.mu_a
        self.c1 = (params.k1 * data_range) ** 2
        self.c2 = (params.k2 * data_range) ** 2

    def score(self, b: np.ndarray) -> np.ndarray:
        """Mean SSIM of the reference against ``b`` (H x W or a batch n x H x W)."""
        mu_b = _local_mean(b, self.kernel)
        var_b = _local_mean(b * b, self.kernel) - mu_b * mu_b
        return self.combine(mu_b, var_b, _local_mean(self.a * b, self.kernel))

    def combine(self, mu_b, var_b, mean_ab) -> np.ndarray:
        """Mean SSIM from precomputed local statistics of ``b``."""
        cov = mean_ab - self.mu_a * mu_b
        num = (2 * self.mu_a * mu_b + self.c1) * (2 * cov + self.c2)
        den = (self.mu_a * self.mu_a + mu_b * mu_b + self.c1) * (self.var_a + var_b + self.c2)
        return (num / den).mean(axis=(-2, -1))


def _data_range(*images) -> float:
    hi = max(float(np.max(im)) for im in images)
    lo = min(float(np.min(im)) for im in images)
    return hi - lo if hi > lo else 1.0


def ssim(a, b, params: SSIMParams | None = None, data_range: float | None = None) -> float:
    """Mean structural similarity over sliding windows.

    ``data_range`` defaults to the joint range of both images, keeping the
    score symmetric in its arguments.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"images must be 2-D with equal shapes, got {a.shape} and {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("images must be finite")
    params = params or SSIMParams()
    if data_range is None:
        data_range = _data_range(a, b)
    return float(_SSIMReference(a, params, data_range).score(b))


def normalize_max(img) -> np.ndarray:
    img = np.asarray(img, dtype=float)
    peak = img.max() if img.size else 0.0
    return img / peak if peak > 0 else img.copy()


class RTF(NamedTuple):
    """One rotation/translation/flip; applied as flip, rotate, translate."""

    rotation: float = 0.0
    dx: int = 0
    dy: int = 0
    hflip: bool = False
    vflip: bool = False


def transform_image(img, rotation: float = 0.0, translation=(0, 0), hflip: bool = False, vflip: bool = False):
    """Flip, rotate (degrees, counter-clockwise, bilinear, zero fill) and shift.

    ``translation = (dx, dy)`` in whole pixels; +dx moves content right and
    +dy moves it down.
    """
    out = np.array(img, dtype=float)
    if hflip:
        out = out[:, ::-1]
    if vflip:
        out = out[::-1, :]
    if rotation % 360 != 0:
        out = ndimage.rotate(out, rotation, reshape=False, order=1, mode="constant", cval=0.0)
    dx, dy = (int(v) for v in translation)
    if dx or dy:
        out = _shift(out, dx, dy)
    return np.ascontiguousarray(out)


def _shift(img, dx, dy):
    h, w = img.shape
    out = np.zeros_like(img)
    if abs(dx) < w and abs(dy) < h:
        out[max(dy, 0) : h + min(dy, 0), max(dx, 0) : w + min(dx, 0)] = img[
            max(-dy, 0) : h + min(-dy, 0), max(-dx, 0) : w + min(-dx, 0)
        ]
    return out


@dataclass(frozen=True)
class DisambiguationSearch:
    """Finite set of rotations, translations and flips to search over.

    ``translation_radius=None`` spans the whole image.
    """

    rotation_step: float = 5.0
    translation_step: int = 1
    translation_radius: int | None = None
    include_hflip: bool = True
    include_vflip: bool = True
    rotations: bool = True

    def __post_init__(self):
        if not self.rotation_step > 0:
            raise ValueError("rotation_step must be > 0")
        n = 360.0 / self.rotation_step
        if abs(n - round(n)) > 1e-9:
            raise ValueError("rotation_step must divide 360")
        if self.translation_step < 1:
            raise ValueError("translation_step must be >= 1")
        if self.translation_radius is not None and self.translation_radius < 0:
            raise ValueError("translation_radius must be >= 0")

    @classmethod
    def for_plane(cls, plane: str, **kwargs) -> "DisambiguationSearch":
        """Rotations only for constant-z trajectories; flips and shifts everywhere."""
        return cls(rotations=(plane == "constant_z"), **kwargs)

    def angles(self) -> list[float]:
        if not self.rotations:
            return [0.0]
        n = int(round(360.0 / self.rotation_step))
        return [k * self.rotation_step for k in range(n)]

    def flips(self) -> list[tuple[bool, bool]]:
        hs = [False, True] if self.include_hflip else [False]
        vs = [False, True] if self.include_vflip else [False]
        return [(h, v) for h in hs for v in vs]

    def offsets(self, size: int) -> np.ndarray:
        radius = size - 1 if self.translation_radius is None else min(self.translation_radius, size - 1)
        pos = np.arange(0, radius + 1, self.translation_step)
        return np.concatenate([-pos[:0:-1], pos])

    def __iter__(self):
        """Enumerate transforms in tie-break order for an image of unknown size (radius must be set)."""
        if self.translation_radius is None:
            raise ValueError("iteration needs an explicit translation_radius")
        offs = self.offsets(self.translation_radius + 1)
        for rot in self.angles():
            for dx in offs:
                for dy in offs:
                    for h, v in self.flips():
                        yield RTF(rot, int(dx), int(dy), h, v)


def _translation_scores(ref: _SSIMReference, b: np.ndarray, dxs, dys) -> np.ndarray:
    """SSIM for every (dx, dy) shift of ``b``; result indexed [dx, dy].

    Local means of a shifted image are slices of the local means of the
    zero-padded image, so only the cross term is computed per shift.
    """
    h, w = b.shape
    dxs, dys = np.asarray(dxs), np.asarray(dys)
    ry, rx = int(np.max(np.abs(dys))), int(np.max(np.abs(dxs)))
    padded = np.zeros((h + 2 * ry, w + 2 * rx))
    padded[ry : ry + h, rx : rx + w] = b
    mu = _local_mean(padded, ref.kernel)
    sq = _local_mean(padded * padded, ref.kernel)
    win = ref.mu_a.shape
    mu_v = sliding_window_view(mu, win)
    sq_v = sliding_window_view(sq, win)
    img_v = sliding_window_view(padded, (h, w))
    rows, cols = ry - dys, rx - dxs
    # bound the batch to about 4M pixels
    chunk = max(1, (1 << 22) // (len(dxs) * h * w))
    scores = np.empty((len(dxs), len(dys)))
    for s in range(0, len(dys), chunk):
        r = rows[s : s + chunk, None]
        mu_b = mu_v[r, cols]
        var_b = sq_v[r, cols] - mu_b * mu_b
        mean_ab = _local_mean(ref.a * img_v[r, cols], ref.kernel)
        scores[:, s : s + chunk] = ref.combine(mu_b, var_b, mean_ab).T
    return scores


def disambiguated_ssim(
    truth,
    recon,
    search: DisambiguationSearch | None = None,
    params: SSIMParams | None = None,
    normalize: bool = True,
) -> tuple[float, RTF]:
    """Best SSIM between ``truth`` and any transform of ``recon`` in ``search``.

    Both images are max-normalized first (unless ``normalize=False``) and the
    dynamic range comes from the truth image.  Exact ties resolve to the
    lexicographically smallest (rotation, dx, dy, hflip, vflip).
    """
    truth = np.asarray(truth, dtype=float)
    recon = np.asarray(recon, dtype=float)
    if truth.shape != recon.shape or truth.ndim != 2:
        raise ValueError(f"images must be 2-D with equal shapes, got {truth.shape} and {recon.shape}")
    search = search or DisambiguationSearch()
    params = params or SSIMParams()
    if normalize:
        truth, recon = normalize_max(truth), normalize_max(recon)
    ref = _SSIMReference(truth, params, _data_range(truth))
    dys = search.offsets(truth.shape[0])
    dxs = search.offsets(truth.shape[1])

    best_key, best = None, None
    for rot in search.angles():
        for hflip, vflip in search.flips():
            b = transform_image(recon, rot, (0, 0), hflip, vflip)
            scores = _translation_scores(ref, b, dxs, dys)
            i, j = np.unravel_index(np.argmax(scores), scores.shape)
            cand = RTF(rot, int(dxs[i]), int(dys[j]), hflip, vflip)
            key = (-scores[i, j], cand.rotation, cand.dx, cand.dy, cand.hflip, cand.vflip)
            if best_key is None or key < best_key:
                best_key, best = key, cand
    return float(-best_key[0]), best


def apply_rtf(img, rtf: RTF) -> np.ndarray:
    return transform_image(img, rtf.rotation, (rtf.dx, rtf.dy), rtf.hflip, rtf.vflip)


def trajectory_rmse(estimated, true, allow_global_shift: bool = False) -> float:
    """RMS translation error in meters; optionally after removing the mean offset."""
    est = np.array([getattr(p, "translation", p) for p in estimated], dtype=float)
    ref = np.array([getattr(p, "translation", p) for p in true], dtype=float)
    if est.shape != ref.shape:
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(ref)}")
    err = est - ref
    if allow_global_shift:
        err = err - err.mean(axis=0)
    return float(np.sqrt(np.mean(np.sum(err * err, axis=1))))
