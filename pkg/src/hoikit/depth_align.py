"""Robust scale/shift depth alignment and human-to-scene scale/z alignment."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_depth, check_mask, check_points

log = logging.getLogger(__name__)

MIN_ALIGN_PIXELS = 100


class DegenerateAlignmentError(ValueError):
    pass


@dataclass
class AlignmentParams:
    s: float
    t: float
    stats: dict = field(default_factory=dict)

    def apply(self, depth):
        depth = np.asarray(depth, dtype=float)
        valid = np.isfinite(depth) & (depth > 0)
        return np.where(valid, self.s * depth + self.t, 0.0)


@dataclass
class HumanAlignment:
    scale: float
    delta_z: float
    iterations: int
    final_residual: float
    residuals: list = field(default_factory=list)

    def apply(self, points):
        """Scale about the camera center, then shift along the optical axis."""
        p = self.scale * np.asarray(points, dtype=float)
        p[:, 2] += self.delta_z
        return p


def _disk(radius):
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx**2 + yy**2 <= r * r


def erode_mask(mask, radius):
    mask = np.asarray(mask, dtype=bool)
    if radius <= 0:
        return mask.copy()
    return ndimage.binary_erosion(mask, structure=_disk(radius), border_value=0)


def bilateral_depth(depth, valid, sigma_space=3.0, sigma_range=0.1, radius=None):
    """Edge-preserving smoothing over valid pixels only.

    The range kernel compares each neighbor with the median of the valid
    pixels in the 3x3 neighborhood of the center rather than with the center
    value itself, so isolated spikes are pulled toward their surroundings
    instead of being preserved.
    """
    depth = np.asarray(depth, dtype=float)
    valid = np.asarray(valid, dtype=bool) & np.isfinite(depth) & (depth > 0)
    if radius is None:
        radius = max(1, int(np.ceil(2 * sigma_space)))  # circular window
    d = np.where(valid, depth, np.nan)
    ref = np.where(valid, _nan_median3(d), 0.0)
    H, W = d.shape
    vals = np.pad(np.where(valid, depth, 0.0), radius)
    ok = np.pad(valid, radius)
    num = np.zeros((H, W))
    den = np.zeros((H, W))
    inv_s = 1.0 / (2.0 * sigma_space**2)
    inv_r = 1.0 / (2.0 * sigma_range**2)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dx * dx + dy * dy > radius * radius:
                continue
            ws = np.exp(-(dx * dx + dy * dy) * inv_s)
            win = (slice(radius + dy, radius + dy + H), slice(radius + dx, radius + dx + W))
            nb = vals[win]
            diff = (nb - ref).astype(np.float32)
            w = np.exp(diff * diff * np.float32(-inv_r))
            w *= np.float32(ws)
            w *= ok[win]
            num += w * nb
            den += w
    out = np.where(valid & (den > 0), num / np.where(den > 0, den, 1.0), 0.0)
    # a pixel whose neighborhood underflowed entirely keeps its value
    stuck = valid & (den <= 0)
    out[stuck] = depth[stuck]
    return out


def _nan_median3(d):
    """Median of the finite values in each 3x3 window (NaN = missing)."""
    H, W = d.shape
    pad = np.pad(d, 1, constant_values=np.nan)
    stack = np.stack([pad[1 + dy:1 + dy + H, 1 + dx:1 + dx + W]
                      for dy in (-1, 0, 1) for dx in (-1, 0, 1)])
    stack.sort(axis=0)  # NaNs sort last
    n = np.sum(np.isfinite(stack), axis=0)
    lo = np.take_along_axis(stack, np.maximum(n - 1, 0)[None] // 2, axis=0)[0]
    hi = np.take_along_axis(stack, (n // 2)[None], axis=0)[0]
    med = 0.5 * (lo + hi)
    return np.where(np.isfinite(d) & (n > 0), med, np.nan)


def preprocess_depth(depth, mask, erosion_radius=2, sigma_space=3.0, sigma_range=0.1):
    """Erode ``mask`` and bilateral-filter ``depth`` inside it.

    Returns ``(filtered_depth, eroded_mask)``; pixels outside the eroded mask
    or invalid on input are 0 in the output.
    """
    depth = check_depth(depth)
    mask = check_mask(mask, depth.shape)
    eroded = erode_mask(mask, erosion_radius)
    valid = eroded & np.isfinite(depth) & (depth > 0)
    return bilateral_depth(depth, valid, sigma_space, sigma_range), eroded


def robust_scale_shift(pred, ref, mask):
    """Median / mean-absolute-deviation scale and shift so ``s*pred + t ~ ref``."""
    pred = check_depth(pred, "pred")
    ref = check_depth(ref, "ref")
    if pred.shape != ref.shape:
        raise ValueError("pred %s and ref %s shapes differ" % (pred.shape, ref.shape))
    mask = check_mask(mask, pred.shape)
    sel = (mask & np.isfinite(pred) & (pred > 0) & np.isfinite(ref) & (ref > 0)).ravel()
    n = int(sel.sum())
    if n < MIN_ALIGN_PIXELS:
        raise ValueError("only %d jointly valid masked pixels (need %d)" % (n, MIN_ALIGN_PIXELS))
    p = pred.ravel()[sel]
    g = ref.ravel()[sel]
    m_pr = float(np.median(p))
    m_gt = float(np.median(g))
    s_pr = float(np.mean(np.abs(p - m_pr)))
    s_gt = float(np.mean(np.abs(g - m_gt)))
    if s_pr == 0.0:
        raise DegenerateAlignmentError("predicted depth is constant over the mask")
    s = s_gt / s_pr
    if not s > 0:
        raise DegenerateAlignmentError("non-positive scale %g" % s)
    t = m_gt - s * m_pr
    stats = {"m_pr": m_pr, "m_gt": m_gt, "s_hat_pr": s_pr, "s_hat_gt": s_gt, "pixel_count": n}
    return AlignmentParams(s=s, t=t, stats=stats)


def _fit_scale_z(h, y):
    """Least squares for ``min sum ||s*h + dz*e_z - y||^2``."""
    A11 = np.sum(h * h)
    A12 = np.sum(h[:, 2])
    A22 = float(len(h))
    b1 = np.sum(h * y)
    b2 = np.sum(y[:, 2])
    det = A11 * A22 - A12 * A12
    if abs(det) < 1e-18:
        return 1.0, 0.0
    s = (b1 * A22 - A12 * b2) / det
    dz = (A11 * b2 - A12 * b1) / det
    return float(s), float(dz)


def _icp_scale_z(h0, scene, tree, s, dz, max_iters, tol):
    def residual(s_, dz_):
        cur = s_ * h0
        cur[:, 2] += dz_
        d, idx = tree.query(cur)
        return float(np.mean(d**2)), idx

    res, idx = residual(s, dz)
    trace = [res]
    it = 0
    for it in range(1, max_iters + 1):
        s_new, dz_new = _fit_scale_z(h0, scene[idx])
        res_new, idx_new = residual(s_new, dz_new)
        if res_new > res:
            it -= 1
            break
        improvement = res - res_new
        s, dz, res, idx = s_new, dz_new, res_new, idx_new
        trace.append(res)
        if improvement < tol:
            break
    return s, dz, it, res, trace


START_FACTORS = (1.0, 0.8, 0.9, 1.1, 1.25)


def align_human_scale_z(human_points, scene_points, max_iters=50, tol=1e-8):
    """ICP over a global scale (about the camera center) and a z shift.

    Each iteration matches every current human point to its nearest scene
    point, then solves the two-parameter least squares in closed form. The
    accepted update never increases the residual. Nearest-neighbor ICP on a
    free scale drifts towards shrinking, so the scale is started at the ratio
    of median depths and a few nearby starts are tried; the run with the
    lowest final residual is returned.
    """
    h0 = check_points(human_points, "human_points", nonempty=True)
    scene = check_points(scene_points, "scene_points", nonempty=True)
    tree = cKDTree(scene)
    zh, zs = np.median(h0[:, 2]), np.median(scene[:, 2])
    s0 = zs / zh if zh > 0 and zs > 0 else 1.0
    best = None
    for f in START_FACTORS:
        run = _icp_scale_z(h0, scene, tree, s0 * f, 0.0, max_iters, tol)
        if best is None or run[3] < best[3]:
            best = run
    s, dz, it, res, trace = best
    return HumanAlignment(scale=s, delta_z=dz, iterations=it, final_residual=float(np.sqrt(res)),
                          residuals=trace)


class DepthAligner(BaseEstimator):
    """Scale/shift alignment of a predicted depth map to a reference map.

    Parameters
    ----------
    erosion_radius : int
        Mask erosion in pixels before statistics are taken.
    sigma_space, sigma_range : float
        Bilateral kernel widths (pixels, meters).
    preprocess : bool
        Apply erosion + bilateral filtering to both maps before fitting.
    """

    def __init__(self, erosion_radius=2, sigma_space=3.0, sigma_range=0.1, preprocess=True):
        self.erosion_radius = erosion_radius
        self.sigma_space = sigma_space
        self.sigma_range = sigma_range
        self.preprocess = preprocess

    def fit(self, pred, ref, mask):
        pred = check_depth(pred, "pred")
        ref = check_depth(ref, "ref")
        mask = check_mask(mask, pred.shape)
        if self.preprocess:
            pred, eroded = preprocess_depth(pred, mask, self.erosion_radius, self.sigma_space, self.sigma_range)
            ref, _ = preprocess_depth(ref, mask, self.erosion_radius, self.sigma_space, self.sigma_range)
            mask = eroded
        self.params_ = robust_scale_shift(pred, ref, mask)
        self.scale_ = self.params_.s
        self.shift_ = self.params_.t
        log.debug("depth alignment s=%.6g t=%.6g over %d px", self.scale_, self.shift_,
                  self.params_.stats["pixel_count"])
        return self

    def transform(self, pred):
        check_is_fitted(self, "params_")
        return self.params_.apply(check_depth(pred, "pred"))

    def fit_transform(self, pred, ref, mask):
        return self.fit(pred, ref, mask).transform(pred)


class HumanDepthAligner(BaseEstimator):
    """Scale/z alignment of a predicted human point set to scene depth points."""

    def __init__(self, max_iters=50, tol=1e-8):
        self.max_iters = max_iters
        self.tol = tol

    def fit(self, human_points, scene_points):
        self.alignment_ = align_human_scale_z(human_points, scene_points, self.max_iters, self.tol)
        self.scale_ = self.alignment_.scale
        self.delta_z_ = self.alignment_.delta_z
        return self

    def transform(self, human_points):
        check_is_fitted(self, "alignment_")
        return self.alignment_.apply(check_points(human_points, "human_points"))
