"""Coarse-to-fine metric scale search for a normalised object mesh.

Every candidate scale is scored by fitting a pose to the masked depth points
and measuring the one-directional chamfer distance from those points to the
posed, rescaled mesh surface. The best ``top_k`` coarse scales define an
interval that is resampled uniformly for the fine stage.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .geometry import (RigidTransform, Rotation, hat as _hat, point_mesh_distance, point_triangle_distance, so3_exp,
                       unproject, winding_number)

log = logging.getLogger(__name__)

MIN_MASK_POINTS = 50


def default_coarse_scales():
    return np.geomspace(0.3, 3.0, 28)


class PoseEstimationError(RuntimeError):
    pass


class ScaleSearchError(RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or []


@dataclass
class ScaleSearchConfig:
    coarse_scales: np.ndarray = field(default_factory=default_coarse_scales)
    top_k: int = 3
    refine_count: int = 10
    expand_lo: float = 0.8
    expand_hi: float = 1.2

    def __post_init__(self):
        c = np.asarray(self.coarse_scales, dtype=float)
        if c.ndim != 1 or len(c) == 0 or np.any(c <= 0):
            raise ValueError("coarse scales must be a non-empty list of positive values")
        if np.any(np.diff(c) <= 0):
            raise ValueError("coarse scales must be sorted ascending")
        if not 1 <= self.top_k <= len(c):
            raise ValueError("top_k must lie in [1, %d]" % len(c))
        if self.refine_count < 0:
            raise ValueError("refine_count must be >= 0")
        self.coarse_scales = c


@dataclass
class ScaleSearchResult:
    scale: float
    pose: RigidTransform
    score: float
    per_candidate_scores: list  # (stage, scale, score, failed) in evaluation order

    @property
    def n_evaluations(self):
        return len(self.per_candidate_scores)


# --------------------------------------------------------------------------
# Pose estimators
# --------------------------------------------------------------------------

def _cube_rotations():
    """The 24 proper rotations of the cube (signed permutation matrices)."""
    out = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((-1.0, 1.0), repeat=3):
            R = np.zeros((3, 3))
            for i, (j, s) in enumerate(zip(perm, signs)):
                R[i, j] = s
            if np.linalg.det(R) > 0:
                out.append(R)
    return out


def _start_rotations(offsets=True, offset_deg=45.0):
    """Cube rotations, optionally also composed with a turn of ``offset_deg``
    about x, y and z (96 starts, no orientation farther than ~48 degrees)."""
    cube = _cube_rotations()
    if not offsets:
        return cube
    offsets = [np.eye(3)] + [so3_exp(np.radians(offset_deg) * e) for e in np.eye(3)]
    return [C @ Q for Q in offsets for C in cube]


class OraclePoseEstimator:
    """Returns a fixed pose whatever the scale (test harness)."""

    def __init__(self, pose):
        self.pose = pose

    def estimate(self, mesh, depth, obj_mask, intr):
        return self.pose


class IcpPoseEstimator:
    """Multi-start ICP between masked depth and the mesh.

    Observed points are matched to model tangent planes. Model samples that
    face the camera and are not hidden by nearer samples are matched back to
    the observed points (beyond half a pixel footprint) and pushed inside the
    object mask, so an oversized mesh cannot hide the observation inside a
    larger face. Starts are 96 rotations placed behind the observed
    centroid, pruned by successive halving; the finalists are ranked on the
    exact surface distance.
    """

    def __init__(self, n_model=2000, n_obs=400, start_iters=1, coarse_iters=10, fine_iters=30, keep=3,
                 start_offsets=True, seed=0):
        self.n_model = n_model
        self.n_obs = n_obs
        self.start_iters = start_iters
        self.coarse_iters = coarse_iters
        self.fine_iters = fine_iters
        self.keep = keep
        self.start_offsets = start_offsets
        self.seed = seed

    def estimate(self, mesh, depth, obj_mask, intr):
        obs_all = unproject(depth, intr, obj_mask)
        if len(obs_all) < 3:
            raise PoseEstimationError("too few observed points")
        rng = np.random.default_rng(self.seed)
        obs = obs_all
        if len(obs) > self.n_obs:
            obs = obs[rng.choice(len(obs), self.n_obs, replace=False)]
        pts, nrm = _samples_with_normals(mesh, self.n_model, self.seed)
        obs_tree = cKDTree(obs_all)
        model_tree = cKDTree(pts)
        center = obs.mean(axis=0)
        radius = np.linalg.norm(pts - pts.mean(axis=0), axis=1).mean()
        view = center / np.linalg.norm(center)
        t0 = center + 0.5 * radius * view
        model_c = pts.mean(axis=0)
        tau = 0.5 * float(np.median(obs_all[:, 2])) / min(intr.fx, intr.fy)
        ctx = (pts, nrm, obs, obs_all, obs_tree, model_tree, intr, tau, _silhouette_field(obj_mask))
        starts = [self._iterate(R, t0 - R @ model_c, ctx, self.start_iters) for R in _start_rotations(self.start_offsets)]
        # successive halving over the starts
        for iters, keep in ((self.coarse_iters, 2 * self.keep), (self.fine_iters, self.keep)):
            starts.sort(key=lambda st: st[2])
            starts = [self._iterate(R, t, ctx, iters) for R, t, _ in starts[:keep]]
        # finalists are ranked on exact surface distance plus the backward term,
        # which is free of the sampling floor that blurs near-symmetric flips
        ranked = [(self._final_cost(mesh, R, t, ctx), i) for i, (R, t, _) in enumerate(starts)]
        R, t, _ = starts[min(ranked)[1]]
        return RigidTransform(Rotation.from_matrix(R), t)

    @staticmethod
    def _final_cost(mesh, R, t, ctx):
        pts, nrm, obs, obs_all, obs_tree, model_tree, intr, tau, sil = ctx
        fwd = point_mesh_distance((obs - t) @ R, mesh).mean()
        X = pts @ R.T + t
        vis = (np.einsum("ij,ij->i", nrm @ R.T, X) < 0) & _splat_visible(X, intr)
        if vis.sum() < 3:
            return np.inf
        bwd = np.maximum(obs_tree.query(X[vis])[0] - tau, 0.0).mean()
        return fwd + bwd + _silhouette_residual(X[vis], intr, sil)[0].mean()

    @staticmethod
    def _iterate(R, t, ctx, iters):
        """Gauss-Newton on point-to-plane (obs -> model) plus point-to-point
        (visible model -> obs) residuals; returns ``(R, t, cost)``."""
        pts, nrm, obs, obs_all, obs_tree, model_tree, intr, tau, sil = ctx
        cost = np.inf
        for it in range(iters + 1):
            X = pts @ R.T + t
            N = nrm @ R.T
            vis = (np.einsum("ij,ij->i", N, X) < 0) & _splat_visible(X, intr)
            if vis.sum() < 3:
                vis[:] = True
            # forward matches against the whole model, queried in model frame
            _, i_f = model_tree.query((obs - t) @ R)
            Xv = X[vis]
            d_b, i_b = obs_tree.query(Xv)
            plane = np.abs(np.einsum("ij,ij->i", N[i_f], X[i_f] - obs))
            # model points within a pixel footprint of the data are explained
            excess = np.maximum(d_b - tau, 0.0)
            out, J_out = _silhouette_residual(Xv, intr, sil)
            cost = 0.5 * (plane.mean() + excess.mean()) + out.mean()
            if it == iters:
                break
            c = Xv.mean(axis=0)
            # forward: n . (x + w x (x - c) + d - o)
            xf, nf = X[i_f] - c, N[i_f]
            rf = np.einsum("ij,ij->i", nf, X[i_f] - obs)
            Jf = np.hstack([np.cross(xf, nf), nf]) / np.sqrt(len(obs))
            rf = rf / np.sqrt(len(obs))
            # backward: x + w x (x - c) + d - o, three rows per point
            xb = Xv - c
            shrink = excess / np.where(d_b > 0, d_b, 1.0)
            rb = shrink[:, None] * (Xv - obs_all[i_b]) / np.sqrt(len(Xv))
            Jb = np.zeros((len(Xv), 3, 6))
            Jb[:, :, :3] = -_hat(xb)
            Jb[:, :, 3:] = np.eye(3)
            Jb *= (excess > 0)[:, None, None] / np.sqrt(len(Xv))
            # silhouette: visible model points must project into the mask
            Js = np.zeros((len(Xv), 6))
            Js[:, :3] = np.cross(xb, J_out)
            Js[:, 3:] = J_out
            Js /= np.sqrt(len(Xv))
            rs = out / np.sqrt(len(Xv))
            J = np.vstack([Jf, Jb.reshape(-1, 6), Js])
            r = np.concatenate([rf, rb.reshape(-1), rs])
            A = J.T @ J + 1e-9 * np.eye(6)
            step = -np.linalg.solve(A, J.T @ r)
            dR = so3_exp(step[:3])
            R = dR @ R
            t = dR @ (t - c) + c + step[3:]
            if np.linalg.norm(step[:3]) < 1e-7 and np.linalg.norm(step[3:]) < 1e-8:
                iters = it + 1
        return R, t, cost


def _silhouette_field(mask):
    """Pixel distance outside ``mask`` (0 inside) and its image gradient."""
    dt = ndimage.distance_transform_edt(~np.asarray(mask, dtype=bool))
    gv, gu = np.gradient(dt)
    return dt, gu, gv


def _silhouette_residual(X, intr, sil):
    """Metric distance by which points project outside the mask, and its
    gradient with respect to the points (nearest-pixel lookup)."""
    dt, gu, gv = sil
    H, W = dt.shape
    uv, ok = intr.project(X)
    u = np.clip(np.rint(uv[:, 0]).astype(np.int64), 0, W - 1)
    v = np.clip(np.rint(uv[:, 1]).astype(np.int64), 0, H - 1)
    z = np.where(ok, X[:, 2], 1.0)
    foot = z / intr.fx
    d = dt[v, u] * ok
    act = d > 0
    # d(u, v)/dX for the pinhole model, then chain through the field gradient
    g = np.zeros_like(X)
    g[:, 0] = intr.fx / z * gu[v, u]
    g[:, 1] = intr.fy / z * gv[v, u]
    g[:, 2] = -(intr.fx * X[:, 0] * gu[v, u] + intr.fy * X[:, 1] * gv[v, u]) / z**2
    g *= (act * foot)[:, None]
    return d * foot, g


def _splat_visible(X, intr, cell=4, tol=0.01):
    """Samples not hidden behind a nearer sample in the same ``cell``-pixel bin."""
    uv, ok = intr.project(X)
    z = X[:, 2]
    H = int(np.ceil(intr.height / cell)) + 2
    W = int(np.ceil(intr.width / cell)) + 2
    cu = np.clip(np.floor(uv[:, 0] / cell).astype(np.int64) + 1, 0, W - 1)
    cv = np.clip(np.floor(uv[:, 1] / cell).astype(np.int64) + 1, 0, H - 1)
    key = cv * W + cu
    zbuf = np.full(H * W, np.inf)
    np.minimum.at(zbuf, key[ok], z[ok])
    return ok & (z <= zbuf[key] + tol)


def _samples_with_normals(mesh, n, seed):
    areas = mesh.face_areas()
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.triangles[face]
    pts = (1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1] + (r1 * r2)[:, None] * tri[:, 2]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    fn /= np.linalg.norm(fn, axis=1, keepdims=True)
    # faces are wound counter-clockwise seen from outside; a mesh with
    # negative signed volume is wound the other way round
    v = mesh.triangles
    if np.sum(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2]))) < 0:
        fn = -fn
    # surface buried inside another part (overlapping components) is never
    # observed and would bias the backward matches
    eps = 1e-4 * np.linalg.norm(np.ptp(mesh.vertices, axis=0))
    outside = np.abs(winding_number(pts + eps * fn, mesh)) < 0.5
    return pts[outside], fn[outside]


# --------------------------------------------------------------------------
# Search
# --------------------------------------------------------------------------

def _masked_points(depth, obj_mask, intr):
    pts = unproject(depth, intr, obj_mask)
    if len(pts) < MIN_MASK_POINTS:
        raise ValueError("object mask has %d valid depth pixels (need %d)" % (len(pts), MIN_MASK_POINTS))
    return pts


class SurfaceIndex:
    """Point-to-surface distances for a mesh at any scale and pose.

    Queries are mapped into the unit mesh frame. The nearest ``k`` surface
    samples nominate candidate faces and the exact point-triangle distance to
    those faces is returned, which removes the sampling floor a pure
    nearest-sample distance would add to every score.
    """

    def __init__(self, mesh, n_surface=20_000, seed=0, k=8):
        rng = np.random.default_rng(seed)
        areas = mesh.face_areas()
        self.mesh = mesh
        self.face_of_sample = rng.choice(len(areas), size=n_surface, p=areas / areas.sum())
        r1 = np.sqrt(rng.random(n_surface))
        r2 = rng.random(n_surface)
        tri = mesh.triangles[self.face_of_sample]
        self.points = ((1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1]
                       + (r1 * r2)[:, None] * tri[:, 2])
        self.tree = cKDTree(self.points)
        self.k = min(k, n_surface)

    def distances(self, query, scale, pose):
        local = pose.rotation.inv().apply(np.asarray(query, dtype=float) - pose.translation) / scale
        _, idx = self.tree.query(local, k=self.k)
        idx = idx.reshape(len(local), -1)
        tri = self.mesh.triangles[self.face_of_sample[idx]]
        d = point_triangle_distance(local[:, None, :], tri[..., 0, :], tri[..., 1, :], tri[..., 2, :])
        return d.min(axis=1) * scale


def score_scale(mesh, scale, estimator, depth, obj_mask, intr, n_surface=20_000, seed=0, index=None):
    """Fit a pose at ``scale`` and return ``(pose, score, failed)``.

    ``score`` is the mean distance (meters) from the masked depth points to
    the posed surface; estimator failures give ``(None, inf, True)``.
    """
    obs = _masked_points(depth, obj_mask, intr)
    try:
        pose = estimator.estimate(mesh.scaled(scale), depth, obj_mask, intr)
    except Exception as exc:  # estimator is pluggable; any failure is a scored miss
        log.debug("estimator failed at scale %.4g: %s", scale, exc)
        return None, float("inf"), True
    index = index or SurfaceIndex(mesh, n_surface, seed)
    return pose, float(index.distances(obs, scale, pose).mean()), False


def refine_scales(coarse_scales, coarse_scores, config):
    """Fine-stage candidates: ``refine_count`` evenly spaced scales strictly
    inside ``(expand_lo * s_min, expand_hi * s_max)`` of the ``top_k`` coarse
    winners (the interval is split into ``refine_count + 1`` equal parts)."""
    order = np.argsort(np.asarray(coarse_scores), kind="stable")[: config.top_k]
    top = np.asarray(coarse_scales)[order]
    lo = config.expand_lo * top.min()
    hi = config.expand_hi * top.max()
    return np.linspace(lo, hi, config.refine_count + 2)[1:-1]


def estimate_scale(mesh, depth, obj_mask, intr, config=None, estimator=None, n_surface=20_000, seed=0):
    config = config or ScaleSearchConfig()
    estimator = estimator or IcpPoseEstimator(seed=seed)
    _masked_points(depth, obj_mask, intr)
    index = SurfaceIndex(mesh, n_surface, seed)
    records = []

    def run(stage, s):
        pose, sc, failed = score_scale(mesh, s, estimator, depth, obj_mask, intr, index=index)
        records.append((stage, float(s), sc, failed, pose))
        return sc

    coarse = [run("coarse", s) for s in config.coarse_scales]
    if all(np.isinf(coarse)):
        raise ScaleSearchError("pose estimation failed for every coarse scale",
                               [(r[0], r[1], r[2], r[3]) for r in records])
    for s in refine_scales(config.coarse_scales, coarse, config):
        run("refine", s)
    scores = np.array([r[2] for r in records])
    best = int(np.argmin(scores))
    stage, s, sc, _, pose = records[best]
    log.info("scale search: best scale %.4f (%s), score %.4g m", s, stage, sc)
    return ScaleSearchResult(scale=s, pose=pose, score=sc,
                             per_candidate_scores=[(r[0], r[1], r[2], r[3]) for r in records])


class ScaleSearch(BaseEstimator):
    """Estimate the metric scale (meters per mesh unit) of an object mesh.

    ``fit(mesh, depth, obj_mask, intrinsics)`` stores ``scale_``, ``pose_``,
    ``score_`` and ``result_``; ``transform(mesh)`` returns the rescaled mesh.
    """

    def __init__(self, coarse_scales=None, top_k=3, refine_count=10, expand_lo=0.8, expand_hi=1.2,
                 estimator=None, n_surface=20_000, seed=0):
        self.coarse_scales = coarse_scales
        self.top_k = top_k
        self.refine_count = refine_count
        self.expand_lo = expand_lo
        self.expand_hi = expand_hi
        self.estimator = estimator
        self.n_surface = n_surface
        self.seed = seed

    def _config(self):
        coarse = default_coarse_scales() if self.coarse_scales is None else self.coarse_scales
        return ScaleSearchConfig(coarse, self.top_k, self.refine_count, self.expand_lo, self.expand_hi)

    def fit(self, mesh, depth, obj_mask, intrinsics):
        self.result_ = estimate_scale(mesh, depth, obj_mask, intrinsics, self._config(),
                                      self.estimator, self.n_surface, self.seed)
        self.scale_ = self.result_.scale
        self.pose_ = self.result_.pose
        self.score_ = self.result_.score
        return self

    def transform(self, mesh):
        check_is_fitted(self, "result_")
        return mesh.scaled(self.scale_)
