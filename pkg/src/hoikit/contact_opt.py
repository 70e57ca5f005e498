"""Contact-aware joint optimisation of human and object trajectories.

The objective is a weighted sum of five terms: hand-object contact distance,
2D joint reprojection, an occlusion-aware object silhouette term,
body-object penetration and acceleration (human joints and object pose,
weighted separately). All gradients are analytic.

Free variables per frame are the body's local joint rotations, its root
translation, the object rotation and translation. Rotations are updated by
left-multiplying an axis-angle increment expressed in the parent frame, so
the optimiser always works on unconstrained 3-vectors.

The silhouette term is a point-projection surrogate of a rendered-mask
loss. Object surface samples that project outside the region covered by the
object or the human mask are pulled back in using a signed distance field of
that region, and sampled pixels of the non-occluded object mask that no
projection comes near are pulled towards their nearest projection. Pixels
covered by the human are excluded from both parts.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .body_model import BodyState, capsule_endpoints, fk_batch, segment_distance
from .geometry import RigidTransform, Rotation, sample_surface, so3_exp, so3_left_jacobian_inv, so3_log, \
    so3_right_jacobian_inv

log = logging.getLogger(__name__)

TERMS = ("contact", "j2d", "mask", "penetration", "acc_human", "acc_object")


class OptimizationError(RuntimeError):
    pass


@dataclass
class LossWeights:
    lambda_c: float = 200.0
    lambda_j2d: float = 0.03
    lambda_m: float = 0.002
    lambda_pen: float = 2.0
    lambda_acc_human: float = 600.0
    lambda_acc_object: float = 1000.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError("%s must be >= 0" % k)

    def for_term(self, term):
        return {
            "contact": self.lambda_c, "j2d": self.lambda_j2d, "mask": self.lambda_m,
            "penetration": self.lambda_pen, "acc_human": self.lambda_acc_human,
            "acc_object": self.lambda_acc_object,
        }[term]


@dataclass
class OptimizerConfig:
    steps: int = 3000
    lr_start: float = 1e-3
    penetration_active_last: int = 1200
    penetration_samples: int = 6000
    mask_samples: int = 1000
    coverage_samples: int = 128
    coverage_targets: int = 64
    coverage_radius_px: float = 3.0
    object_rotation_accel: bool = True
    contact_fallback_radius: float = 0.08
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if not 0 <= self.penetration_active_last <= self.steps:
            raise ValueError("penetration_active_last must lie in [0, steps]")

    def penetration_active(self, step):
        return step >= self.steps - self.penetration_active_last


@dataclass
class TrajectoryState:
    body_rotations: np.ndarray  # (N, J, 3, 3) local joint rotations
    body_translations: np.ndarray  # (N, 3)
    object_rotations: np.ndarray  # (N, 3, 3)
    object_translations: np.ndarray  # (N, 3)
    betas: list = field(default_factory=list)

    def __post_init__(self):
        self.body_rotations = np.asarray(self.body_rotations, dtype=float)
        self.body_translations = np.asarray(self.body_translations, dtype=float).reshape(-1, 3)
        self.object_rotations = np.asarray(self.object_rotations, dtype=float).reshape(-1, 3, 3)
        self.object_translations = np.asarray(self.object_translations, dtype=float).reshape(-1, 3)
        n = len(self.body_rotations)
        if not (len(self.body_translations) == len(self.object_rotations) == len(self.object_translations) == n):
            raise ValueError("trajectory arrays disagree on frame count")

    @property
    def n_frames(self):
        return len(self.body_rotations)

    def copy(self):
        return TrajectoryState(self.body_rotations.copy(), self.body_translations.copy(),
                               self.object_rotations.copy(), self.object_translations.copy(), list(self.betas))

    def body_state(self, i):
        return BodyState(self.body_rotations[i], self.body_translations[i], self.betas)

    def object_pose(self, i):
        return RigidTransform(Rotation.from_matrix(self.object_rotations[i]), self.object_translations[i])


@dataclass
class OptObservations:
    """Per-frame evidence; any missing piece disables its loss term."""

    intrinsics: object
    joints2d: np.ndarray = None  # (N, J, 2) pixels
    joints2d_conf: np.ndarray = None  # (N, J)
    obj_masks: np.ndarray = None  # (N, H, W) bool
    human_masks: np.ndarray = None  # (N, H, W) bool


@dataclass
class OptimizationResult:
    state: TrajectoryState
    trace: dict
    contacts: np.ndarray
    contact_source: str
    seconds: float = 0.0


# --------------------------------------------------------------------------
# Term kernels: each returns the raw value and gradients with respect to
# joint positions, capsule endpoints and object increments / translations.
# --------------------------------------------------------------------------

class _Grad:
    def __init__(self, N, J, C):
        self.P = np.zeros((N, J, 3))
        self.cap_a = np.zeros((N, C, 3))
        self.cap_b = np.zeros((N, C, 3))
        self.obj_w = np.zeros((N, 3))
        self.obj_t = np.zeros((N, 3))

    def add_object_points(self, X, t, g):
        """Accumulate gradients ``g`` on posed object points ``X`` of shape (N, ..., 3)."""
        N = len(t)
        r = (X - t.reshape((N,) + (1,) * (X.ndim - 2) + (3,))).reshape(N, -1, 3)
        g = g.reshape(N, -1, 3)
        self.obj_t += g.sum(axis=1)
        # sum_m r_m x g_m from the antisymmetric part of sum_m r_m g_m^T
        M = np.matmul(np.swapaxes(r, 1, 2), g)
        self.obj_w += np.stack([M[:, 1, 2] - M[:, 2, 1], M[:, 2, 0] - M[:, 0, 2], M[:, 0, 1] - M[:, 1, 0]], axis=1)


def _contact_kernel(P, hand_ids, R, t, local_pts, tree, contacts, grad=None):
    H = P[:, list(hand_ids), :]  # (N, 2, 3)
    local = np.einsum("nji,nhj->nhi", R, H - t[:, None, :])
    _, idx = tree.query(local.reshape(-1, 3))
    y = local_pts[idx].reshape(local.shape)
    X = np.einsum("nij,nhj->nhi", R, y) + t[:, None, :]
    diff = H - X
    d = np.linalg.norm(diff, axis=-1)
    c = np.asarray(contacts, dtype=float)
    val = float(np.sum(c * d))
    if grad is not None:
        # zero subgradient once a hand sits on the surface
        u = np.where((d > 1e-9)[..., None], diff / np.where(d > 0, d, 1.0)[..., None], 0.0)
        gH = c[..., None] * u
        grad.P[:, list(hand_ids), :] += gH
        grad.add_object_points(X, t, -gH)
    return val, d


def _project_grad(X, intr):
    """uv, valid and the 2x3 Jacobian blocks of the pinhole projection."""
    Z = X[..., 2]
    valid = Z > 1e-6
    Zs = np.where(valid, Z, 1.0)
    u = intr.fx * X[..., 0] / Zs + intr.cx
    v = intr.fy * X[..., 1] / Zs + intr.cy
    du = np.stack([intr.fx / Zs, np.zeros_like(Zs), -intr.fx * X[..., 0] / Zs**2], axis=-1)
    dv = np.stack([np.zeros_like(Zs), intr.fy / Zs, -intr.fy * X[..., 1] / Zs**2], axis=-1)
    return np.stack([u, v], axis=-1), valid, du, dv


def _j2d_kernel(P, intr, det, conf, grad=None):
    uv, valid, du, dv = _project_grad(P, intr)
    w = np.asarray(conf, dtype=float) * valid
    r = uv - det
    val = float(np.sum(w * np.sum(r * r, axis=-1)))
    if grad is not None:
        g_uv = 2.0 * w[..., None] * r
        grad.P += g_uv[..., 0:1] * du + g_uv[..., 1:2] * dv
    return val


def _bilinear(fields, n_idx, u, v):
    """Bilinear lookup in ``fields[n]`` at continuous pixel coords, with gradient."""
    N, H, W = fields.shape
    uc = np.clip(u, 0.0, W - 1.0)
    vc = np.clip(v, 0.0, H - 1.0)
    u0 = np.minimum(uc.astype(np.intp), W - 2)  # truncation is floor for uc >= 0
    v0 = np.minimum(vc.astype(np.intp), H - 2)
    a = uc - u0
    b = vc - v0
    base = (n_idx * H + v0) * W + u0
    flat = fields.reshape(-1)
    f00 = flat[base]
    dx0 = flat[base + 1] - f00
    f10 = flat[base + W]
    dx1 = flat[base + W + 1] - f10
    top = f00 + a * dx0
    gv = f10 + a * dx1 - top
    val = top + b * gv
    gu = dx0 + b * (dx1 - dx0)
    # outside the image the field continues with unit slope away from it
    ou = u - uc
    ov = v - vc
    out = (ou != 0) | (ov != 0)
    if out.any():
        du, dv = ou[out], ov[out]
        dist = np.hypot(du, dv)
        val[out] += dist
        gu[out] = np.where(du == 0, gu[out], du / dist)
        gv[out] = np.where(dv == 0, gv[out], dv / dist)
    return val, gu, gv


def silhouette_field(obj_mask, human_mask):
    """Signed pixel distance to the region covered by object or human.

    Negative inside, positive outside, zero half-way between boundary pixel
    centers.
    """
    allowed = np.asarray(obj_mask, bool) | np.asarray(human_mask, bool)
    if not allowed.any():
        H, W = allowed.shape
        return np.full((H, W), float(H + W))
    out = ndimage.distance_transform_edt(~allowed)
    inside = ndimage.distance_transform_edt(allowed)
    return np.where(allowed, -(inside - 0.5), out - 0.5)


def coverage_targets(obj_mask, human_mask, n, rng):
    """Up to ``n`` random pixels of the non-occluded object mask, as (u, v)."""
    target = np.asarray(obj_mask, bool) & ~np.asarray(human_mask, bool)
    v, u = np.nonzero(target)
    pts = np.stack([u, v], axis=1).astype(float)
    if len(pts) > n:
        pts = pts[rng.choice(len(pts), n, replace=False)]
    return pts


def coverage_radius(obj_mask, human_mask, n_cover, base=3.0):
    """Pixel radius within which a target pixel counts as covered.

    Twice the expected spacing of ``n_cover`` surface samples, about half of
    them visible, spread over the non-occluded object mask; never below
    ``base``.
    """
    area = np.count_nonzero(np.asarray(obj_mask, bool) & ~np.asarray(human_mask, bool))
    if area == 0 or n_cover < 2:
        return float(base)
    return max(float(base), 2.0 * np.sqrt(area / (0.5 * n_cover)))


def _mask_kernel(R, t, samples, cover_samples, fields, targets, target_valid, intr, radius, grad=None):
    N = len(R)
    X = np.matmul(samples, np.swapaxes(R, 1, 2)) + t[:, None, :]
    Z = X[..., 2]
    valid = Z > 1e-6
    iz = 1.0 / np.where(valid, Z, 1.0)
    u = intr.fx * X[..., 0] * iz + intr.cx
    v = intr.fy * X[..., 1] * iz + intr.cy
    n_idx = np.arange(N)[:, None]
    s, gu, gv = _bilinear(fields, n_idx, u, v)
    # the true silhouette edge can lie anywhere up to the first uncovered
    # pixel center, where the field reads 0.5
    pos = np.where(valid, np.maximum(s - 0.5, 0.0), 0.0)
    cnt = np.maximum(valid.sum(axis=1), 1)
    per_frame = np.einsum("nm,nm->n", pos, pos) / cnt
    if grad is not None:
        coef = 2.0 * pos / cnt[:, None]
        g_u, g_v = coef * gu, coef * gv
    # coverage: target pixels far from every projected coverage sample
    if targets.shape[1] > 0:
        Mc = len(cover_samples)
        uvc = np.stack([u[:, :Mc], v[:, :Mc]], axis=-1)
        cc = np.einsum("nmk,nmk->nm", uvc, uvc)
        cc = np.where(valid[:, :Mc], cc, np.inf)
        tt = np.einsum("ntk,ntk->nt", targets, targets)
        d2 = cc[:, None, :] - 2.0 * np.matmul(targets, np.swapaxes(uvc, 1, 2))  # (N, T, Mc) minus |p|^2
        k = np.argmin(d2, axis=2)  # (N, T)
        vec = targets - np.take_along_axis(uvc, k[..., None], axis=1)  # (N, T, 2)
        found = np.isfinite(np.take_along_axis(d2, k[..., None], axis=2)[..., 0] + tt)
        dmin = np.sqrt(np.einsum("ntk,ntk->nt", vec, vec))
        has = target_valid & found
        radius = np.broadcast_to(np.asarray(radius, dtype=float), (N,))[:, None]
        deficit = np.where(has, np.maximum(dmin - radius, 0.0), 0.0)
        tcnt = np.maximum(target_valid.sum(axis=1), 1)
        per_frame += np.einsum("nt,nt->n", deficit, deficit) / tcnt
        if grad is not None:
            # d/d(uv_k) of (|p - uv_k| - r)^2 = -2 (d - r) (p - uv_k) / d
            c = -2.0 * deficit / np.where(dmin > 0, dmin, 1.0) / tcnt[:, None]
            flat = (np.arange(N)[:, None] * u.shape[1] + k).reshape(-1)
            g_u.reshape(-1)[:] += np.bincount(flat, (c * vec[..., 0]).reshape(-1), u.size)
            g_v.reshape(-1)[:] += np.bincount(flat, (c * vec[..., 1]).reshape(-1), u.size)
    if grad is not None:
        g_u = np.where(valid, g_u, 0.0) * intr.fx * iz
        g_v = np.where(valid, g_v, 0.0) * intr.fy * iz
        gX = np.stack([g_u, g_v, -(g_u * X[..., 0] + g_v * X[..., 1]) * iz], axis=-1)
        grad.add_object_points(X, t, gX)
    return float(per_frame.sum()), per_frame


def _pen_kernel(R, t, samples, cap_a, cap_b, radii, grad=None, tree=None):
    """Sum of squared penetration depths of object samples into capsules.

    Capsules are moved into the object frame and only samples inside each
    capsule's bounding ball are tested. A sample inside several capsules
    counts once, with its deepest penetration.
    """
    N, C = cap_a.shape[:2]
    tree = tree if tree is not None else cKDTree(samples)
    center_local = samples.mean(axis=0)
    rho = np.max(np.linalg.norm(samples - center_local, axis=1))
    centers = np.einsum("nij,j->ni", R, center_local) + t
    dc, _, _ = segment_distance(centers[:, None, :], cap_a, cap_b)
    fr, cp = np.nonzero(dc < rho + radii[None, :])
    if len(fr) == 0:
        return 0.0, 0.0
    # capsule endpoints in object coordinates: R^T (x - t)
    aL = np.einsum("pji,pj->pi", R[fr], cap_a[fr, cp] - t[fr])
    bL = np.einsum("pji,pj->pi", R[fr], cap_b[fr, cp] - t[fr])
    ball = tree.query_ball_point(0.5 * (aL + bL), 0.5 * np.linalg.norm(bL - aL, axis=1) + radii[cp])
    counts = np.fromiter((len(x) for x in ball), dtype=int, count=len(ball))
    if counts.sum() == 0:
        return 0.0, 0.0
    pair = np.repeat(np.arange(len(fr)), counts)
    idx = np.concatenate([np.asarray(x, dtype=int) for x in ball])
    d, sp, nrm = segment_distance(samples[idx], aL[pair], bL[pair])
    sd = d - radii[cp[pair]]
    inside = sd < 0
    if not inside.any():
        return 0.0, 0.0
    pair, idx, sd, sp, nrm = pair[inside], idx[inside], sd[inside], sp[inside], nrm[inside]
    f = fr[pair]
    order = np.lexsort((sd, idx, f))
    keep = order[np.r_[True, (np.diff(f[order]) != 0) | (np.diff(idx[order]) != 0)]]
    pair, idx, sd, sp, nrm, f = pair[keep], idx[keep], sd[keep], sp[keep], nrm[keep], f[keep]
    total = float(np.sum(sd * sd))
    depth_max = float(-sd.min())
    if grad is not None:
        # d sd / dX = n ; d sd / da = -(1-s) n ; d sd / db = -s n  (world frame)
        n_w = np.einsum("pij,pj->pi", R[f], nrm)
        gX = (2.0 * sd)[:, None] * n_w
        r_w = np.einsum("pij,pj->pi", R[f], samples[idx])
        np.add.at(grad.obj_t, f, gX)
        np.add.at(grad.obj_w, f, np.cross(r_w, gX))
        cidx = cp[pair]
        np.add.at(grad.cap_a, (f, cidx), -(1.0 - sp)[:, None] * gX)
        np.add.at(grad.cap_b, (f, cidx), -sp[:, None] * gX)
    return total, depth_max


def _accel_kernel(P, obj_R, obj_t, use_rotation, grad=None):
    ap = P[2:] - 2.0 * P[1:-1] + P[:-2]
    human = float(np.sum(ap * ap))
    at = obj_t[2:] - 2.0 * obj_t[1:-1] + obj_t[:-2]
    obj = float(np.sum(at * at))
    if grad is not None:
        grad.P[2:] += 2.0 * ap
        grad.P[1:-1] += -4.0 * ap
        grad.P[:-2] += 2.0 * ap
        grad.obj_t[2:] += 2.0 * at
        grad.obj_t[1:-1] += -4.0 * at
        grad.obj_t[:-2] += 2.0 * at
    if use_rotation:
        phi = so3_log(obj_R[1:] @ np.transpose(obj_R[:-1], (0, 2, 1)))  # (N-1, 3)
        b = phi[1:] - phi[:-1]
        obj += float(np.sum(b * b))
        if grad is not None:
            g_phi = np.zeros_like(phi)
            g_phi[1:] += 2.0 * b
            g_phi[:-1] -= 2.0 * b
            Jl = so3_left_jacobian_inv(phi)
            Jr = so3_right_jacobian_inv(phi)
            grad.obj_w[1:] += np.einsum("nij,ni->nj", Jl, g_phi)
            grad.obj_w[:-1] -= np.einsum("nij,ni->nj", Jr, g_phi)
    return human, obj


def _body_grad(skel, G, P, cap_a, cap_b, grad):
    """Map joint-position and capsule-endpoint gradients to body increments."""
    f = grad.P.copy()
    tau = np.cross(P, grad.P)
    bones = skel.capsule_bones
    for c in range(skel.n_capsules):
        k = bones[c]
        f[:, k] += grad.cap_a[:, c] + grad.cap_b[:, c]
        tau[:, k] += np.cross(cap_a[:, c], grad.cap_a[:, c]) + np.cross(cap_b[:, c], grad.cap_b[:, c])
    for j in range(skel.n_joints - 1, 0, -1):
        p = skel.parents[j]
        f[:, p] += f[:, j]
        tau[:, p] += tau[:, j]
    world = tau - np.cross(P, f)
    gw = np.empty_like(world)
    gw[:, 0] = world[:, 0]
    par = skel.parents[1:]
    gw[:, 1:] = np.einsum("njik,nji->njk", G[:, par], world[:, 1:])
    return gw, f[:, 0]


# --------------------------------------------------------------------------
# Problem assembly
# --------------------------------------------------------------------------

class ContactProblem:
    """Everything fixed during one optimisation run."""

    def __init__(self, skel, object_mesh, observations, contacts, config=None, weights=None):
        self.skel = skel
        self.config = config or OptimizerConfig()
        self.weights = weights or LossWeights()
        self.obs = observations
        self.contacts = np.asarray(contacts, dtype=float)
        self.samples = sample_surface(object_mesh, self.config.penetration_samples, self.config.seed)
        self.tree = cKDTree(self.samples)
        self.mask_samples = self.samples[: self.config.mask_samples]
        self.cover_samples = self.samples[: min(self.config.coverage_samples, self.config.mask_samples)]
        self.has_mask = observations.obj_masks is not None and observations.human_masks is not None
        if self.has_mask:
            rng = np.random.default_rng(self.config.seed + 1)
            self.fields = np.stack([silhouette_field(o, h) for o, h in
                                    zip(observations.obj_masks, observations.human_masks)])
            tl = [coverage_targets(o, h, self.config.coverage_targets, rng)
                  for o, h in zip(observations.obj_masks, observations.human_masks)]
            self.radius = np.array([coverage_radius(o, h, len(self.cover_samples), self.config.coverage_radius_px)
                                    for o, h in zip(observations.obj_masks, observations.human_masks)])
            T = max([len(x) for x in tl] + [0])
            self.targets = np.zeros((len(tl), T, 2))
            self.target_valid = np.zeros((len(tl), T), dtype=bool)
            for i, x in enumerate(tl):
                self.targets[i, :len(x)] = x
                self.target_valid[i, :len(x)] = True
        self.has_j2d = observations.joints2d is not None

    def evaluate(self, state, step=None, need_grad=True, terms=TERMS):
        """Weighted total, raw per-term values, and gradients.

        ``step=None`` evaluates every term; otherwise the penetration term is
        only included once ``step`` reaches the active window.
        """
        skel, cfg, w = self.skel, self.config, self.weights
        N, J = state.n_frames, skel.n_joints
        G, P = fk_batch(skel, state.body_rotations, state.body_translations)
        cap_a, cap_b = capsule_endpoints(skel, G, P)
        R, t = state.object_rotations, state.object_translations
        raw = dict.fromkeys(TERMS, 0.0)
        bad_terms = set()
        if not (np.all(np.isfinite(state.body_rotations)) and np.all(np.isfinite(state.body_translations))):
            bad_terms |= {"contact", "j2d", "penetration", "acc_human"}
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            bad_terms |= {"contact", "mask", "penetration", "acc_object"}
        if step is not None and not cfg.penetration_active(step):
            bad_terms.discard("penetration")
        extras = {}
        grads = {}
        for term in terms:
            if term in bad_terms:
                raw[term] = float("nan")
                continue
            g = _Grad(N, J, skel.n_capsules) if need_grad else None
            if term == "contact":
                raw[term], extras["hand_distance"] = _contact_kernel(
                    P, skel.hand_joint_ids, R, t, self.samples, self.tree, self.contacts, g)
            elif term == "j2d":
                if not self.has_j2d:
                    continue
                conf = self.obs.joints2d_conf
                if conf is None:
                    conf = np.ones(self.obs.joints2d.shape[:2])
                raw[term] = _j2d_kernel(P, self.obs.intrinsics, self.obs.joints2d, conf, g)
            elif term == "mask":
                if not self.has_mask:
                    continue
                raw[term], _ = _mask_kernel(R, t, self.mask_samples, self.cover_samples, self.fields,
                                            self.targets, self.target_valid, self.obs.intrinsics,
                                            self.radius, g)
            elif term == "penetration":
                if step is not None and not cfg.penetration_active(step):
                    continue
                raw[term], extras["max_penetration"] = _pen_kernel(R, t, self.samples, cap_a, cap_b,
                                                                  skel.capsule_radii, g, self.tree)
            elif term in ("acc_human", "acc_object"):
                if N < 3:
                    continue
                gh = _Grad(N, J, skel.n_capsules) if need_grad else None
                go = _Grad(N, J, skel.n_capsules) if need_grad else None
                if term == "acc_human":
                    raw[term], _ = _accel_kernel(P, R, t, False, gh)
                    g = gh
                    if g is not None:
                        g.obj_t[:] = 0.0
                else:
                    _, raw[term] = _accel_kernel(P, R, t, cfg.object_rotation_accel, go)
                    g = go
                    if g is not None:
                        g.P[:] = 0.0
            if g is not None:
                grads[term] = g
        total = sum(w.for_term(k) * raw[k] for k in TERMS)
        if not need_grad:
            return total, raw, None, extras
        acc = _Grad(N, J, skel.n_capsules)
        for term, g in grads.items():
            lam = w.for_term(term)
            acc.P += lam * g.P
            acc.cap_a += lam * g.cap_a
            acc.cap_b += lam * g.cap_b
            acc.obj_w += lam * g.obj_w
            acc.obj_t += lam * g.obj_t
        body_w, body_t = _body_grad(skel, G, P, cap_a, cap_b, acc)
        gradient = {"body_w": body_w, "body_t": body_t, "obj_w": acc.obj_w, "obj_t": acc.obj_t}
        return total, raw, gradient, extras


def apply_increments(state, body_w=None, body_t=None, obj_w=None, obj_t=None):
    """New state with rotation increments left-multiplied and translations added."""
    out = state.copy()
    if body_w is not None:
        out.body_rotations = so3_exp(body_w) @ out.body_rotations
    if body_t is not None:
        out.body_translations = out.body_translations + body_t
    if obj_w is not None:
        out.object_rotations = so3_exp(obj_w) @ out.object_rotations
    if obj_t is not None:
        out.object_translations = out.object_translations + obj_t
    return out


# --------------------------------------------------------------------------
# Public loss functions
# --------------------------------------------------------------------------

def loss_contact(state, skel, object_samples, contacts):
    """Sum over frames and hands of contact-weighted hand-to-object distance."""
    _, P = fk_batch(skel, state.body_rotations, state.body_translations)
    pts = np.asarray(object_samples, dtype=float)
    val, _ = _contact_kernel(P, skel.hand_joint_ids, state.object_rotations, state.object_translations,
                             pts, cKDTree(pts), contacts)
    return val


def loss_j2d(state, skel, joints2d, conf, intr):
    joints2d = np.asarray(joints2d, dtype=float)
    if joints2d.shape[1] != skel.n_joints:
        raise ValueError("detections have %d joints, skeleton has %d" % (joints2d.shape[1], skel.n_joints))
    _, P = fk_batch(skel, state.body_rotations, state.body_translations)
    return _j2d_kernel(P, intr, joints2d, conf)


def loss_mask(object_samples, object_rotations, object_translations, obj_masks, human_masks, intr,
              coverage_samples=None, coverage_targets_per_frame=64, coverage_radius_px=3.0, seed=0):
    pts = np.asarray(object_samples, dtype=float)
    cover = pts if coverage_samples is None else pts[:coverage_samples]
    fields = np.stack([silhouette_field(o, h) for o, h in zip(obj_masks, human_masks)])
    rng = np.random.default_rng(seed)
    tl = [coverage_targets(o, h, coverage_targets_per_frame, rng) for o, h in zip(obj_masks, human_masks)]
    T = max([len(x) for x in tl] + [0])
    targets = np.zeros((len(tl), T, 2))
    valid = np.zeros((len(tl), T), dtype=bool)
    for i, x in enumerate(tl):
        targets[i, :len(x)] = x
        valid[i, :len(x)] = True
    val, _ = _mask_kernel(np.asarray(object_rotations, float).reshape(-1, 3, 3),
                          np.asarray(object_translations, float).reshape(-1, 3),
                          pts, cover, fields, targets, valid, intr,
                          [coverage_radius(o, h, len(cover), coverage_radius_px) for o, h in zip(obj_masks, human_masks)])
    return val


def loss_penetration(object_samples, object_rotations, object_translations, skel, state):
    G, P = fk_batch(skel, state.body_rotations, state.body_translations)
    a, b = capsule_endpoints(skel, G, P)
    val, _ = _pen_kernel(np.asarray(object_rotations, float).reshape(-1, 3, 3),
                         np.asarray(object_translations, float).reshape(-1, 3),
                         np.asarray(object_samples, float), a, b, skel.capsule_radii)
    return val


def loss_accel(state, skel, object_rotation=True):
    """``(human, object)`` sums of squared second differences."""
    if state.n_frames < 3:
        raise ValueError("acceleration needs at least 3 frames")
    _, P = fk_batch(skel, state.body_rotations, state.body_translations)
    return _accel_kernel(P, state.object_rotations, state.object_translations, object_rotation)


def total_loss(state, problem, step=None):
    """Weighted objective and raw per-term breakdown for ``problem``."""
    total, raw, _, _ = problem.evaluate(state, step, need_grad=False)
    return total, raw


def fallback_contacts(state, skel, object_samples, radius=0.08):
    """Contacts for hands within ``radius`` of the object at initialisation."""
    _, P = fk_batch(skel, state.body_rotations, state.body_translations)
    pts = np.asarray(object_samples, dtype=float)
    ones = np.ones((state.n_frames, 2))
    _, d = _contact_kernel(P, skel.hand_joint_ids, state.object_rotations, state.object_translations,
                           pts, cKDTree(pts), ones)
    return (d < radius).astype(int)


# --------------------------------------------------------------------------
# Optimiser
# --------------------------------------------------------------------------

class _Adam:
    def __init__(self, shapes, beta1, beta2, eps):
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.k = 0

    def step(self, grads, lr):
        self.k += 1
        out = {}
        for name, g in grads.items():
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            mhat = m / (1 - self.beta1**self.k)
            vhat = v / (1 - self.beta2**self.k)
            out[name] = -lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def optimize_trajectory(init, observations, contacts, skel, object_mesh, weights=None, config=None,
                        callback=None):
    """Adam with linearly decaying learning rate over all pose variables.

    ``contacts=None`` derives contacts from hand-object proximity at
    initialisation (reported as ``contact_source='fallback'``).
    """
    config = config or OptimizerConfig()
    weights = weights or LossWeights()
    t0 = time.perf_counter()
    source = "labels"
    if contacts is None:
        samples = sample_surface(object_mesh, config.penetration_samples, config.seed)
        contacts = fallback_contacts(init, skel, samples, config.contact_fallback_radius)
        source = "fallback"
    contacts = np.asarray(contacts)
    if contacts.shape != (init.n_frames, 2):
        raise ValueError("contacts must have shape (%d, 2)" % init.n_frames)
    problem = ContactProblem(skel, object_mesh, observations, contacts, config, weights)
    state = init.copy()
    N, J = state.n_frames, skel.n_joints
    adam = _Adam({"body_w": (N, J, 3), "body_t": (N, 3), "obj_w": (N, 3), "obj_t": (N, 3)},
                 config.beta1, config.beta2, config.eps)
    trace = {"total": [], "lr": [], "max_penetration": []}
    for term in TERMS:
        trace[term] = []
    for step in range(config.steps + 1):
        final = step == config.steps
        total, raw, grads, extras = problem.evaluate(state, step, need_grad=not final)
        if not np.isfinite(total):
            bad = [k for k, v in raw.items() if not np.isfinite(v)]
            raise OptimizationError("non-finite loss at step %d in term(s) %s" % (step, ", ".join(bad) or "?"))
        trace["total"].append(total)
        for term in TERMS:
            trace[term].append(raw[term])
        trace["max_penetration"].append(extras.get("max_penetration", 0.0))
        if final:
            trace["lr"].append(0.0)
            break
        lr = config.lr_start * (1.0 - step / config.steps)
        trace["lr"].append(lr)
        upd = adam.step(grads, lr)
        state = apply_increments(state, upd["body_w"], upd["body_t"], upd["obj_w"], upd["obj_t"])
        if callback is not None:
            callback(step, total, raw)
        if step % 500 == 0:
            log.debug("step %d total %.6g %s", step, total, {k: round(v, 6) for k, v in raw.items()})
    trace = {k: np.asarray(v) for k, v in trace.items()}
    return OptimizationResult(state=state, trace=trace, contacts=contacts, contact_source=source,
                              seconds=time.perf_counter() - t0)


class TrajectoryOptimizer(BaseEstimator):
    """Contact-aware refinement of a human-object trajectory.

    ``fit(init, observations, contacts, skeleton, object_mesh)`` runs the
    optimisation; ``transform()`` returns the refined trajectory and
    ``loss_trace_`` keeps the per-term history.
    """

    def __init__(self, lambda_c=200.0, lambda_j2d=0.03, lambda_m=0.002, lambda_pen=2.0,
                 lambda_acc_human=600.0, lambda_acc_object=1000.0, steps=3000, lr_start=1e-3,
                 penetration_active_last=1200, penetration_samples=6000, object_rotation_accel=True,
                 seed=0):
        self.lambda_c = lambda_c
        self.lambda_j2d = lambda_j2d
        self.lambda_m = lambda_m
        self.lambda_pen = lambda_pen
        self.lambda_acc_human = lambda_acc_human
        self.lambda_acc_object = lambda_acc_object
        self.steps = steps
        self.lr_start = lr_start
        self.penetration_active_last = penetration_active_last
        self.penetration_samples = penetration_samples
        self.object_rotation_accel = object_rotation_accel
        self.seed = seed

    def _weights(self):
        return LossWeights(self.lambda_c, self.lambda_j2d, self.lambda_m, self.lambda_pen,
                           self.lambda_acc_human, self.lambda_acc_object)

    def _config(self):
        return OptimizerConfig(steps=self.steps, lr_start=self.lr_start,
                               penetration_active_last=self.penetration_active_last,
                               penetration_samples=self.penetration_samples,
                               object_rotation_accel=self.object_rotation_accel, seed=self.seed)

    def fit(self, init, observations, contacts, skeleton, object_mesh):
        self.result_ = optimize_trajectory(init, observations, contacts, skeleton, object_mesh,
                                           self._weights(), self._config())
        self.trajectory_ = self.result_.state
        self.loss_trace_ = self.result_.trace
        self.contacts_ = self.result_.contacts
        return self

    def transform(self, init=None):
        check_is_fitted(self, "result_")
        return self.trajectory_
