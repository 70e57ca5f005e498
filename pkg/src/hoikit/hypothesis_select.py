"""Per-frame object pose selection from ranked candidate pools.

Each frame's candidates are filtered by an occlusion-aware mask IoU and by
the geodesic distance to the previously selected rotation; the first
survivor wins. When nothing survives, the selector jumps ``skip_S`` frames
ahead until a frame passes the filters against the last good rotation,
anchors there, and walks the skipped frames backwards.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .geometry import geodesic_distance
from .raster import render_mask

log = logging.getLogger(__name__)

PROVENANCE = ("forward", "backward_fill", "anchor_jump", "unresolved")


class SelectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class PoseCandidate:
    pose: object  # RigidTransform
    score: float
    source: str = "rgbd"

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("candidate score must be finite")
        if self.source not in ("rgb", "rgbd"):
            raise ValueError("candidate source must be 'rgb' or 'rgbd', got %r" % self.source)


@dataclass
class CandidatePool:
    frame_index: int
    candidates: list = field(default_factory=list)

    def __len__(self):
        return len(self.candidates)


@dataclass(frozen=True)
class SelectionConfig:
    delta_m: float = 0.5
    delta_R: float = 0.6
    skip_S: int = 15
    max_jumps: int = 5

    def __post_init__(self):
        if not 0.0 <= self.delta_m <= 1.0:
            raise ValueError("delta_m must lie in [0, 1]")
        if not 0.0 < self.delta_R <= np.pi:
            raise ValueError("delta_R must lie in (0, pi]")
        if self.skip_S < 1:
            raise ValueError("skip_S must be >= 1")
        if self.max_jumps < 0:
            raise ValueError("max_jumps must be >= 0")


@dataclass
class FrameObservation:
    """What the filters need for one frame."""

    obj_mask: np.ndarray
    human_mask: np.ndarray


@dataclass
class SelectionOutcome:
    poses: list
    provenance: list
    candidate_rank: list  # index of the chosen candidate in its pool, -1 if none
    n_jumps: int = 0

    @property
    def resolved(self):
        return np.array([p != "unresolved" for p in self.provenance])


def merge_pools(rgbd_pool, rgb_pool):
    """RGBD candidates first, then RGB, each keeping its own rank order."""
    if rgbd_pool.frame_index != rgb_pool.frame_index:
        raise ValueError("cannot merge pools of frames %d and %d" % (rgbd_pool.frame_index, rgb_pool.frame_index))
    return CandidatePool(rgbd_pool.frame_index, list(rgbd_pool.candidates) + list(rgb_pool.candidates))


def occlusion_aware_iou(cand_mask, obj_mask, human_mask):
    """IoU of two masks after removing human-covered pixels from both."""
    cand_mask = np.asarray(cand_mask, dtype=bool)
    obj_mask = np.asarray(obj_mask, dtype=bool)
    human_mask = np.asarray(human_mask, dtype=bool)
    if not (cand_mask.shape == obj_mask.shape == human_mask.shape):
        raise ValueError("mask shapes differ: %s, %s, %s" % (cand_mask.shape, obj_mask.shape, human_mask.shape))
    keep = ~human_mask
    a = cand_mask & keep
    b = obj_mask & keep
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def filter_pool(pool, prev_rot, obs, mesh, intr, config, use_iou=True):
    """Candidates passing the rotation and IoU filters, in rank order.

    The rotation test is applied first because it is cheap; masks are only
    rendered for rotation survivors.
    """
    kept = []
    for cand in pool.candidates:
        if prev_rot is not None and geodesic_distance(cand.pose.rotation, prev_rot) > config.delta_R:
            continue
        if use_iou:
            mask = render_mask(mesh, cand.pose, intr)
            if occlusion_aware_iou(mask, obs.obj_mask, obs.human_mask) < config.delta_m:
                continue
        kept.append(cand)
    return kept


def _first_passing(pool, prev_rot, obs, mesh, intr, config, use_iou=True):
    for rank, cand in enumerate(pool.candidates):
        if prev_rot is not None and geodesic_distance(cand.pose.rotation, prev_rot) > config.delta_R:
            continue
        if use_iou:
            mask = render_mask(mesh, cand.pose, intr)
            if occlusion_aware_iou(mask, obs.obj_mask, obs.human_mask) < config.delta_m:
                continue
        return rank
    return None


def select_sequence(pools, init_pose, observations, mesh, intr, config=None):
    """Forward selection with forward-jump / backward-fill recovery.

    ``init_pose`` supplies the reference rotation for frame 0. During the
    backward walk the IoU filter is dropped for a frame when it would leave
    no candidate; the rotation filter always applies. Frames with no
    surviving candidate stay unresolved.
    """
    config = config or SelectionConfig()
    N = len(pools)
    if len(observations) != N:
        raise ValueError("%d pools but %d observations" % (N, len(observations)))
    for i, p in enumerate(pools):
        if p.frame_index != pools[0].frame_index + i:
            raise ValueError("pools are not contiguous at position %d (frame %d)" % (i, p.frame_index))
    poses = [None] * N
    prov = ["unresolved"] * N
    ranks = [-1] * N

    def take(i, rank, tag):
        poses[i] = pools[i].candidates[rank].pose
        prov[i] = tag
        ranks[i] = rank
        return poses[i].rotation

    def pick(i, ref, use_iou=True):
        return _first_passing(pools[i], ref, observations[i], mesh, intr, config, use_iou)

    r = pick(0, init_pose.rotation)
    if r is None:
        raise SelectionError("no candidate in frame %d passes the filters against the initial pose"
                             % pools[0].frame_index)
    prev = take(0, r, "forward")
    total_jumps = 0
    i = 1
    while i < N:
        r = pick(i, prev)
        if r is not None:
            prev = take(i, r, "forward")
            i += 1
            continue
        anchor = None
        for k in range(1, config.max_jumps + 1):
            j = min(i + k * config.skip_S, N - 1)
            total_jumps += 1
            r = pick(j, prev)
            if r is not None:
                anchor = (j, r)
                break
            if j == N - 1:
                break
        if anchor is None:
            log.info("frame %d: no anchor within %d jumps; remaining frames unresolved",
                     pools[i].frame_index, config.max_jumps)
            break
        j, r = anchor
        back = take(j, r, "anchor_jump")
        for m in range(j - 1, i - 1, -1):
            rm = pick(m, back)
            if rm is None:
                rm = pick(m, back, use_iou=False)
            if rm is None:
                continue
            back = take(m, rm, "backward_fill")
        prev = poses[j].rotation
        i = j + 1
    return SelectionOutcome(poses=poses, provenance=prov, candidate_rank=ranks, n_jumps=total_jumps)


def select_top1(pools):
    """Baseline: the estimator's own top-ranked candidate on every frame."""
    poses = [p.candidates[0].pose if p.candidates else None for p in pools]
    prov = ["forward" if p is not None else "unresolved" for p in poses]
    ranks = [0 if p is not None else -1 for p in poses]
    return SelectionOutcome(poses=poses, provenance=prov, candidate_rank=ranks)


class HypothesisSelector(BaseEstimator):
    """Occlusion-aware, temporally filtered pose selection.

    Parameters
    ----------
    delta_m : float
        Minimum occlusion-aware IoU with the observed object mask.
    delta_R : float
        Maximum geodesic distance (radians) to the previous rotation.
    skip_S : int
        Forward jump length in frames.
    max_jumps : int
        Jumps allowed per recovery before the rest of the video is given up.
    """

    def __init__(self, delta_m=0.5, delta_R=0.6, skip_S=15, max_jumps=5):
        self.delta_m = delta_m
        self.delta_R = delta_R
        self.skip_S = skip_S
        self.max_jumps = max_jumps

    def fit(self, pools, init_pose, observations, mesh, intrinsics):
        cfg = SelectionConfig(self.delta_m, self.delta_R, self.skip_S, self.max_jumps)
        self.outcome_ = select_sequence(pools, init_pose, observations, mesh, intrinsics, cfg)
        self.poses_ = self.outcome_.poses
        self.provenance_ = self.outcome_.provenance
        return self

    def predict(self, pools=None):
        check_is_fitted(self, "outcome_")
        return self.outcome_
