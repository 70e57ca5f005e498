"""Capsule skeleton body model.

A 22-joint kinematic tree with per-bone capsules. It provides the three things
the optimiser needs from a body model: joint positions (forward kinematics),
hand joints, and a signed distance field for penetration checks. Skeletons
can be loaded from JSON, so a skeleton derived from another body model can be
dropped in.

Hands carry no capsule: forearm capsules stop short of the wrist so a hand
joint can sit on an object surface without the object counting as
penetrating the arm.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import TriMesh, make_capsule_mesh, sample_surface

JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
)

_PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)

# body frame: +y up, +x to the body's left, +z forward
_OFFSETS = (
    (0.0, 0.0, 0.0), (0.09, -0.08, 0.0), (-0.09, -0.08, 0.0), (0.0, 0.11, 0.0),
    (0.0, -0.38, 0.0), (0.0, -0.38, 0.0), (0.0, 0.14, 0.0), (0.0, -0.40, 0.0),
    (0.0, -0.40, 0.0), (0.0, 0.05, 0.0), (0.0, -0.05, 0.12), (0.0, -0.05, 0.12),
    (0.0, 0.21, 0.0), (0.07, 0.12, 0.0), (-0.07, 0.12, 0.0), (0.0, 0.09, 0.03),
    (0.11, 0.03, 0.0), (-0.11, 0.03, 0.0), (0.26, 0.0, 0.0), (-0.26, 0.0, 0.0),
    (0.25, 0.0, 0.0), (-0.25, 0.0, 0.0),
)

# (bone, radius, endpoint a, endpoint b), endpoints in the bone frame
_CAPSULES = (
    (0, 0.11, (0.0, -0.02, 0.0), (0.0, 0.08, 0.0)),
    (3, 0.10, (0.0, 0.0, 0.0), (0.0, 0.14, 0.0)),
    (6, 0.11, (0.0, 0.0, 0.0), (0.0, 0.05, 0.0)),
    (9, 0.11, (0.0, 0.0, 0.0), (0.0, 0.15, 0.0)),
    (12, 0.05, (0.0, 0.0, 0.0), (0.0, 0.08, 0.0)),
    (15, 0.09, (0.0, 0.03, 0.02), (0.0, 0.13, 0.02)),
    (1, 0.07, (0.0, 0.0, 0.0), (0.0, -0.38, 0.0)),
    (2, 0.07, (0.0, 0.0, 0.0), (0.0, -0.38, 0.0)),
    (4, 0.05, (0.0, 0.0, 0.0), (0.0, -0.40, 0.0)),
    (5, 0.05, (0.0, 0.0, 0.0), (0.0, -0.40, 0.0)),
    (7, 0.04, (0.0, -0.03, 0.0), (0.0, -0.05, 0.12)),
    (8, 0.04, (0.0, -0.03, 0.0), (0.0, -0.05, 0.12)),
    (13, 0.05, (0.0, 0.0, 0.0), (0.11, 0.03, 0.0)),
    (14, 0.05, (0.0, 0.0, 0.0), (-0.11, 0.03, 0.0)),
    (16, 0.045, (0.0, 0.0, 0.0), (0.26, 0.0, 0.0)),
    (17, 0.045, (0.0, 0.0, 0.0), (-0.26, 0.0, 0.0)),
    (18, 0.035, (0.0, 0.0, 0.0), (0.14, 0.0, 0.0)),
    (19, 0.035, (0.0, 0.0, 0.0), (-0.14, 0.0, 0.0)),
)


@dataclass(frozen=True, eq=False)
class Skeleton:
    parents: np.ndarray
    offsets: np.ndarray
    capsule_bones: np.ndarray
    capsule_radii: np.ndarray
    capsule_a: np.ndarray
    capsule_b: np.ndarray
    hand_joint_ids: tuple = (20, 21)
    names: tuple = ()

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64)
        offsets = np.asarray(self.offsets, dtype=float).reshape(-1, 3)
        if len(parents) != len(offsets):
            raise ValueError("parents and offsets disagree on joint count")
        if np.sum(parents < 0) != 1 or parents[0] != -1:
            raise ValueError("skeleton must have exactly one root, at index 0")
        if np.any(parents[1:] >= np.arange(1, len(parents))):
            raise ValueError("parents must precede children")
        if not np.all(np.isfinite(offsets)):
            raise ValueError("non-finite rest offset")
        radii = np.asarray(self.capsule_radii, dtype=float)
        if np.any(radii <= 0):
            raise ValueError("capsule radii must be positive")
        bones = np.asarray(self.capsule_bones, dtype=np.int64)
        if bones.size and (bones.min() < 0 or bones.max() >= len(parents)):
            raise ValueError("capsule bone index out of range")
        hands = tuple(int(h) for h in self.hand_joint_ids)
        if len(hands) != 2 or min(hands) < 0 or max(hands) >= len(parents):
            raise ValueError("invalid hand joint ids %r" % (hands,))
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "capsule_bones", bones)
        object.__setattr__(self, "capsule_radii", radii)
        object.__setattr__(self, "capsule_a", np.asarray(self.capsule_a, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "capsule_b", np.asarray(self.capsule_b, dtype=float).reshape(-1, 3))
        object.__setattr__(self, "hand_joint_ids", hands)

    @property
    def n_joints(self):
        return len(self.parents)

    @property
    def n_capsules(self):
        return len(self.capsule_radii)

    def ancestors(self, j):
        """``j`` and all its ancestors, leaf to root."""
        out = []
        while j >= 0:
            out.append(int(j))
            j = self.parents[j]
        return out

    def to_dict(self):
        return {
            "format_version": 1,
            "names": list(self.names),
            "parents": self.parents.tolist(),
            "offsets": self.offsets.tolist(),
            "capsules": [
                {"bone": int(b), "radius": float(r), "a": a.tolist(), "b": bb.tolist()}
                for b, r, a, bb in zip(self.capsule_bones, self.capsule_radii, self.capsule_a, self.capsule_b)
            ],
            "hand_joint_ids": list(self.hand_joint_ids),
        }

    @classmethod
    def from_dict(cls, d):
        caps = d.get("capsules", [])
        return cls(
            parents=d["parents"],
            offsets=d["offsets"],
            capsule_bones=[c["bone"] for c in caps],
            capsule_radii=[c["radius"] for c in caps],
            capsule_a=[c["a"] for c in caps],
            capsule_b=[c["b"] for c in caps],
            hand_joint_ids=tuple(d["hand_joint_ids"]),
            names=tuple(d.get("names", ())),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def default_skeleton():
    caps = _CAPSULES
    return Skeleton(
        parents=_PARENTS,
        offsets=_OFFSETS,
        capsule_bones=[c[0] for c in caps],
        capsule_radii=[c[1] for c in caps],
        capsule_a=[c[2] for c in caps],
        capsule_b=[c[3] for c in caps],
        hand_joint_ids=(20, 21),
        names=JOINT_NAMES,
    )


@dataclass
class BodyState:
    """Per-joint local rotations ``(J, 3, 3)``, root translation, shape passthrough."""

    joint_rotations: np.ndarray
    root_translation: np.ndarray
    betas: list = field(default_factory=list)

    def __post_init__(self):
        self.joint_rotations = np.asarray(self.joint_rotations, dtype=float).reshape(-1, 3, 3)
        self.root_translation = np.asarray(self.root_translation, dtype=float).reshape(3)
        self.betas = [float(b) for b in self.betas]

    @classmethod
    def rest(cls, skel, root_rotation=None, root_translation=(0.0, 0.0, 0.0)):
        R = np.tile(np.eye(3), (skel.n_joints, 1, 1))
        if root_rotation is not None:
            R[0] = root_rotation
        return cls(R, root_translation)


def fk_batch(skel, rotations, root_translation):
    """Forward kinematics over leading batch axes.

    ``rotations`` ``(..., J, 3, 3)`` local, ``root_translation`` ``(..., 3)``.
    Returns world rotations ``(..., J, 3, 3)`` and joint positions ``(..., J, 3)``.
    """
    rotations = np.asarray(rotations, dtype=float)
    root_translation = np.asarray(root_translation, dtype=float)
    J = skel.n_joints
    if rotations.shape[-3] != J:
        raise ValueError("expected %d joint rotations, got %d" % (J, rotations.shape[-3]))
    G = np.empty_like(rotations)
    P = np.empty(rotations.shape[:-2] + (3,))
    G[..., 0, :, :] = rotations[..., 0, :, :]
    P[..., 0, :] = root_translation
    for j in range(1, J):
        p = skel.parents[j]
        Gp = G[..., p, :, :]
        G[..., j, :, :] = Gp @ rotations[..., j, :, :]
        P[..., j, :] = P[..., p, :] + Gp @ skel.offsets[j]
    return G, P


def forward_kinematics(skel, state):
    """World joint positions ``(J, 3)`` for one body state."""
    if len(state.joint_rotations) != skel.n_joints:
        raise ValueError("state has %d rotations, skeleton has %d joints"
                         % (len(state.joint_rotations), skel.n_joints))
    return fk_batch(skel, state.joint_rotations, state.root_translation)[1]


def hand_joints(skel, joints):
    return joints[..., list(skel.hand_joint_ids), :]


def capsule_endpoints(skel, G, P):
    """World capsule endpoints ``(..., C, 3)`` from FK output."""
    Gb = G[..., skel.capsule_bones, :, :]
    Pb = P[..., skel.capsule_bones, :]
    a = Pb + np.einsum("...cij,cj->...ci", Gb, skel.capsule_a)
    b = Pb + np.einsum("...cij,cj->...ci", Gb, skel.capsule_b)
    return a, b


def segment_distance(q, a, b):
    """Distance from ``q`` to segments ``a-b`` (broadcasting), plus the
    clamped segment parameter and the unit direction closest-point -> q."""
    ab = b - a
    denom = np.sum(ab * ab, axis=-1)
    s = np.sum((q - a) * ab, axis=-1) / np.where(denom > 0, denom, 1.0)
    s = np.clip(s, 0.0, 1.0)
    closest = a + s[..., None] * ab
    diff = q - closest
    dist = np.linalg.norm(diff, axis=-1)
    n = diff / np.where(dist > 0, dist, 1.0)[..., None]
    return dist, s, n


def capsule_sdf(q, a, b, radius):
    """Signed distance of points to a set of capsules, minimum over capsules.

    ``q`` ``(P, 3)``, ``a``/``b`` ``(C, 3)``, ``radius`` ``(C,)``.
    Returns ``(sdf, capsule_index, gradient_wrt_q)``.
    """
    q = np.asarray(q, dtype=float).reshape(-1, 3)
    d, _, n = segment_distance(q[:, None, :], a[None], b[None])
    sd = d - radius[None]
    k = np.argmin(sd, axis=1)
    rows = np.arange(len(q))
    return sd[rows, k], k, n[rows, k]


def body_signed_distance(skel, state, q):
    """Signed distance (meters) from ``q`` to the capsule body; negative inside."""
    G, P = fk_batch(skel, state.joint_rotations, state.root_translation)
    a, b = capsule_endpoints(skel, G, P)
    q = np.asarray(q, dtype=float)
    sd, _, _ = capsule_sdf(q.reshape(-1, 3), a, b, skel.capsule_radii)
    return float(sd[0]) if q.ndim == 1 else sd


def body_sdf_gradient(skel, state, q):
    G, P = fk_batch(skel, state.joint_rotations, state.root_translation)
    a, b = capsule_endpoints(skel, G, P)
    _, _, n = capsule_sdf(np.asarray(q, dtype=float).reshape(-1, 3), a, b, skel.capsule_radii)
    return n


def project_joints(joints, intr):
    """Pixel coordinates ``(..., 2)`` and validity (``z > 0``)."""
    joints = np.asarray(joints, dtype=float)
    if not np.all(np.isfinite(joints)):
        raise ValueError("joints must be finite")
    return intr.project(joints)


def body_mesh(skel, state, segments=10, rings=3):
    """Triangulated capsule body for rendering silhouettes."""
    G, P = fk_batch(skel, state.joint_rotations, state.root_translation)
    a, b = capsule_endpoints(skel, G, P)
    return TriMesh.concatenate([
        make_capsule_mesh(a[c], b[c], skel.capsule_radii[c], segments, rings)
        for c in range(skel.n_capsules)
    ])


def capsule_surface_template(skel, n_per_meter2=20000, seed=0):
    """Fixed surface samples expressed in bone frames.

    Returns ``(bone_index, local_points)`` so that posing is a per-bone rigid
    map and every pose of the skeleton shares one point topology.
    """
    bones, pts = [], []
    for c in range(skel.n_capsules):
        a, b, r = skel.capsule_a[c], skel.capsule_b[c], skel.capsule_radii[c]
        mesh = make_capsule_mesh(a, b, r, segments=12, rings=3)
        n = max(16, int(round(mesh.face_areas().sum() * n_per_meter2)))
        p = sample_surface(mesh, n, seed=seed + c)
        # push samples onto the exact capsule surface
        d, s, nrm = segment_distance(p, a, b)
        p = a + s[:, None] * (b - a) + r * nrm
        pts.append(p)
        bones.append(np.full(len(p), skel.capsule_bones[c]))
    return np.concatenate(bones), np.concatenate(pts)


def pose_surface(template, G, P):
    """Pose template samples with FK output; leading batch axes preserved."""
    bones, local = template
    return P[..., bones, :] + np.einsum("...pij,pj->...pi", G[..., bones, :, :], local)
