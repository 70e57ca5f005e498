"""Rotations, rigid transforms, meshes, point sets and camera geometry.

Conventions used everywhere in the package:

* quaternions are stored as ``(w, x, y, z)`` and canonicalised to ``w >= 0``;
* points are ``(n, 3)`` float64 arrays in meters, camera looks down ``+z``;
* images are indexed ``[row, col] == [v, u]`` and pixel ``(u, v)`` has its
  center at integer coordinates, so the principal point pixel unprojects onto
  the optical axis;
* masks are boolean ``(height, width)`` arrays, depth maps float arrays where
  ``0`` or non-finite marks an invalid pixel.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation as _SciRot

_UNIT_TOL = 1e-9


# --------------------------------------------------------------------------
# SO(3) helpers on raw arrays (batched)
# --------------------------------------------------------------------------

def hat(v):
    """Skew-symmetric matrix of ``v`` with shape ``(..., 3)``."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(rotvec):
    """Rodrigues formula, batched over leading axes."""
    rotvec = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(rotvec, axis=-1)[..., None, None]
    K = hat(rotvec)
    K2 = K @ K
    small = theta < 1e-8
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * K + b * K2


def so3_log(R):
    """Rotation vector of rotation matrices ``(..., 3, 3)``."""
    R = np.asarray(R, dtype=float)
    flat = R.reshape(-1, 3, 3)
    out = _SciRot.from_matrix(flat).as_rotvec()
    return out.reshape(R.shape[:-2] + (3,))


def so3_left_jacobian_inv(phi):
    """Inverse left Jacobian of SO(3) at rotation vectors ``phi`` ``(..., 3)``.

    ``log(exp(d) exp(phi)) ~= phi + J_l^{-1}(phi) d`` for small ``d``.
    """
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)[..., None, None]
    K = hat(phi)
    small = theta < 1e-6
    safe = np.where(small, 1.0, theta)
    coef = np.where(
        small,
        1.0 / 12.0 + theta**2 / 720.0,
        1.0 / safe**2 - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(safe)),
    )
    return np.eye(3) - 0.5 * K + coef * (K @ K)


def so3_right_jacobian_inv(phi):
    """``log(exp(phi) exp(d)) ~= phi + J_r^{-1}(phi) d``."""
    return so3_left_jacobian_inv(-np.asarray(phi, dtype=float))


def _canonical_quat(q):
    q = np.asarray(q, dtype=float)
    if q[0] < 0:
        q = -q
    return q


# --------------------------------------------------------------------------
# Rotation / RigidTransform
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Rotation:
    """Unit quaternion rotation, stored ``(w, x, y, z)`` with ``w >= 0``."""

    quat: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.quat, dtype=float).reshape(4)
        if not np.all(np.isfinite(q)):
            raise ValueError("quaternion has non-finite entries")
        n = np.linalg.norm(q)
        if n == 0:
            raise ValueError("zero quaternion")
        if abs(n - 1.0) > _UNIT_TOL:
            q = q / n
        q = _canonical_quat(q)
        q.setflags(write=False)
        object.__setattr__(self, "quat", q)

    @classmethod
    def identity(cls):
        return cls(np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, R):
        x, y, z, w = _SciRot.from_matrix(np.asarray(R, dtype=float)).as_quat()
        return cls(np.array([w, x, y, z]))

    @classmethod
    def from_rotvec(cls, v):
        x, y, z, w = _SciRot.from_rotvec(np.asarray(v, dtype=float)).as_quat()
        return cls(np.array([w, x, y, z]))

    @classmethod
    def from_axis_angle(cls, axis, angle):
        axis = np.asarray(axis, dtype=float)
        return cls.from_rotvec(axis / np.linalg.norm(axis) * angle)

    @classmethod
    def random(cls, rng):
        q = rng.normal(size=4)
        return cls(q / np.linalg.norm(q))

    def as_matrix(self):
        w, x, y, z = self.quat
        return _SciRot.from_quat([x, y, z, w]).as_matrix()

    def as_rotvec(self):
        w, x, y, z = self.quat
        return _SciRot.from_quat([x, y, z, w]).as_rotvec()

    def inv(self):
        w, x, y, z = self.quat
        return Rotation(np.array([w, -x, -y, -z]))

    def __mul__(self, other):
        w1, x1, y1, z1 = self.quat
        w2, x2, y2, z2 = other.quat
        return Rotation(np.array([
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]))

    def apply(self, points):
        return np.asarray(points, dtype=float) @ self.as_matrix().T

    def __eq__(self, other):
        if not isinstance(other, Rotation):
            return NotImplemented
        return bool(np.array_equal(self.quat, other.quat))

    def __hash__(self):
        return hash(self.quat.tobytes())

    def __repr__(self):
        return "Rotation(wxyz=%s)" % np.array2string(self.quat, precision=6)


def geodesic_distance(a, b):
    """Angle in ``[0, pi]`` of the relative rotation between ``a`` and ``b``.

    Accepts :class:`Rotation` objects or raw ``(w, x, y, z)`` arrays. Raw
    inputs that are not unit length are normalised with a ``RuntimeWarning``.
    """
    qa = _as_unit_quat(a)
    qb = _as_unit_quat(b)
    d = abs(float(np.dot(qa, qb)))
    return 2.0 * float(np.arccos(min(d, 1.0)))


def geodesic_distance_matrix(Ra, Rb):
    """Batched geodesic distance between rotation matrices ``(..., 3, 3)``."""
    Ra = np.asarray(Ra, dtype=float)
    Rb = np.asarray(Rb, dtype=float)
    tr = np.einsum("...ij,...ij->...", Ra, Rb)
    return np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))


def _as_unit_quat(r):
    if isinstance(r, Rotation):
        return r.quat
    q = np.asarray(r, dtype=float).reshape(4)
    n = np.linalg.norm(q)
    if n == 0:
        raise ValueError("zero quaternion")
    if abs(n - 1.0) > _UNIT_TOL:
        warnings.warn("non-unit quaternion normalised (norm=%g)" % n, RuntimeWarning, stacklevel=3)
        q = q / n
    return q


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``x -> R x + t``; translation in meters."""

    rotation: Rotation = field(default_factory=Rotation.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        if not np.all(np.isfinite(t)):
            raise ValueError("translation has non-finite entries")
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)
        if not isinstance(self.rotation, Rotation):
            object.__setattr__(self, "rotation", Rotation(self.rotation))

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(Rotation.from_matrix(T[:3, :3]), T[:3, 3])

    def as_matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation.as_matrix()
        T[:3, 3] = self.translation
        return T

    def apply(self, points):
        return self.rotation.apply(points) + self.translation

    def compose(self, other):
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(
            self.rotation * other.rotation,
            self.rotation.apply(other.translation) + self.translation,
        )

    __matmul__ = compose

    def inverse(self):
        rinv = self.rotation.inv()
        return RigidTransform(rinv, -rinv.apply(self.translation))

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return self.rotation == other.rotation and np.array_equal(self.translation, other.translation)

    def __hash__(self):
        return hash((self.rotation, self.translation.tobytes()))

    def __repr__(self):
        return "RigidTransform(q=%s, t=%s)" % (
            np.array2string(self.rotation.quat, precision=5),
            np.array2string(self.translation, precision=5),
        )


# --------------------------------------------------------------------------
# Mesh, camera
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise ValueError("mesh vertices must be finite")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range for %d vertices" % len(v))
        if f.size and np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
            raise ValueError("degenerate face with repeated vertex index")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def triangles(self):
        return self.vertices[self.faces]

    def face_areas(self):
        tri = self.triangles
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def scaled(self, s):
        return TriMesh(self.vertices * float(s), self.faces)

    def transformed(self, T):
        return TriMesh(T.apply(self.vertices), self.faces)

    @staticmethod
    def concatenate(meshes):
        verts, faces, off = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            faces.append(m.faces + off)
            off += len(m.vertices)
        if not verts:
            return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        return TriMesh(np.concatenate(verts), np.concatenate(faces))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def shape(self):
        return (int(self.height), int(self.width))

    def as_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": int(self.width), "height": int(self.height)}

    def project(self, points):
        """Pinhole projection; returns ``(uv, valid)`` with ``valid = z > 0``."""
        p = np.asarray(points, dtype=float)
        z = p[..., 2]
        valid = z > 0
        zs = np.where(valid, z, 1.0)
        u = self.fx * p[..., 0] / zs + self.cx
        v = self.fy * p[..., 1] / zs + self.cy
        return np.stack([u, v], axis=-1), valid

    def pixel_footprint(self, depth):
        """Metric width of one pixel at ``depth`` meters."""
        return float(depth) / min(self.fx, self.fy)


# --------------------------------------------------------------------------
# Point sets
# --------------------------------------------------------------------------

def as_points(points, name="points"):
    p = np.asarray(points, dtype=float)
    if p.ndim != 2 or p.shape[1] != 3:
        p = p.reshape(-1, 3)
    if not np.all(np.isfinite(p)):
        raise ValueError("%s contain non-finite coordinates" % name)
    return p


def nearest_neighbors(query, reference, tree=None):
    """Exact nearest neighbor of each ``query`` point in ``reference``.

    Returns ``(distances, indices)``. Distances are recomputed from the
    matched pairs so they are bit-identical to an exhaustive search that
    finds the same neighbor.
    """
    query = np.asarray(query, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if tree is None:
        tree = cKDTree(reference)
    _, idx = tree.query(query, k=1)
    d = np.sqrt(np.sum((query - reference[idx]) ** 2, axis=1))
    return d, idx


def chamfer(a, b, mode="unidirectional"):
    """Mean Euclidean nearest-neighbor distance (meters).

    ``unidirectional`` measures ``a -> b``; ``symmetric`` averages both
    directions. Distances are not squared.
    """
    a = as_points(a, "a")
    b = as_points(b, "b")
    if len(a) == 0:
        raise ValueError("chamfer: point set 'a' is empty")
    if len(b) == 0:
        raise ValueError("chamfer: point set 'b' is empty")
    d_ab = nearest_neighbors(a, b)[0].mean()
    if mode == "unidirectional":
        return float(d_ab)
    if mode == "symmetric":
        d_ba = nearest_neighbors(b, a)[0].mean()
        return float(0.5 * (d_ab + d_ba))
    raise ValueError("unknown chamfer mode %r" % mode)


def sample_surface(mesh, n, seed=0):
    """``n`` area-weighted uniform samples on ``mesh``; deterministic per seed."""
    if n < 0:
        raise ValueError("sample count must be >= 0")
    areas = mesh.face_areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("cannot sample a mesh with zero surface area")
    if n == 0:
        return np.zeros((0, 3))
    rng = np.random.default_rng(seed)
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    tri = mesh.triangles[face]
    return ((1 - r1)[:, None] * tri[:, 0]
            + (r1 * (1 - r2))[:, None] * tri[:, 1]
            + (r1 * r2)[:, None] * tri[:, 2])


def unproject(depth, intr, mask=None):
    """Back-project valid (and masked) depth pixels to camera-frame points."""
    depth = np.asarray(depth, dtype=float)
    if depth.shape != intr.shape:
        raise ValueError("depth shape %s does not match intrinsics %s" % (depth.shape, intr.shape))
    valid = np.isfinite(depth) & (depth > 0)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != depth.shape:
            raise ValueError("mask shape %s does not match depth %s" % (mask.shape, depth.shape))
        valid &= mask
    v, u = np.nonzero(valid)
    z = depth[v, u]
    x = (u - intr.cx) * z / intr.fx
    y = (v - intr.cy) * z / intr.fy
    return np.stack([x, y, z], axis=1)


def kabsch(src, dst, weights=None, allow_reflection=True):
    """Least-squares rotation/translation mapping ``src`` onto ``dst``.

    Returns ``(R, t, reflected)`` where ``reflected`` is True when the
    unconstrained orthogonal optimum had ``det = -1``; the returned ``R`` is
    always a proper rotation.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    w = np.ones(len(src)) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    mu_s = w @ src
    mu_d = w @ dst
    H = (src - mu_s).T @ ((dst - mu_d) * w[:, None])
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    reflected = d < 0
    if reflected and not allow_reflection:
        raise ValueError("best orthogonal alignment is a reflection")
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return R, mu_d - R @ mu_s, bool(reflected)


# --------------------------------------------------------------------------
# Primitive meshes
# --------------------------------------------------------------------------

def make_box(extents=(1.0, 1.0, 1.0)):
    """Axis-aligned box centered at the origin."""
    hx, hy, hz = np.asarray(extents, dtype=float) / 2.0
    v = np.array([[sx * hx, sy * hy, sz * hz]
                  for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)])
    # vertex index = 4*ix + 2*iy + iz
    f = np.array([
        [0, 1, 3], [0, 3, 2],  # -x
        [4, 6, 7], [4, 7, 5],  # +x
        [0, 4, 5], [0, 5, 1],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [0, 2, 6], [0, 6, 4],  # -z
        [1, 5, 7], [1, 7, 3],  # +z
    ])
    return TriMesh(v, f)


def make_cylinder(radius=0.5, height=1.0, segments=32):
    """Closed cylinder along z, centered at the origin."""
    ang = np.linspace(0, 2 * np.pi, segments, endpoint=False)
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    bottom = np.column_stack([ring, np.full(segments, -height / 2)])
    top = np.column_stack([ring, np.full(segments, height / 2)])
    v = np.vstack([bottom, top, [[0, 0, -height / 2], [0, 0, height / 2]]])
    cb, ct = 2 * segments, 2 * segments + 1
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces += [[i, j, segments + j], [i, segments + j, segments + i],
                  [cb, j, i], [ct, segments + i, segments + j]]
    return TriMesh(v, np.array(faces))


def make_composite():
    """Box body with a cylindrical handle on top (a crude bag/basket)."""
    body = make_box((0.8, 0.5, 0.6))
    handle = make_cylinder(0.06, 0.5, 16)
    R = Rotation.from_axis_angle([1, 0, 0], np.pi / 2).as_matrix()
    hv = handle.vertices @ R.T + np.array([0.0, -0.3, 0.0])
    return TriMesh.concatenate([body, TriMesh(hv, handle.faces)])


def make_capsule_mesh(a, b, radius, segments=10, rings=3):
    """Triangulated capsule between points ``a`` and ``b`` (for rendering)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    axis = b - a
    length = np.linalg.norm(axis)
    z = axis / length if length > 1e-12 else np.array([0.0, 0.0, 1.0])
    tmp = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(z, tmp)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    # latitude rings from the bottom pole to the top pole
    lats = []
    for k in range(1, rings + 1):
        phi = -np.pi / 2 + k * (np.pi / 2) / (rings + 1)
        lats.append((phi, a))
    for k in range(0, rings + 1):
        phi = k * (np.pi / 2) / (rings + 1)
        lats.append((phi, b))
    lats.insert(rings, (0.0, a))
    ang = np.linspace(0, 2 * np.pi, segments, endpoint=False)
    verts = [a - radius * z]
    for phi, c in lats:
        r = radius * np.cos(phi)
        h = radius * np.sin(phi)
        for t in ang:
            verts.append(c + r * (np.cos(t) * x + np.sin(t) * y) + h * z)
    verts.append(b + radius * z)
    verts = np.array(verts)
    nl = len(lats)
    faces = []
    for i in range(segments):
        j = (i + 1) % segments
        faces.append([0, 1 + j, 1 + i])
    for L in range(nl - 1):
        o0, o1 = 1 + L * segments, 1 + (L + 1) * segments
        for i in range(segments):
            j = (i + 1) % segments
            faces += [[o0 + i, o0 + j, o1 + j], [o0 + i, o1 + j, o1 + i]]
    top = len(verts) - 1
    o = 1 + (nl - 1) * segments
    for i in range(segments):
        j = (i + 1) % segments
        faces.append([top, o + i, o + j])
    return TriMesh(verts, np.array(faces))


def point_triangle_distance(p, a, b, c):
    """Exact distance from points ``p`` to triangles ``(a, b, c)`` (broadcasting).

    Closest-point classification over the triangle's Voronoi regions.
    """
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.sum(ab * ap, axis=-1)
    d2 = np.sum(ac * ap, axis=-1)
    bp = p - b
    d3 = np.sum(ab * bp, axis=-1)
    d4 = np.sum(ac * bp, axis=-1)
    cp = p - c
    d5 = np.sum(ab * cp, axis=-1)
    d6 = np.sum(ac * cp, axis=-1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    def safe_div(n, d):
        return n / np.where(d == 0, 1.0, d)

    # interior by default
    denom = va + vb + vc
    v = safe_div(vb, denom)
    w = safe_div(vc, denom)
    closest = a + v[..., None] * ab + w[..., None] * ac
    # edge regions
    t_bc = safe_div(d4 - d3, (d4 - d3) + (d5 - d6))
    m = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    closest = np.where(m[..., None], b + t_bc[..., None] * (c - b), closest)
    t_ac = safe_div(d2, d2 - d6)
    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    closest = np.where(m[..., None], a + t_ac[..., None] * ac, closest)
    t_ab = safe_div(d1, d1 - d3)
    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    closest = np.where(m[..., None], a + t_ab[..., None] * ab, closest)
    # vertex regions
    m = (d6 >= 0) & (d5 <= d6)
    closest = np.where(m[..., None], c, closest)
    m = (d3 >= 0) & (d4 <= d3)
    closest = np.where(m[..., None], b, closest)
    m = (d1 <= 0) & (d2 <= 0)
    closest = np.where(m[..., None], a, closest)
    return np.linalg.norm(p - closest, axis=-1)


def point_mesh_distance(points, mesh, chunk=2_000_000):
    """Exact unsigned distance from each point to the mesh surface."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    tri = mesh.triangles
    out = np.empty(len(points))
    step = max(1, chunk // max(1, len(tri)))
    for s in range(0, len(points), step):
        p = points[s:s + step, None, :]
        d = point_triangle_distance(p, tri[None, :, 0], tri[None, :, 1], tri[None, :, 2])
        out[s:s + step] = d.min(axis=1)
    return out


def winding_number(points, mesh, chunk=2_000_000):
    """Generalized winding number of ``mesh`` at each point.

    About 1 inside a closed outward-wound surface and 0 outside; overlapping
    closed parts add up.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    tri = mesh.triangles
    out = np.empty(len(points))
    step = max(1, chunk // max(1, len(tri)))
    for s in range(0, len(points), step):
        a, b, c = (tri[None, :, k] - points[s:s + step, None, :] for k in range(3))
        la, lb, lc = (np.linalg.norm(x, axis=-1) for x in (a, b, c))
        num = np.einsum("...i,...i->...", a, np.cross(b, c))
        den = (la * lb * lc + np.einsum("...i,...i->...", a, b) * lc
               + np.einsum("...i,...i->...", b, c) * la + np.einsum("...i,...i->...", c, a) * lb)
        out[s:s + step] = np.arctan2(num, den).sum(axis=1) / (2 * np.pi)
    return out
