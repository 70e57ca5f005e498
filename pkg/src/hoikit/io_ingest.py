"""File formats and manifest loading.

Conventions, in one place:

* quaternions are ``[w, x, y, z]``; translations are meters;
* images are row-major ``(height, width)`` with pixel centers at integer
  coordinates;
* depth maps are grayscale PFM (``Pf``), little-endian, rows stored bottom to
  top;
* masks are 8-bit grayscale PNG, any nonzero value is foreground on read and
  255 is written;
* every JSON document carries ``"format_version": 1``; trajectories are JSON
  Lines with one frame per line.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .body_model import Skeleton
from .contact_opt import TrajectoryState
from .geometry import CameraIntrinsics, RigidTransform, Rotation, TriMesh
from .hypothesis_select import PROVENANCE, CandidatePool, PoseCandidate

FORMAT_VERSION = 1

TRAJECTORY_PROVENANCE = PROVENANCE + ("optimized", "ground_truth", "interpolated")


class FormatError(ValueError):
    pass


def _check_version(doc, what):
    v = doc.get("format_version") if isinstance(doc, dict) else None
    if v != FORMAT_VERSION:
        raise FormatError("%s: unsupported format_version %r (expected %d)" % (what, v, FORMAT_VERSION))


# --------------------------------------------------------------------------
# PFM
# --------------------------------------------------------------------------

def write_pfm(path, depth):
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise ValueError("PFM writer expects a 2D grid, got shape %s" % (depth.shape,))
    H, W = depth.shape
    data = np.ascontiguousarray(np.flipud(depth).astype("<f4"))
    with open(path, "wb") as fh:
        fh.write(b"Pf\n%d %d\n-1.0\n" % (W, H))
        fh.write(data.tobytes())


def read_pfm(path):
    """Grayscale little-endian PFM as a float32 ``(H, W)`` array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    lines = raw.split(b"\n", 3)
    if len(lines) < 4:
        raise FormatError("%s: truncated PFM header" % path)
    magic, dims, scale_tok, payload = lines
    if magic.strip() == b"PF":
        raise FormatError("%s: color PFM is not supported" % path)
    if magic.strip() != b"Pf":
        raise FormatError("%s: not a PFM file" % path)
    try:
        W, H = (int(x) for x in dims.split())
        scale = float(scale_tok)
    except ValueError:
        raise FormatError("%s: malformed PFM header" % path) from None
    if W <= 0 or H <= 0:
        raise FormatError("%s: bad PFM dimensions %dx%d" % (path, W, H))
    if scale >= 0:
        raise FormatError("%s: unsupported endianness (big-endian PFM)" % path)
    if len(payload) != 4 * W * H:
        raise FormatError("%s: expected %d bytes of pixel data, found %d" % (path, 4 * W * H, len(payload)))
    return np.flipud(np.frombuffer(payload, dtype="<f4").reshape(H, W)).astype(np.float32)


# --------------------------------------------------------------------------
# PNG masks
# --------------------------------------------------------------------------

def write_mask(path, mask):
    mask = np.asarray(mask, dtype=bool)
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path, format="PNG")


def read_mask(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L") if im.mode not in ("L", "1", "I", "I;16") else im)
    if arr.ndim != 2:
        raise FormatError("%s: mask must be single-channel" % path)
    return arr != 0


# --------------------------------------------------------------------------
# JSON documents
# --------------------------------------------------------------------------

def _dump(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def _load(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError("%s: invalid JSON (%s)" % (path, exc)) from None


def _pose_to_json(pose):
    return {"q": [float(x) for x in pose.rotation.quat], "t": [float(x) for x in pose.translation]}


def _pose_from_json(d):
    return RigidTransform(Rotation(np.asarray(d["q"], dtype=float)), np.asarray(d["t"], dtype=float))


def write_joints(path, frame, joints2d, conf):
    rows = [[float(u), float(v), float(c)] for (u, v), c in zip(np.asarray(joints2d), np.asarray(conf))]
    _dump(path, {"format_version": FORMAT_VERSION, "frame": int(frame), "joints": rows})


def read_joints(path):
    doc = _load(path)
    _check_version(doc, path)
    arr = np.asarray(doc["joints"], dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise FormatError("%s: joints must be a list of [u, v, confidence]" % path)
    return int(doc["frame"]), arr[:, :2], arr[:, 2]


def write_pool(path, pool):
    doc = {"format_version": FORMAT_VERSION, "frame": int(pool.frame_index), "candidates": [
        {**_pose_to_json(c.pose), "score": float(c.score), "source": c.source} for c in pool.candidates]}
    _dump(path, doc)


def read_pool(path):
    doc = _load(path)
    _check_version(doc, path)
    try:
        cands = [PoseCandidate(_pose_from_json(c), float(c["score"]), c.get("source", "rgbd"))
                 for c in doc["candidates"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError("%s: malformed candidate (%s)" % (path, exc)) from None
    return CandidatePool(int(doc["frame"]), cands)


def write_contacts(path, contacts, source="labels"):
    c = np.asarray(contacts, dtype=int)
    _dump(path, {"format_version": FORMAT_VERSION, "source": source, "contacts": c.tolist()})


def read_contacts(path):
    doc = _load(path)
    _check_version(doc, path)
    c = np.asarray(doc["contacts"], dtype=int)
    if c.ndim != 2 or c.shape[1] != 2 or not np.isin(c, (0, 1)).all():
        raise FormatError("%s: contacts must be binary pairs" % path)
    return c


def write_skeleton(path, skel):
    skel.save(path)


def read_skeleton(path):
    doc = _load(path)
    _check_version(doc, path)
    return Skeleton.from_dict(doc)


def write_obj(path, mesh):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write("v %r %r %r\n" % tuple(float(x) for x in v))
        for f in mesh.faces:
            fh.write("f %d %d %d\n" % tuple(int(i) + 1 for i in f))


def read_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                # fan-triangulate polygons
                faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
    if not verts or not faces:
        raise FormatError("%s: mesh has no vertices or faces" % path)
    return TriMesh(np.asarray(verts), np.asarray(faces))


# --------------------------------------------------------------------------
# Trajectories (JSON Lines)
# --------------------------------------------------------------------------

@dataclass
class Trajectory:
    state: TrajectoryState
    frames: list
    contacts: np.ndarray
    provenance: list
    contact_source: str = "labels"


def write_trajectory(path, state, frames=None, contacts=None, provenance=None, contact_source="labels"):
    N = state.n_frames
    frames = list(range(1, N + 1)) if frames is None else [int(f) for f in frames]
    contacts = np.zeros((N, 2), dtype=int) if contacts is None else np.asarray(contacts, dtype=int)
    provenance = ["optimized"] * N if provenance is None else list(provenance)
    if not (len(frames) == len(contacts) == len(provenance) == N):
        raise ValueError("frames, contacts and provenance must all have %d entries" % N)
    for tag in provenance:
        if tag not in TRAJECTORY_PROVENANCE:
            raise ValueError("unknown provenance tag %r" % tag)
    with open(path, "w") as fh:
        for i in range(N):
            body_q = [[float(x) for x in Rotation.from_matrix(R).quat] for R in state.body_rotations[i]]
            rec = {
                "format_version": FORMAT_VERSION,
                "frame": frames[i],
                "object": {"q": [float(x) for x in Rotation.from_matrix(state.object_rotations[i]).quat],
                           "t": [float(x) for x in state.object_translations[i]]},
                "body": {"rotations": body_q, "root_translation": [float(x) for x in state.body_translations[i]]},
                "betas": [float(b) for b in state.betas],
                "contacts": [int(c) for c in contacts[i]],
                "contact_source": contact_source,
                "provenance": provenance[i],
            }
            fh.write(json.dumps(rec) + "\n")


def read_trajectory(path, n_frames=None, first_frame=1):
    """Read a trajectory; frames must run contiguously from ``first_frame``.

    With ``n_frames`` given, a short or long file is an error naming the
    first missing (or unexpected) frame.
    """
    recs = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError("%s line %d: invalid JSON (%s)" % (path, ln, exc)) from None
            _check_version(rec, "%s line %d" % (path, ln))
            recs.append(rec)
    frames = [int(r["frame"]) for r in recs]
    for k, f in enumerate(frames):
        if f != first_frame + k:
            raise FormatError("%s: expected frame %d at line %d, found frame %d"
                              % (path, first_frame + k, k + 1, f))
    if n_frames is not None and len(recs) != n_frames:
        if len(recs) < n_frames:
            raise FormatError("%s: %d of %d frames present; frame %d is missing"
                              % (path, len(recs), n_frames, first_frame + len(recs)))
        raise FormatError("%s: %d frames present, manifest has %d (unexpected frame %d)"
                          % (path, len(recs), n_frames, first_frame + n_frames))
    if not recs:
        raise FormatError("%s: empty trajectory" % path)
    prov = []
    for r in recs:
        if r["provenance"] not in TRAJECTORY_PROVENANCE:
            raise FormatError("%s: frame %d has unknown provenance %r" % (path, r["frame"], r["provenance"]))
        prov.append(r["provenance"])
    body_R = np.stack([[Rotation(np.asarray(q, dtype=float)).as_matrix() for q in r["body"]["rotations"]]
                       for r in recs])
    state = TrajectoryState(
        body_rotations=body_R,
        body_translations=np.array([r["body"]["root_translation"] for r in recs], dtype=float),
        object_rotations=np.stack([Rotation(np.asarray(r["object"]["q"], dtype=float)).as_matrix() for r in recs]),
        object_translations=np.array([r["object"]["t"] for r in recs], dtype=float),
        betas=list(recs[0].get("betas", [])),
    )
    contacts = np.array([r.get("contacts", [0, 0]) for r in recs], dtype=int)
    return Trajectory(state, frames, contacts, prov, recs[0].get("contact_source", "labels"))


# --------------------------------------------------------------------------
# Manifests
# --------------------------------------------------------------------------

@dataclass
class SequenceBundle:
    intrinsics: CameraIntrinsics
    mesh: TriMesh
    skeleton: Skeleton
    depths: list = field(default_factory=list)
    obj_masks: list = field(default_factory=list)
    human_masks: list = field(default_factory=list)
    joints2d: np.ndarray = None
    joints2d_conf: np.ndarray = None
    pools: list = None
    contacts: np.ndarray = None
    refined_poses: list = None
    frames: list = field(default_factory=list)
    fps: float = 30.0

    @property
    def n_frames(self):
        return len(self.frames)


def write_manifest(directory, bundle):
    """Write every frame file and ``manifest.json`` under ``directory``."""
    os.makedirs(directory, exist_ok=True)
    for sub in ("depth", "mask_obj", "mask_human", "joints", "candidates"):
        os.makedirs(os.path.join(directory, sub), exist_ok=True)
    write_obj(os.path.join(directory, "object.obj"), bundle.mesh)
    write_skeleton(os.path.join(directory, "skeleton.json"), bundle.skeleton)
    frames = []
    for k, f in enumerate(bundle.frames):
        entry = {"index": int(f)}
        name = "%06d" % f
        if bundle.depths:
            entry["depth"] = "depth/%s.pfm" % name
            write_pfm(os.path.join(directory, entry["depth"]), bundle.depths[k])
        entry["obj_mask"] = "mask_obj/%s.png" % name
        write_mask(os.path.join(directory, entry["obj_mask"]), bundle.obj_masks[k])
        entry["human_mask"] = "mask_human/%s.png" % name
        write_mask(os.path.join(directory, entry["human_mask"]), bundle.human_masks[k])
        if bundle.joints2d is not None:
            entry["joints2d"] = "joints/%s.json" % name
            write_joints(os.path.join(directory, entry["joints2d"]), f, bundle.joints2d[k], bundle.joints2d_conf[k])
        if bundle.pools is not None:
            entry["candidates"] = "candidates/%s.json" % name
            write_pool(os.path.join(directory, entry["candidates"]), bundle.pools[k])
        frames.append(entry)
    doc = {"format_version": FORMAT_VERSION, "intrinsics": bundle.intrinsics.as_dict(), "fps": bundle.fps,
           "object_mesh": "object.obj", "skeleton": "skeleton.json", "frames": frames}
    if bundle.contacts is not None:
        doc["contacts"] = "contacts.json"
        write_contacts(os.path.join(directory, "contacts.json"), bundle.contacts)
    path = os.path.join(directory, "manifest.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
    return path


def load_manifest(path):
    """Load and validate every file a manifest references."""
    doc = _load(path)
    _check_version(doc, path)
    root = os.path.dirname(os.path.abspath(path))

    def resolve(rel, frame=None):
        p = os.path.join(root, rel)
        if not os.path.exists(p):
            where = " (frame %d)" % frame if frame is not None else ""
            raise FileNotFoundError("missing file %s%s" % (p, where))
        return p

    try:
        intr = CameraIntrinsics(**doc["intrinsics"])
        frame_docs = doc["frames"]
    except (KeyError, TypeError) as exc:
        raise FormatError("%s: malformed manifest (%s)" % (path, exc)) from None
    mesh = read_obj(resolve(doc["object_mesh"]))
    skel = read_skeleton(resolve(doc["skeleton"]))
    bundle = SequenceBundle(intr, mesh, skel, fps=float(doc.get("fps", 30.0)))
    joints, confs, pools = [], [], []
    for k, fd in enumerate(frame_docs):
        f = int(fd["index"])
        if f != k + 1:
            raise FormatError("%s: frame indices must be contiguous from 1; entry %d has index %d" % (path, k + 1, f))
        bundle.frames.append(f)
        if "depth" in fd:
            d = read_pfm(resolve(fd["depth"], f))
            if d.shape != intr.shape:
                raise FormatError("frame %d: depth is %s, intrinsics say %s" % (f, d.shape, intr.shape))
            bundle.depths.append(d)
        for key, dest in (("obj_mask", bundle.obj_masks), ("human_mask", bundle.human_masks)):
            if key not in fd:
                raise FormatError("frame %d: no %s entry" % (f, key))
            m = read_mask(resolve(fd[key], f))
            if m.shape != intr.shape:
                raise FormatError("frame %d: %s is %s, intrinsics say %s" % (f, key, m.shape, intr.shape))
            dest.append(m)
        if "joints2d" in fd:
            jf, j, c = read_joints(resolve(fd["joints2d"], f))
            if jf != f:
                raise FormatError("frame %d: joints file is labelled frame %d" % (f, jf))
            if len(j) != skel.n_joints:
                raise FormatError("frame %d: %d joints, skeleton has %d" % (f, len(j), skel.n_joints))
            joints.append(j)
            confs.append(c)
        if "candidates" in fd:
            pool = read_pool(resolve(fd["candidates"], f))
            if pool.frame_index != f:
                raise FormatError("frame %d: candidate file is labelled frame %d" % (f, pool.frame_index))
            pools.append(pool)
    N = bundle.n_frames
    if joints:
        if len(joints) != N:
            raise FormatError("%s: 2D joints present for %d of %d frames" % (path, len(joints), N))
        bundle.joints2d = np.stack(joints)
        bundle.joints2d_conf = np.stack(confs)
    if pools:
        if len(pools) != N:
            raise FormatError("%s: candidate pools present for %d of %d frames" % (path, len(pools), N))
        bundle.pools = pools
    if bundle.depths and len(bundle.depths) != N:
        raise FormatError("%s: depth present for %d of %d frames" % (path, len(bundle.depths), N))
    if "contacts" in doc:
        c = read_contacts(resolve(doc["contacts"]))
        if len(c) != N:
            raise FormatError("%s: contacts cover %d of %d frames" % (path, len(c), N))
        bundle.contacts = c
    if "refined_poses" in doc:
        traj = read_trajectory(resolve(doc["refined_poses"]), N)
        bundle.refined_poses = [traj.state.object_pose(i) for i in range(N)]
    return bundle
