"""Sequence evaluation: first-frame alignment, chamfer and acceleration errors.

All chamfer values are symmetric (mean of both directions) and reported in
centimeters; accelerations are in centimeters per frame squared.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .body_model import capsule_surface_template, fk_batch, pose_surface
from .geometry import RigidTransform, Rotation, as_points, chamfer, kabsch, sample_surface

CM = 100.0


@dataclass
class EvalReport:
    cd_h: float
    cd_o: float
    cd_c: float
    acc_h: float
    acc_o: float
    per_frame: dict = field(default_factory=dict)
    fps: float = 30.0
    label: str = ""

    @classmethod
    def from_series(cls, per_frame, fps=30.0, label=""):
        """Aggregate each series by its mean (empty series give 0)."""
        agg = {k: float(np.mean(v)) if len(v) else 0.0 for k, v in per_frame.items()}
        return cls(agg["cd_h"], agg["cd_o"], agg["cd_c"], agg["acc_h"], agg["acc_o"],
                   {k: [float(x) for x in v] for k, v in per_frame.items()}, fps, label)

    def summary(self):
        return {"cd_h": self.cd_h, "cd_o": self.cd_o, "cd_c": self.cd_c, "acc_h": self.acc_h, "acc_o": self.acc_o}

    def to_dict(self):
        return {"format_version": 1, "label": self.label, "fps": self.fps,
                "units": {"cd": "cm", "acc": "cm/frame^2"}, **self.summary(), "per_frame": self.per_frame}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @staticmethod
    def table(reports):
        """Aligned plain-text table, one row per report."""
        cols = ("cd_h", "cd_o", "cd_c", "acc_h", "acc_o")
        width = max([len("method")] + [len(r.label) for r in reports])
        lines = ["%-*s  " % (width, "method") + "  ".join("%9s" % c.upper().replace("_", "-") for c in cols)]
        for r in reports:
            s = r.summary()
            lines.append("%-*s  " % (width, r.label) + "  ".join("%9.4f" % s[c] for c in cols))
        return "\n".join(lines) + "\n"


def first_frame_align(pred_human_0, gt_human_0):
    """Rigid transform taking the first predicted human onto ground truth.

    Points correspond by index. No scale is estimated; an input whose best
    orthogonal fit is a reflection is rejected.
    """
    p = as_points(pred_human_0, "pred_human_0")
    g = as_points(gt_human_0, "gt_human_0")
    if p.shape != g.shape:
        raise ValueError("first-frame clouds differ in size: %d vs %d" % (len(p), len(g)))
    if len(p) < 3:
        raise ValueError("need at least 3 corresponding points")
    R, t, _ = kabsch(p, g, allow_reflection=False)
    return RigidTransform(Rotation.from_matrix(R), t)


def frame_chamfers(pred_h, pred_o, gt_h, gt_o):
    """Symmetric chamfers (cm) for human, object and their union."""
    cd_h = chamfer(pred_h, gt_h, "symmetric") * CM
    cd_o = chamfer(pred_o, gt_o, "symmetric") * CM
    cd_c = chamfer(np.vstack([pred_h, pred_o]), np.vstack([gt_h, gt_o]), "symmetric") * CM
    return cd_h, cd_o, cd_c


def sequence_chamfer(pred_seq, gt_seq, align=None):
    """Per-frame and mean chamfers over ``(human_points, object_points)`` frames.

    ``align`` is applied to every predicted frame. Returns
    ``((cd_h, cd_o, cd_c), per_frame)`` with per_frame a dict of lists.
    """
    if len(pred_seq) != len(gt_seq):
        raise ValueError("pred has %d frames, gt has %d" % (len(pred_seq), len(gt_seq)))
    if not pred_seq:
        raise ValueError("empty sequence")
    series = {"cd_h": [], "cd_o": [], "cd_c": []}
    for (ph, po), (gh, go) in zip(pred_seq, gt_seq):
        if align is not None:
            ph, po = align.apply(ph), align.apply(po)
        for k, v in zip(series, frame_chamfers(ph, po, gh, go)):
            series[k].append(v)
    return tuple(float(np.mean(series[k])) for k in series), series


def _second_diff(x):
    x = np.asarray(x, dtype=float)
    return x[2:] - 2.0 * x[1:-1] + x[:-2]


def acceleration_errors(pred_joints, gt_joints, pred_obj_t, gt_obj_t):
    """Mean per-joint and object-translation acceleration errors (cm/frame^2).

    Returns ``((acc_h, acc_o), per_frame)``; the error is the norm of the
    difference of second differences.
    """
    pj = np.asarray(pred_joints, dtype=float)
    gj = np.asarray(gt_joints, dtype=float)
    po = np.asarray(pred_obj_t, dtype=float).reshape(-1, 3)
    go = np.asarray(gt_obj_t, dtype=float).reshape(-1, 3)
    if pj.shape != gj.shape or po.shape != go.shape or len(pj) != len(po):
        raise ValueError("pred and gt trajectories differ in shape")
    if len(pj) < 3:
        raise ValueError("acceleration needs at least 3 frames, got %d" % len(pj))
    eh = np.linalg.norm(_second_diff(pj) - _second_diff(gj), axis=-1).mean(axis=-1) * CM
    eo = np.linalg.norm(_second_diff(po) - _second_diff(go), axis=-1) * CM
    return (float(eh.mean()), float(eo.mean())), {"acc_h": eh.tolist(), "acc_o": eo.tolist()}


class SurfaceSampler:
    """Fixed surface samples of the body and object, posed per frame."""

    def __init__(self, skel, object_mesh, n_object=2000, body_density=4000, seed=0):
        self.skel = skel
        self.template = capsule_surface_template(skel, body_density, seed)
        self.object_pts = sample_surface(object_mesh, n_object, seed)

    def frames(self, state):
        G, P = fk_batch(self.skel, state.body_rotations, state.body_translations)
        out = []
        for i in range(state.n_frames):
            h = pose_surface(self.template, G[i], P[i])
            o = self.object_pts @ state.object_rotations[i].T + state.object_translations[i]
            out.append((h, o))
        return out, P


def evaluate_sequence(pred, gt, skel, object_mesh, fps=30.0, label="", seed=0):
    """Full report for two trajectories with first-frame alignment."""
    if pred.n_frames != gt.n_frames:
        raise ValueError("pred has %d frames, gt has %d" % (pred.n_frames, gt.n_frames))
    sampler = SurfaceSampler(skel, object_mesh, seed=seed)
    pred_frames, pred_j = sampler.frames(pred)
    gt_frames, gt_j = sampler.frames(gt)
    align = first_frame_align(pred_frames[0][0], gt_frames[0][0])
    _, series = sequence_chamfer(pred_frames, gt_frames, align)
    # acceleration is measured in the aligned frame as well
    R = align.rotation.as_matrix()
    pj = pred_j @ R.T + align.translation
    po = pred.object_translations @ R.T + align.translation
    if pred.n_frames >= 3:
        _, acc = acceleration_errors(pj, gt_j, po, gt.object_translations)
    else:
        acc = {"acc_h": [], "acc_o": []}
    series.update(acc)
    return EvalReport.from_series(series, fps, label)
