"""Software z-buffer rasterizer.

Coverage is decided by sampling each pixel center (integer pixel
coordinates). All triangles of all instances are expanded into
(triangle, pixel) candidate pairs inside their screen bounding boxes, which
keeps the work vectorised; the nearest surface wins each pixel and depth ties
go to the lower instance index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NEAR_PLANE = 1e-3


@dataclass
class InstanceRender:
    masks: list
    depth: np.ndarray
    instance_id: np.ndarray  # -1 for background

    def union(self):
        return self.instance_id >= 0


def _posed_triangles(scene):
    tris, inst = [], []
    for k, (mesh, pose) in enumerate(scene):
        v = pose.apply(mesh.vertices) if pose is not None else mesh.vertices
        t = v[mesh.faces]
        tris.append(t)
        inst.append(np.full(len(t), k, dtype=np.int64))
    if not tris:
        return np.zeros((0, 3, 3)), np.zeros(0, dtype=np.int64)
    return np.concatenate(tris), np.concatenate(inst)


def render_instances(scene, intr, chunk_pairs=4_000_000):
    """Rasterize ``[(TriMesh, RigidTransform), ...]`` into masks and fused depth.

    Triangles with any vertex closer than the near plane are skipped (no
    clipping). Back faces are rendered.
    """
    H, W = intr.shape
    n_inst = len(scene)
    depth = np.zeros((H, W))
    inst_id = np.full((H, W), -1, dtype=np.int64)
    tris, tri_inst = _posed_triangles(scene)
    if len(tris):
        keep = np.all(tris[:, :, 2] > NEAR_PLANE, axis=1)
        tris, tri_inst = tris[keep], tri_inst[keep]
    if len(tris):
        z = tris[:, :, 2]
        u = intr.fx * tris[:, :, 0] / z + intr.cx
        v = intr.fy * tris[:, :, 1] / z + intr.cy
        u0 = np.clip(np.ceil(u.min(axis=1)), 0, W).astype(np.int64)
        u1 = np.clip(np.floor(u.max(axis=1)), -1, W - 1).astype(np.int64)
        v0 = np.clip(np.ceil(v.min(axis=1)), 0, H).astype(np.int64)
        v1 = np.clip(np.floor(v.max(axis=1)), -1, H - 1).astype(np.int64)
        bw = np.maximum(u1 - u0 + 1, 0)
        bh = np.maximum(v1 - v0 + 1, 0)
        area = bw * bh
        live = np.nonzero(area > 0)[0]
        best_z = np.full(H * W, np.inf)
        best_i = np.full(H * W, -1, dtype=np.int64)
        # process in chunks of triangles to bound memory
        start = 0
        cum = np.cumsum(area[live])
        while start < len(live):
            base = cum[start - 1] if start else 0
            stop = int(np.searchsorted(cum, base + chunk_pairs, side="right"))
            stop = max(stop, start + 1)
            ids = live[start:stop]
            _raster_chunk(ids, u, v, z, u0, v0, bw, area, tri_inst, W, best_z, best_i)
            start = stop
        hit = best_i >= 0
        depth.reshape(-1)[hit] = best_z[hit]
        inst_id.reshape(-1)[:] = best_i
    masks = [inst_id == k for k in range(n_inst)]
    return InstanceRender(masks=masks, depth=depth, instance_id=inst_id)


def _raster_chunk(ids, u, v, z, u0, v0, bw, area, tri_inst, W, best_z, best_i):
    counts = area[ids]
    tri = np.repeat(ids, counts)
    offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    px = u0[tri] + offs % bw[tri]
    py = v0[tri] + offs // bw[tri]
    ua, ub, uc = u[tri, 0], u[tri, 1], u[tri, 2]
    va, vb, vc = v[tri, 0], v[tri, 1], v[tri, 2]
    den = (vb - vc) * (ua - uc) + (uc - ub) * (va - vc)
    ok = np.abs(den) > 1e-12
    den = np.where(ok, den, 1.0)
    l0 = ((vb - vc) * (px - uc) + (uc - ub) * (py - vc)) / den
    l1 = ((vc - va) * (px - uc) + (ua - uc) * (py - vc)) / den
    l2 = 1.0 - l0 - l1
    eps = -1e-9
    inside = ok & (l0 >= eps) & (l1 >= eps) & (l2 >= eps)
    tri, px, py = tri[inside], px[inside], py[inside]
    l0, l1, l2 = l0[inside], l1[inside], l2[inside]
    # perspective-correct depth: 1/z is affine in screen space
    inv_z = l0 / z[tri, 0] + l1 / z[tri, 1] + l2 / z[tri, 2]
    zz = 1.0 / inv_z
    pix = py * W + px
    inst = tri_inst[tri]
    # fold in the current buffer so chunks compose
    pix = np.concatenate([pix, np.nonzero(best_i >= 0)[0]])
    zz = np.concatenate([zz, best_z[best_i >= 0]])
    inst = np.concatenate([inst, best_i[best_i >= 0]])
    order = np.lexsort((inst, zz, pix))
    pix, zz, inst = pix[order], zz[order], inst[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    best_z[pix[first]] = zz[first]
    best_i[pix[first]] = inst[first]


def render_mask(mesh, pose, intr):
    """Binary silhouette of one posed mesh."""
    return render_instances([(mesh, pose)], intr).masks[0]
