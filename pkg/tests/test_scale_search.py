import numpy as np
import pytest

from hoikit.geometry import CameraIntrinsics, RigidTransform, Rotation, make_box
from hoikit.raster import render_instances
from hoikit.scale_search import (OraclePoseEstimator, ScaleSearch, ScaleSearchConfig, ScaleSearchError,
                                 default_coarse_scales, estimate_scale, refine_scales, score_scale)

INTR = CameraIntrinsics(300.0, 300.0, 159.5, 119.5, 320, 240)
UNIT_BOX = make_box((1.0, 0.75, 0.5))
GRID = np.round(np.arange(0.5, 2.0001, 0.1), 10)


def fixture(scale, pose=None):
    pose = pose or RigidTransform(Rotation.from_rotvec([0.5, 0.7, 0.1]), np.array([0.05, -0.02, 3.5]))
    r = render_instances([(UNIT_BOX.scaled(scale), pose)], INTR)
    return r.depth, r.masks[0], pose


class Counting:
    def __init__(self, inner):
        self.inner, self.calls = inner, 0

    def estimate(self, *args):
        self.calls += 1
        return self.inner.estimate(*args)


class Failing:
    def estimate(self, *args):
        raise RuntimeError("no pose")


def test_default_grid():
    g = default_coarse_scales()
    assert len(g) == 28 and g[0] == pytest.approx(0.3) and g[-1] == pytest.approx(3.0)
    assert np.allclose(np.diff(np.log(g)), np.log(10) / 27)


def test_config_validation():
    with pytest.raises(ValueError):
        ScaleSearchConfig(coarse_scales=[1.0, 0.5])
    with pytest.raises(ValueError):
        ScaleSearchConfig(coarse_scales=[0.5, 1.0], top_k=3)
    with pytest.raises(ValueError):
        ScaleSearchConfig(coarse_scales=[-1.0, 1.0])


def test_oracle_score_below_half_footprint_and_grows_with_scale():
    depth, mask, pose = fixture(1.2)
    est = OraclePoseEstimator(pose)
    _, s_gt, failed = score_scale(UNIT_BOX, 1.2, est, depth, mask, INTR)
    assert not failed
    assert s_gt < 0.5 * INTR.pixel_footprint(depth[mask].max())
    _, s_2x, _ = score_scale(UNIT_BOX, 2.4, est, depth, mask, INTR)
    assert s_2x > s_gt


def test_empty_mask_is_error():
    depth, mask, pose = fixture(1.0)
    with pytest.raises(ValueError):
        score_scale(UNIT_BOX, 1.0, OraclePoseEstimator(pose), depth, np.zeros_like(mask), INTR)


def test_estimator_failure_scores_infinity():
    depth, mask, _ = fixture(1.0)
    pose, s, failed = score_scale(UNIT_BOX, 1.0, Failing(), depth, mask, INTR)
    assert pose is None and s == np.inf and failed


def test_all_failed_carries_diagnostics():
    depth, mask, _ = fixture(1.0)
    with pytest.raises(ScaleSearchError) as exc:
        estimate_scale(UNIT_BOX, depth, mask, INTR, ScaleSearchConfig(GRID), Failing())
    assert len(exc.value.diagnostics) == len(GRID)


def test_refine_grid_is_interior_and_uniform():
    cfg = ScaleSearchConfig(GRID)
    scores = np.abs(GRID - 1.37)
    r = refine_scales(GRID, scores, cfg)
    assert len(r) == 10
    lo, hi = 0.8 * 1.3, 1.2 * 1.5
    assert r.min() > lo and r.max() < hi
    assert np.allclose(np.diff(r), (hi - lo) / 11)


def test_oracle_search_recovers_scale_and_counts_evaluations():
    depth, mask, pose = fixture(1.37)
    est = Counting(OraclePoseEstimator(pose))
    res = estimate_scale(UNIT_BOX, depth, mask, INTR, ScaleSearchConfig(GRID), est)
    assert est.calls == len(GRID) + 10 == res.n_evaluations
    assert abs(res.scale / 1.37 - 1) < 0.02
    assert res.score == min(r[2] for r in res.per_candidate_scores)
    assert sum(r[0] == "refine" for r in res.per_candidate_scores) == 10


def test_refinement_never_worse_than_coarse_hit():
    depth, mask, pose = fixture(1.2)
    res = estimate_scale(UNIT_BOX, depth, mask, INTR, ScaleSearchConfig(GRID), OraclePoseEstimator(pose))
    coarse = {round(s, 6): v for st, s, v, _ in res.per_candidate_scores if st == "coarse"}
    assert res.score <= coarse[1.2]


def test_enlarging_grid_never_increases_best_score():
    depth, mask, pose = fixture(0.9)
    est = OraclePoseEstimator(pose)
    small = estimate_scale(UNIT_BOX, depth, mask, INTR, ScaleSearchConfig(GRID[::3]), est)
    large = estimate_scale(UNIT_BOX, depth, mask, INTR, ScaleSearchConfig(GRID), est)
    # the enlarged grid contains every coarse candidate of the small grid
    assert large.score <= min(v for st, _, v, _ in small.per_candidate_scores if st == "coarse")


def test_estimator_api_and_determinism():
    depth, mask, pose = fixture(1.1)
    est = ScaleSearch(coarse_scales=GRID, estimator=OraclePoseEstimator(pose))
    assert est.get_params()["top_k"] == 3 and est.get_params()["refine_count"] == 10
    a = est.fit(UNIT_BOX, depth, mask, INTR).scale_
    b = ScaleSearch(coarse_scales=GRID, estimator=OraclePoseEstimator(pose)).fit(UNIT_BOX, depth, mask, INTR).scale_
    assert a == b
    assert np.allclose(est.transform(UNIT_BOX).vertices, UNIT_BOX.vertices * a)


def test_model_samples_skip_buried_surface():
    from hoikit.geometry import make_composite, point_mesh_distance, TriMesh
    from hoikit.scale_search import _samples_with_normals

    comp = make_composite()
    pts, nrm = _samples_with_normals(comp, 4000, 0)
    body = TriMesh(comp.vertices[:8], comp.faces[:12])  # the box part
    # no sample of the handle may sit strictly inside the box, and no box
    # sample inside the handle
    inside_box = (np.abs(pts) < [0.4 - 1e-6, 0.25 - 1e-6, 0.3 - 1e-6]).all(axis=1)
    assert not inside_box.any()
    on_box = point_mesh_distance(pts, body) < 1e-9
    # the handle is a 16-gon, so use its inscribed radius
    in_handle = on_box & (np.hypot(pts[:, 0], pts[:, 2]) < 0.06 * np.cos(np.pi / 16) - 1e-6) & (np.abs(pts[:, 1] + 0.25) < 1e-6)
    assert not in_handle.any()
    assert len(pts) > 3500 and np.allclose(np.linalg.norm(nrm, axis=1), 1.0)
