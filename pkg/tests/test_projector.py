import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from angioatlas.imgcore import LabelVolume
from angioatlas.projector import (
    ConeBeamGeometry,
    load_geometry,
    magnification,
    normalized_integral,
    pixel_centers,
    place_geometry,
    project,
    save_geometry,
    silhouette_epsilon,
    trace_ray,
)

from oracles import march_length


def _volume(seed):
    rng = np.random.default_rng(seed)
    coarse = rng.integers(0, 4, size=(3, 4, 3))
    return LabelVolume(np.kron(coarse, np.ones((3, 2, 3), dtype=np.int64)),
                       tuple(rng.uniform(0.5, 2.0, 3)), tuple(rng.uniform(-5, 5, 3)))


def _ray(seed, vol):
    rng = np.random.default_rng(seed + 1000)
    nz, ny, nx = vol.data.shape
    size = np.array([nx, ny, nz]) * vol.spacing
    lo = np.asarray(vol.origin) - np.asarray(vol.spacing) / 2
    through = lo + rng.uniform(0.1, 0.9, 3) * size
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    return through - 2 * np.linalg.norm(size) * d, through + 2 * np.linalg.norm(size) * d


@pytest.mark.parametrize("seed", range(30))
def test_trace_matches_fine_marching_on_every_chord(seed):
    vol = _volume(seed)
    a, b = _ray(seed, vol)
    h = min(vol.spacing) / 2000
    want = march_length(vol.data, vol.spacing, vol.origin, {1, 2}, a, b, h)
    # midpoint sampling is off by at most one step per label boundary
    assert trace_ray(vol, {1, 2}, a, b) == pytest.approx(want, abs=30 * h)


def test_axis_aligned_chord_is_exact():
    vol = LabelVolume(np.ones((4, 5, 6), dtype=np.int32), (0.5, 1.5, 2.0), (0.0, 0.0, 0.0))
    # x extent: 6 voxels * 0.5 mm starting at -0.25
    assert trace_ray(vol, {1}, (-10.0, 2.0, 3.0), (10.0, 2.0, 3.0)) == pytest.approx(3.0, abs=1e-12)
    assert trace_ray(vol, {1}, (0.1, -10.0, 3.0), (0.1, 30.0, 3.0)) == pytest.approx(7.5, abs=1e-12)
    assert trace_ray(vol, {2}, (-10.0, 2.0, 3.0), (10.0, 2.0, 3.0)) == 0.0
    # segment ending inside the volume
    assert trace_ray(vol, {1}, (-10.0, 2.0, 3.0), (1.0, 2.0, 3.0)) == pytest.approx(1.25, abs=1e-12)


@given(st.integers(0, 10_000))
def test_trace_symmetric_and_additive(seed):
    vol = _volume(seed)
    a, b = _ray(seed, vol)
    l12 = trace_ray(vol, {1, 2}, a, b)
    assert trace_ray(vol, {1, 2}, b, a) == pytest.approx(l12, abs=1e-9)
    assert trace_ray(vol, {1}, a, b) + trace_ray(vol, {2}, a, b) == pytest.approx(l12, abs=1e-9)


def test_projection_per_label_sums_to_total(small_atlas):
    g = ConeBeamGeometry(sid=750, sdd=1200, det_cols=48, det_rows=40, det_spacing=(6.0, 6.0))
    proj = project(small_atlas, {1, 2, 3}, g)
    total = sum(im.data for im in proj.per_label_integral.values())
    np.testing.assert_allclose(total, proj.integral.data, atol=1e-12)
    assert proj.epsilon == silhouette_epsilon(small_atlas) == 0.5 * min(small_atlas.spacing)
    np.testing.assert_array_equal(proj.silhouette.data, proj.integral.data > proj.epsilon)
    assert normalized_integral(proj).data.max() == pytest.approx(1.0)


def test_projection_matches_per_pixel_trace(small_atlas):
    g = ConeBeamGeometry(sid=750, sdd=1200, det_cols=9, det_rows=7, det_spacing=(20.0, 20.0),
                         primary_angle=30.0, secondary_angle=-15.0)
    proj = project(small_atlas, {2, 5}, g)
    src = place_geometry(g).source
    pix = pixel_centers(g)
    for r in range(7):
        for c in range(9):
            assert proj.integral.data[r, c] == pytest.approx(trace_ray(small_atlas, {2, 5}, src, pix[r, c]),
                                                             abs=1e-9)


def test_empty_label_set_projects_to_zero(small_atlas):
    g = ConeBeamGeometry(sid=750, sdd=1200, det_cols=8, det_rows=8)
    proj = project(small_atlas, set(), g)
    assert not proj.integral.data.any() and not proj.silhouette.data.any()
    assert proj.per_label == {}


def test_detector_orientation():
    # a blob at +x, +z lands right of center and in the upper half for AP
    data = np.zeros((21, 21, 21), dtype=np.int32)
    data[15:19, 8:13, 15:19] = 1
    vol = LabelVolume(data, (2.0, 2.0, 2.0))
    g = ConeBeamGeometry(sid=750, sdd=1200, det_cols=64, det_rows=64, det_spacing=(2.0, 2.0))
    rows, cols = np.nonzero(project(vol, {1}, g).silhouette.data)
    assert cols.mean() > 32 and rows.mean() < 32
    # lateral: the beam runs along x, so the +x offset no longer moves the blob sideways by much
    lat = ConeBeamGeometry.for_view("Lateral", sid=750, sdd=1200, det_cols=64, det_rows=64, det_spacing=(2.0, 2.0))
    rows_l, cols_l = np.nonzero(project(vol, {1}, lat).silhouette.data)
    assert abs(cols_l.mean() - 31.5) < 3 and rows_l.mean() < 32


def test_magnification_of_a_point_pair():
    g = ConeBeamGeometry(sid=600, sdd=1000, det_cols=400, det_rows=4, det_spacing=(0.25, 0.25))
    assert magnification(g) == pytest.approx(1000 / 600)
    data = np.zeros((3, 3, 81), dtype=np.int32)
    data[:, :, [0, 80]] = 1
    vol = LabelVolume(data, (0.5, 0.5, 0.5))
    row = project(vol, {1}, g).integral.data[1]
    hits = np.nonzero(row > 0)[0]
    left, right = hits[hits < 200], hits[hits >= 200]
    span = (right.mean() - left.mean()) * 0.25
    assert span / 40.0 == pytest.approx(magnification(g), rel=0.01)


def test_geometry_json_and_validation(tmp_path):
    g = ConeBeamGeometry.for_view("Lateral", sid=700, sdd=1100, det_cols=10, det_rows=12, det_spacing=(0.3, 0.4))
    assert g.primary_angle == 90.0
    save_geometry(g, tmp_path / "g.json")
    assert load_geometry(tmp_path / "g.json") == g
    with pytest.raises(ValueError, match="sid < sdd"):
        ConeBeamGeometry(sid=1200, sdd=1000)
    with pytest.raises(ValueError):
        ConeBeamGeometry(sid=700, sdd=1100, det_spacing=(0.0, 1.0))


def test_source_and_detector_placement():
    g = ConeBeamGeometry(sid=750, sdd=1200, primary_angle=90.0)
    f = place_geometry(g)
    np.testing.assert_allclose(f.source, [750, 0, 0], atol=1e-9)
    np.testing.assert_allclose(f.center, [-450, 0, 0], atol=1e-9)
    assert math.isclose(np.dot(f.u, f.v), 0.0, abs_tol=1e-12)


def test_placement_at_zero_angles():
    f = place_geometry(ConeBeamGeometry(sid=750, sdd=1200))
    np.testing.assert_allclose(f.source, [0, 750, 0], atol=1e-9)
    np.testing.assert_allclose(f.center, [0, -450, 0], atol=1e-9)


def test_single_voxel_at_isocenter_is_a_central_blob():
    vol = LabelVolume(np.ones((1, 1, 1), dtype=np.int32), (2.0, 2.0, 2.0))
    g = ConeBeamGeometry(sid=750, sdd=1200, det_cols=33, det_rows=33, det_spacing=(1.0, 1.0))
    sil = project(vol, {1}, g).silhouette.data
    rows, cols = np.nonzero(sil)
    assert 0 < len(rows) <= 16
    assert rows.mean() == pytest.approx(16.0) and cols.mean() == pytest.approx(16.0)


def test_magnification_limits():
    assert magnification(ConeBeamGeometry(sid=750, sdd=1200)) == pytest.approx(1.6)
    assert magnification(ConeBeamGeometry(sid=1200 - 1e-6, sdd=1200)) == pytest.approx(1.0)
