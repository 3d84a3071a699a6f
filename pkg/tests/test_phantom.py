import json

import numpy as np
import pytest

from angioatlas.atlas import InjectionSite, select_labels
from angioatlas.imgcore import load_frames, read_nifti, read_png_mask
from angioatlas.phantom import (
    FRAME_BACKGROUND,
    PhantomError,
    WarpBounds,
    make_case,
    phantom_geometry,
    read_truth,
    site_of_label,
    synth_atlas,
    write_case,
)
from angioatlas.preproc import PreprocParams, dice, make_mask
from angioatlas.register import apply_transform


def test_atlas_is_seeded_and_labeled(small_atlas):
    again = synth_atlas(32, 6, seed=1)
    np.testing.assert_array_equal(again.data, small_atlas.data)
    assert small_atlas.labels() == {1, 2, 3, 4, 5, 6}
    counts = np.bincount(small_atlas.data.ravel())
    assert np.all(counts[1:] >= 0.01 * small_atlas.data.size)
    assert not np.array_equal(synth_atlas(32, 6, seed=2).data, small_atlas.data)


def test_atlas_validation():
    with pytest.raises(PhantomError):
        synth_atlas(16)
    with pytest.raises(PhantomError):
        synth_atlas(32, 1)


def test_lut_covers_every_site(small_atlas, small_lut):
    covered = set()
    for site in InjectionSite:
        ids = select_labels(small_lut, site)
        assert all(site_of_label(i) is site for i in ids)
        covered |= ids
    assert covered == small_atlas.labels()


@pytest.mark.parametrize("bounds", [
    dict(max_translation_px=21), dict(max_rotation_deg=11), dict(scale_range=(0.8, 1.0)),
    dict(max_bspline_px=9), dict(bspline_cells=0),
])
def test_warp_bounds_validation(bounds):
    with pytest.raises(PhantomError, match="invalid bounds"):
        WarpBounds(**bounds)


@pytest.mark.parametrize("seed", range(4))
def test_sampled_warp_respects_bounds(small_atlas, small_lut, seed):
    case = make_case(small_atlas, phantom_geometry(det=64), small_lut, seed=seed, n_frames=2)
    aff = case.true_affine
    assert abs(aff.rotation_deg()) <= 10
    assert 0.9 <= np.sqrt(aff.determinant()) <= 1.1
    assert np.hypot(*aff.translation) / case.geometry.det_spacing[0] <= 20 + 1e-9
    peak = np.max(np.hypot(case.true_field[..., 0], case.true_field[..., 1]))
    assert 0.75 * 8 - 1e-9 <= peak <= 8 + 1e-9


def test_affine_only_and_truth_mask(small_atlas, small_lut):
    case = make_case(small_atlas, phantom_geometry(det=64), small_lut, bounds=WarpBounds.affine_only(),
                     seed=3, noise_sigma=0.0)
    assert case.true_bspline is None and not case.true_field.any()
    warped = apply_transform(case.projection.silhouette.as_gray(), case.true_pair).data
    np.testing.assert_array_equal(case.true_mask.data, warped > 0.5)
    # noiseless frames: the background is flat and contrast only darkens
    peak = case.frames.frames[len(case.frames) // 2].data
    outside = peak[~case.true_mask.data]
    flat = np.rint(FRAME_BACKGROUND * 65535) / 65535
    assert np.mean(outside == flat) > 0.9
    assert peak[case.true_mask.data].mean() < outside.mean()


def test_frames_are_16_bit_quantized(small_atlas, small_lut):
    case = make_case(small_atlas, phantom_geometry(det=48), small_lut, seed=0, n_frames=3)
    for f in case.frames.frames:
        q = f.data * 65535
        np.testing.assert_allclose(q, np.rint(q), atol=1e-6)


def test_make_case_is_deterministic(small_atlas, small_lut):
    a = make_case(small_atlas, phantom_geometry(det=48), small_lut, seed=9, n_frames=3)
    b = make_case(small_atlas, phantom_geometry(det=48), small_lut, seed=9, n_frames=3)
    assert a.true_affine == b.true_affine
    np.testing.assert_array_equal(a.frames.stack(), b.frames.stack())


def test_write_case_round_trip(tmp_path, small_atlas, small_lut):
    case = make_case(small_atlas, phantom_geometry(det=48), small_lut, site="Posterior", seed=2, n_frames=4)
    d = write_case(case, tmp_path / "case")
    pair, fld = read_truth(d)
    assert pair.affine == case.true_affine
    np.testing.assert_array_equal(pair.bspline.coeffs, case.true_bspline.coeffs)
    np.testing.assert_allclose(fld, case.true_field, atol=1e-5)
    np.testing.assert_array_equal(read_nifti(d / "atlas.nii").data, small_atlas.data)
    np.testing.assert_array_equal(read_png_mask(d / "true_mask.png").data, case.true_mask.data)
    assert len(load_frames(d / "frames")) == 4
    cfg = json.loads((d / "case.json").read_text())
    assert cfg["site"] == "Posterior" and cfg["preproc"]["erosion_radius"] == 0
    assert json.loads((d / "truth.json").read_text())["seed"] == 2


def test_make_case_validation(small_atlas, small_lut):
    with pytest.raises(PhantomError):
        make_case(small_atlas, phantom_geometry(det=32), small_lut, noise_sigma=-1)
    with pytest.raises(PhantomError):
        make_case(small_atlas, phantom_geometry(det=32), small_lut, n_frames=0)


def test_two_territory_atlas():
    vol = synth_atlas(32, 2, seed=7)
    assert vol.labels() == {1, 2}
    counts = np.bincount(vol.data.ravel(), minlength=3)
    assert np.all(counts[1:] >= 0.01 * vol.data.size)
    with pytest.raises(PhantomError):
        synth_atlas(32, 0)


@pytest.mark.parametrize("sigma, bounds, floor", [
    (0.0, WarpBounds.identity(), 0.99),
    (0.05, WarpBounds(), 0.9),
])
def test_mask_recovers_the_truth(small_atlas, small_lut, sigma, bounds, floor):
    case = make_case(small_atlas, phantom_geometry(det=96), small_lut, bounds=bounds, noise_sigma=sigma, seed=4)
    if sigma == 0.0:
        np.testing.assert_array_equal(case.true_mask.data, case.projection.silhouette.data)
    mask = make_mask(case.frames, PreprocParams(erosion_radius=0))
    assert dice(mask, case.true_mask) >= floor
