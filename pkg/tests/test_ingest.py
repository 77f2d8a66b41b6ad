import numpy as np
import pytest

from gsps import imio
from gsps.core import Camera, Light
from gsps.errors import DataError, FormatError, ParameterError
from gsps.ingest import (ImageStack, default_lights, init_scene, load_diligent, save_diligent, synth_camera,
                         synth_geometry, synth_scene)
from gsps.metrics import angular_error_map


def center_pixel(res):
    return res // 2, res // 2


# --- synthetic generator ---------------------------------------------------

def test_sphere_frontal_light():
    res = 64
    stack = synth_scene("sphere", [Light(np.array([0, 0, 1.0]))], res)
    img = stack.images[0, ..., 0]
    # the pixel nearest the center sees n close to (0, 0, 1)
    r, c = center_pixel(res)
    assert img[r, c] == pytest.approx(stack.gt_normals[r, c, 2])
    assert img[r, c] > 0.999
    # silhouette rim: the outermost mask pixels are nearly grazing
    assert img[stack.mask].min() < 0.25
    assert np.all(img[~stack.mask] == 0)


def test_plane_constant_image():
    theta = np.radians(40)
    light = Light(np.array([np.sin(theta), 0.0, np.cos(theta)]))
    stack = synth_scene("plane", [light], 32)
    assert stack.mask.all()
    np.testing.assert_allclose(stack.images[0][stack.mask], np.cos(theta), rtol=0, atol=1e-15)


def test_sphere_side_light_half_dark():
    stack = synth_scene("sphere", [Light(np.array([1.0, 0, 0]))], 64)
    img = stack.images[0, ..., 0]
    nx = stack.gt_normals[..., 0]
    dark = stack.mask & (img == 0)
    # oracle: the attached-shadow hemisphere n . l <= 0
    np.testing.assert_array_equal(dark, stack.mask & (nx <= 0))
    # pixel centers are symmetric about the optical axis, so exactly half the disk is dark
    assert dark.sum() * 2 == stack.mask.sum()


def test_synth_errors_and_rgb_albedo():
    with pytest.raises(ParameterError):
        synth_scene("cube", default_lights(3), 32)
    with pytest.raises(ParameterError):
        synth_scene("sphere", default_lights(3), 8)
    s = synth_scene("plane", default_lights(3), 16, albedo=(0.2, 0.5, 1.0))
    assert s.images.shape == (3, 16, 16, 3)
    np.testing.assert_allclose(s.images[0, 0, 0] / s.images[0, 0, 0, 2], (0.2, 0.5, 1.0))


def test_gt_normals_round_trip_zero_error():
    for shape in ("sphere", "plane", "sphere_over_plane"):
        s = synth_scene(shape, default_lights(4), 32)
        err = angular_error_map(s.gt_normals, s.gt_normals, s.mask)
        assert np.nanmax(err) == 0.0


def test_sphere_over_plane_has_cast_shadows():
    light = Light.from_vector([0.6, 0.2, 0.75])
    s = synth_scene("sphere_over_plane", [light], 64)
    assert s.shadows[0].sum() > 100
    assert np.all(s.images[0][s.shadows[0]] == 0)


def test_few_lights_only_warn(caplog):
    s = synth_scene("sphere", default_lights(2), 16)
    assert len(s) == 2
    assert "fewer than the 3" in caplog.text


def test_image_stack_validation():
    with pytest.raises(ParameterError):
        ImageStack(np.zeros((3, 4, 4)), default_lights(2), np.ones((4, 4), bool))
    with pytest.raises(ParameterError):
        ImageStack(np.zeros((3, 4, 4)), default_lights(3), np.ones((5, 4), bool))
    with pytest.raises(FormatError):
        ImageStack(np.zeros((3, 4, 4)), default_lights(3), np.ones((4, 4), bool), gt_normals=np.zeros((4, 4, 3)))


# --- initialization ----------------------------------------------------------

def test_init_scene_examples():
    imgs = np.zeros((3, 16, 16, 1))
    imgs[:, 2, 3, 0] = (0.2, 0.7, 0.4)
    mask = np.zeros((16, 16), bool)
    mask[2:10, 3:13] = True
    stack = ImageStack(imgs, default_lights(3), mask)
    cam = synth_camera(16)
    sc = init_scene(stack, cam)
    assert len(sc) == mask.sum() == 80
    rows, cols = np.nonzero(mask)
    k = int(np.nonzero((rows == 2) & (cols == 3))[0][0])
    np.testing.assert_array_equal(sc.albedo[k], (0.7, 0.7, 0.7))
    dark = int(np.nonzero((rows == 5) & (cols == 5))[0][0])
    np.testing.assert_array_equal(sc.albedo[dark], (0, 0, 0))
    np.testing.assert_array_equal(sc.centers[:, 2], 0.0)
    np.testing.assert_array_equal(sc.opacity, 0.5)
    np.testing.assert_allclose(sc.scale_u, cam.pixel_pitch / 2)
    np.testing.assert_allclose(sc.normals(), np.tile([0, 0, 1.0], (80, 1)))
    # centers sit on each pixel's back-projection
    col, row, _ = cam.project(sc.centers)
    np.testing.assert_allclose(col, cols, atol=1e-9)
    np.testing.assert_allclose(row, rows, atol=1e-9)
    sc.validate()


def test_init_scene_albedo_dominates_observations():
    s = synth_scene("sphere", default_lights(6), 32, albedo=(0.3, 0.6, 0.9))
    sc = init_scene(s, synth_camera(32))
    rows, cols = np.nonzero(s.mask)
    obs = s.rgb()[:, rows, cols]
    assert np.all(sc.albedo[None] >= obs)


def test_init_scene_resolution_mismatch():
    s = synth_scene("plane", default_lights(3), 16)
    with pytest.raises(ParameterError):
        init_scene(s, synth_camera(32))


def test_init_scene_pinhole_scale_is_half_footprint():
    s = synth_scene("plane", default_lights(3), 16)
    cam = Camera.pinhole(16, 16, 20.0, position=(0, 0, 4.0))
    sc = init_scene(s, cam)
    t = 4.0
    np.testing.assert_allclose(sc.scale_u, t / 20.0 / 2)
    np.testing.assert_allclose(sc.centers[:, 2], 0.0, atol=1e-12)


# --- DiliGenT layout ---------------------------------------------------------

@pytest.fixture
def dataset(tmp_path):
    lights = [Light(l.direction, intensity=(0.9, 1.1, 1.3)) for l in default_lights(5)]
    s = synth_scene("sphere", lights, 24, albedo=(0.5, 0.6, 0.7))
    d = save_diligent(s, tmp_path / "obj")
    return s, d


def test_diligent_round_trip(dataset):
    s, d = dataset
    back = load_diligent(d)
    assert len(back) == 5
    np.testing.assert_array_equal(back.mask, s.mask)
    np.testing.assert_allclose(back.gt_normals, s.gt_normals, atol=1e-15)
    np.testing.assert_allclose(back.light_matrix(), s.light_matrix(), atol=1e-15)
    np.testing.assert_allclose(back.images, s.images / np.array([0.9, 1.1, 1.3]), atol=1e-4)
    assert back.meta["synth"]["shape"] == "sphere"


def test_diligent_calibration_reproduces_files(dataset):
    _, d = dataset
    back = load_diligent(d)
    for i, name in enumerate(back.meta["filenames"]):
        raw = imio.read_png_raw(d / name)
        again = np.round(back.images[i] * back.calibration[i] * 65535).astype(np.uint16)
        np.testing.assert_array_equal(again, raw)


def test_diligent_normal_png_fallback(dataset):
    s, d = dataset
    (d / "normal.txt").unlink()
    back = load_diligent(d)
    err = angular_error_map(back.gt_normals, s.gt_normals, s.mask)
    assert np.nanmax(err) < 0.01


def _drop_last_line(path):
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")


@pytest.mark.parametrize("mutate, error, match", [
    (lambda d: (d / "light_directions.txt").unlink(), DataError, "light_directions.txt"),
    (lambda d: (d / "mask.png").unlink(), DataError, "mask.png"),
    (lambda d: (d / "003.png").unlink(), DataError, "003.png"),
    (lambda d: (d / "filenames.txt").unlink(), DataError, "filenames.txt"),
    (lambda d: _drop_last_line(d / "light_directions.txt"), FormatError, "row count mismatch"),
    (lambda d: _drop_last_line(d / "light_intensities.txt"), FormatError, "row count mismatch"),
    (lambda d: imio.write_png(d / "mask.png", np.zeros((24, 24), np.uint8)), DataError, "empty foreground"),
    (lambda d: imio.write_png(d / "002.png", np.zeros((20, 24, 3))), FormatError, "resolution"),
    (lambda d: (d / "light_directions.txt").write_text("1 0\n" * 5), FormatError, "columns"),
    (lambda d: (d / "normal.txt").write_text("0 0 1\n" * 7), FormatError, "rows"),
    (lambda d: (d / "001.png").write_bytes(b"garbage"), FormatError, "001.png"),
])
def test_diligent_rejects_corruptions(dataset, mutate, error, match):
    _, d = dataset
    mutate(d)
    with pytest.raises(error, match=match):
        load_diligent(d)


def test_diligent_missing_directory(tmp_path):
    with pytest.raises(DataError, match="missing"):
        load_diligent(tmp_path / "nope")


def test_synth_geometry_depth_matches_camera():
    mask, n, depth, points, _ = synth_geometry("sphere", 32)
    cam = synth_camera(32)
    o, d = cam.rays()
    np.testing.assert_allclose(o[mask] + depth[mask][:, None] * d[mask], points[mask], atol=1e-12)
