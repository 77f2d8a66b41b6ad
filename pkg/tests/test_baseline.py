import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gsps.baseline import luminance, woodham, woodham_robust
from gsps.core import Light
from gsps.errors import ParameterError
from gsps.ingest import ImageStack, default_lights, synth_scene
from gsps.metrics import angular_error_map

AXES = [Light(np.array(e, float)) for e in np.eye(3)]


def one_pixel(obs, lights=AXES):
    return ImageStack(np.asarray(obs, float).reshape(-1, 1, 1), lights, np.ones((1, 1), bool))


def lit_everywhere(stack):
    """Foreground pixels where every light sees the surface (n . l > 0)."""
    return stack.mask & np.all(stack.gt_normals @ stack.light_matrix().T > 0, axis=-1)


def test_axis_lights_examples():
    n, rho = woodham(one_pixel([0, 0, 1]))
    np.testing.assert_array_equal(n[0, 0], (0, 0, 1))
    assert rho[0, 0] == 1.0
    s = 1 / np.sqrt(3)
    n, rho = woodham(one_pixel([s, s, s]))
    np.testing.assert_allclose(n[0, 0], (s, s, s), atol=1e-15)
    assert rho[0, 0] == pytest.approx(1.0, abs=1e-15)


def test_degenerate_pixel_flagged_with_zero_normal():
    n, rho = woodham(one_pixel([0, 0, 0]))
    assert np.all(n == 0) and rho[0, 0] == 0


@pytest.mark.parametrize("shape", ["sphere", "plane"])
def test_exact_recovery_on_noiseless_data(shape):
    s = synth_scene(shape, default_lights(8), 64, albedo=0.8)
    n, rho = woodham(s)
    dom = lit_everywhere(s)
    assert dom.sum() > 500
    err = angular_error_map(n, s.gt_normals, dom)
    assert np.nanmax(err) < 1e-4
    np.testing.assert_allclose(rho[dom], 0.8, rtol=1e-9)


def test_luminance_of_colour_images():
    s = synth_scene("sphere", default_lights(8), 32, albedo=(0.2, 0.5, 0.9))
    n, rho = woodham(s)
    dom = lit_everywhere(s)
    assert np.nanmax(angular_error_map(n, s.gt_normals, dom)) < 1e-4
    np.testing.assert_allclose(rho[dom], luminance(np.array([[[[0.2, 0.5, 0.9]]]]))[0, 0, 0], rtol=1e-9)


def test_rank_deficient_lights_rejected():
    coplanar = [Light.from_vector(v) for v in ([1, 0, 1], [-1, 0, 1], [0, 0, 1], [0.5, 0, 1])]
    with pytest.raises(ParameterError, match="rank"):
        woodham(one_pixel([1, 1, 1, 1], coplanar))
    with pytest.raises(ParameterError, match="rank"):
        woodham_robust(one_pixel([1, 1, 1, 1], coplanar), 0.0)


def test_trim_zero_is_plain_woodham():
    s = synth_scene("sphere", default_lights(8), 32)
    for a, b in zip(woodham(s), woodham_robust(s, 0.0)):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("fraction, n", [(0.4, 5), (0.5, 20), (-0.1, 8), (0.34, 6)])
def test_trim_leaving_too_few_observations(fraction, n):
    s = synth_scene("plane", default_lights(n), 16)
    with pytest.raises(ParameterError):
        woodham_robust(s, fraction)


def test_trimming_helps_a_pixel_with_one_attached_shadow():
    s = synth_scene("sphere", default_lights(8), 64)
    dark = np.sum(s.gt_normals @ s.light_matrix().T <= 0, axis=-1)
    one = s.mask & (dark == 1)
    assert one.any()
    e_plain = angular_error_map(woodham(s)[0], s.gt_normals, one)
    e_trim = angular_error_map(woodham_robust(s, 0.125)[0], s.gt_normals, one)
    assert np.all(e_trim[one] < e_plain[one])
    # with the single dark observation dropped the remaining data is exact
    assert np.nanmax(e_trim[one]) < 1e-4


@pytest.mark.parametrize("k", [0.25, 2.0, 8.0])
def test_scale_invariance(k):
    s = synth_scene("sphere", default_lights(6), 32)
    scaled = ImageStack(s.images * k, s.lights, s.mask)
    n1, r1 = woodham(s)
    n2, r2 = woodham(scaled)
    # powers of two scale exactly, so the normals agree to the bit
    assert n1.tobytes() == n2.tobytes()
    np.testing.assert_array_equal(r2, r1 * k)


@settings(max_examples=40)
@given(st.integers(0, 2 ** 32 - 1), st.integers(3, 12))
def test_residual_optimality(seed, n_lights):
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n_lights, 3))
    dirs[:, 2] = np.abs(dirs[:, 2]) + 0.2
    lights = [Light.from_vector(d) for d in dirs]
    obs = rng.uniform(0, 1, (n_lights, 2, 2))
    stack = ImageStack(obs, lights, np.ones((2, 2), bool))
    L = stack.light_matrix()
    if np.linalg.cond(L.T @ L) > 1e6:
        return
    n, rho = woodham(stack)
    m = n * rho[..., None]
    # undo the camera-facing flip: least squares may have chosen -m
    for r in range(2):
        for c in range(2):
            I = obs[:, r, c]
            best = min((m[r, c], -m[r, c]), key=lambda v: np.sum((L @ v - I) ** 2))
            base = np.sum((L @ best - I) ** 2)
            for axis in range(3):
                for delta in (1e-3, -1e-3):
                    p = best.copy()
                    p[axis] += delta
                    assert np.sum((L @ p - I) ** 2) >= base - 1e-15
