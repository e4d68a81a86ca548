from __future__ import annotations

import numpy as np
import pytest

from drrreg.geometry import EulerPose, Frame, Intrinsics, Pose, euler_to_pose
from drrreg.phantoms import make_phantom
from drrreg.renderer import (
    GimbalLockError,
    Image,
    RayBundle,
    from_beer_lambert,
    make_rays,
    render,
    render_siddon,
    render_structure,
    render_trilinear,
    render_trilinear_with_grad,
    to_beer_lambert,
)
from drrreg.volume import LabelMap, Volume, mask_structures

from conftest import rel_err
from oracles import march_nearest, random_rays, se3_perturbed, trapezoid_trilinear

ONE_PX = Intrinsics(1000.0, 1, 1, (1.0, 1.0))


def axis_ray(x, y, depth=-500.0):
    """Single ray along world +z through (x, y)."""
    return make_rays(ONE_PX, euler_to_pose(EulerPose(0, 0, 0, x, y, depth)))


# ---------------------------------------------------------------- make_rays


def test_make_rays_two_by_two_centres():
    k = Intrinsics(1000.0, 2, 2, (0.5, 0.25))
    rays = make_rays(k, Pose.identity())
    assert np.array_equal(rays.source, np.zeros(3))
    assert np.allclose(np.abs(rays.targets[..., 0]), 0.25)
    assert np.allclose(np.abs(rays.targets[..., 1]), 0.125)
    assert np.allclose(rays.targets[..., 2], 1000.0)
    assert len({tuple(p) for p in rays.targets.reshape(-1, 3)}) == 4


def test_make_rays_pure_translation_and_distance(det64):
    t = np.array([3.0, -7.0, 11.0])
    a = make_rays(det64, Pose.identity())
    b = make_rays(det64, Pose(np.eye(3), t))
    assert np.allclose(b.targets - a.targets, t, atol=1e-12)
    assert np.allclose(b.source - a.source, t, atol=1e-12)
    rng = np.random.default_rng(0)
    e = EulerPose(*rng.uniform(-60, 60, 3), *rng.uniform(-300, 300, 3))
    r = make_rays(det64, euler_to_pose(e))
    assert np.all(np.linalg.norm(r.targets - r.source, axis=-1) >= 1000.0 - 1e-9)


# ---------------------------------------------------------------- Siddon


def test_siddon_uniform_cube_central_ray():
    v, _, _ = make_phantom("uniform_cube", edge_mm=10.0, mu=0.02)
    assert render_siddon(v, axis_ray(0.3, -0.2)).pixels[0, 0] == pytest.approx(0.2, abs=1e-10)
    assert render_siddon(v, axis_ray(20.0, 0.0)).pixels[0, 0] == 0.0


def test_siddon_sphere_chord():
    v, _, _ = make_phantom("sphere", radius_mm=20.0, mu=0.01, voxel_mm=0.25)
    val = render_siddon(v, axis_ray(12.0, 0.0)).pixels[0, 0]
    assert val == pytest.approx(0.01 * 2 * np.sqrt(20**2 - 12**2), rel=0.02)


def test_two_boxes_gap_is_empty():
    v, _, _ = make_phantom("two_boxes", box_mm=20.0, gap_mm=10.0)
    assert render_siddon(v, axis_ray(0.0, 0.0)).pixels[0, 0] == 0.0
    assert render_trilinear(v, axis_ray(0.0, 0.0)).pixels[0, 0] == pytest.approx(0.0, abs=1e-15)
    assert render_siddon(v, axis_ray(15.0, 0.0)).pixels[0, 0] == pytest.approx(0.4, abs=1e-10)


@pytest.mark.parametrize("kind", ["two_boxes", "sphere_in_box"])
def test_siddon_matches_ray_march(kind):
    v, _, _ = make_phantom(kind)
    rng = np.random.default_rng(1)
    step = min(abs(s) for s in v.spacing) / 1000
    for s, p in random_rays(rng, v, 15):
        k = Intrinsics(1.0, 1, 1, (1.0, 1.0))
        got = render_siddon(v, RayBundle(s, p[None, None, :], k)).pixels[0, 0]
        want = march_nearest(v.data, v.origin, v.spacing, s, p, step)
        assert got == pytest.approx(want, rel=1e-3, abs=1e-9)


def test_siddon_flipped_spacing_matches_ray_march():
    rng = np.random.default_rng(2)
    data = rng.uniform(0, 0.05, (6, 7, 5))
    v = Volume(data, (2.0, -1.5, 3.0), (-6.0, 5.0, -7.5))
    for s, p in random_rays(rng, v, 10):
        got = render_siddon(v, RayBundle(s, p[None, None, :])).pixels[0, 0]
        want = march_nearest(v.data, v.origin, v.spacing, s, p, 1.5 / 1000)
        assert got == pytest.approx(want, rel=1e-3, abs=1e-9)


def test_source_inside_volume():
    v, _, _ = make_phantom("uniform_cube", edge_mm=10.0, mu=0.02)
    rays = RayBundle(np.zeros(3), np.array([[[0.1, 0.2, 100.0]]]))
    chord = 5.0 * np.linalg.norm([0.1, 0.2, 100.0]) / 100.0
    assert render_siddon(v, rays).pixels[0, 0] == pytest.approx(0.02 * chord, rel=1e-12)
    assert render_trilinear(v, rays, 7).pixels[0, 0] == pytest.approx(0.02 * chord, rel=1e-12)


# ---------------------------------------------------------------- trilinear


@pytest.mark.parametrize("M", [2, 3, 17, 200])
def test_trilinear_constant_integrand_exact(M):
    v, _, _ = make_phantom("uniform_cube", edge_mm=10.0, mu=0.02)
    assert render_trilinear(v, axis_ray(0.3, -0.2), M).pixels[0, 0] == pytest.approx(0.2, abs=1e-9)


def test_trilinear_rejects_few_samples():
    v, _, _ = make_phantom("uniform_cube")
    with pytest.raises(ValueError):
        render_trilinear(v, axis_ray(0, 0), 1)


def test_trilinear_matches_scipy_trapezoid(smooth):
    v = smooth[0]
    rng = np.random.default_rng(3)
    for s, p in random_rays(rng, v, 20, keep_inside=0.8):
        for M in (5, 64):
            got = render_trilinear(v, RayBundle(s, p[None, None, :]), M).pixels[0, 0]
            want = trapezoid_trilinear(v.data, v.origin, v.spacing, s, p, M)
            assert got == pytest.approx(want, rel=1e-10, abs=1e-14)


def test_trilinear_converges_to_siddon(smooth, det64, carm):
    v = smooth[0]
    rays = make_rays(det64, carm.to_world(EulerPose(20, -15, 5, 4, -700, -3)))
    N = max(v.shape)
    ref = render_siddon(v, rays).pixels
    steps = [np.abs(render_trilinear(v, rays, M).pixels - render_trilinear(v, rays, 2 * M).pixels).max()
             for M in (N // 2, N, 2 * N)]
    assert steps[0] > steps[1] > steps[2]
    assert rel_err(render_trilinear(v, rays, 4 * N).pixels, ref) < 5e-3


def test_zero_volume_renders_zero(det64, carm, gt_pose):
    v = Volume(np.zeros((8, 8, 8)), (10, 10, 10), (-40, -40, -40))
    rays = make_rays(det64, carm.to_world(gt_pose))
    assert not render_siddon(v, rays).pixels.any()
    assert not render_trilinear(v, rays).pixels.any()
    img, g = render_trilinear_with_grad(v, det64, gt_pose, frame=carm)
    assert not img.pixels.any() and not g.d_pixels.any()


# ---------------------------------------------------------------- invariants


def test_translation_equivariance(sphere_in_box, det64):
    v = sphere_in_box[0]
    shift = np.array([13.0, -7.5, 21.0])
    e = EulerPose(10, 20, -5, 2, -3, -600)
    T = euler_to_pose(e)
    moved = Pose(T.rotation, T.translation + T.rotation.T @ shift)
    for method in ("siddon", "trilinear"):
        a = render(v, make_rays(det64, T), method).pixels
        b = render(v.translated(shift), make_rays(det64, moved), method).pixels
        assert np.max(np.abs(a - b)) < 1e-9


def test_linearity_and_non_negativity(det64, carm, gt_pose):
    rng = np.random.default_rng(4)
    geo = dict(spacing=(8.0, 8.0, 8.0), origin=(-64.0, -64.0, -64.0))
    V1 = Volume(rng.uniform(0, 0.01, (16, 16, 16)), **geo)
    V2 = Volume(rng.uniform(0, 0.01, (16, 16, 16)), **geo)
    rays = make_rays(det64, carm.to_world(gt_pose))
    for method in ("siddon", "trilinear"):
        both = render(V1.with_data(2.5 * V1.data + 0.75 * V2.data), rays, method).pixels
        parts = 2.5 * render(V1, rays, method).pixels + 0.75 * render(V2, rays, method).pixels
        assert np.max(np.abs(both - parts)) < 1e-9
        assert render(V1, rays, method).pixels.min() >= 0


# ---------------------------------------------------------------- gradients


def _fd_euler(v, k, e, frame, j, h, M):
    p = np.array(e.params)
    lo, hi = p.copy(), p.copy()
    lo[j] -= h
    hi[j] += h
    f = lambda q: render_trilinear(v, make_rays(k, frame.to_world(EulerPose.from_params(q))), M).pixels
    return (f(hi) - f(lo)) / (2 * h)


def test_gradient_euler_chart_matches_fd(smooth, det64, carm):
    v = smooth[0]
    rng = np.random.default_rng(5)
    for _ in range(3):
        e = EulerPose(*rng.uniform(-45, 45, 2), rng.uniform(-15, 15), *rng.uniform(-50, 50, 1),
                      rng.uniform(-900, -500), rng.uniform(-50, 50))
        img, g = render_trilinear_with_grad(v, det64, e, chart="euler_zxy", frame=carm)
        mask = np.abs(img.pixels) > 1e-6
        for j in range(6):
            fd = _fd_euler(v, det64, e, carm, j, 1e-3 if j < 3 else 1e-2, None)
            assert rel_err(g.d_pixels[..., j][mask], fd[mask]) < 1e-3, j


def test_gradient_se3_chart_matches_expm_oracle(smooth, det64):
    v = smooth[0]
    T = euler_to_pose(EulerPose(25, -30, 10, 5, -8, -650))
    img, g = render_trilinear_with_grad(v, det64, T, chart="se3")
    mask = np.abs(img.pixels) > 1e-6
    for j in range(6):
        h = 1e-5 if j < 3 else 1e-2
        xi = np.zeros(6)
        xi[j] = h
        hi = Pose.from_matrix(se3_perturbed(T.rotation, T.translation, xi))
        lo = Pose.from_matrix(se3_perturbed(T.rotation, T.translation, -xi))
        fd = (render_trilinear(v, make_rays(det64, hi)).pixels
              - render_trilinear(v, make_rays(det64, lo)).pixels) / (2 * h)
        assert rel_err(g.d_pixels[..., j][mask], fd[mask]) < 1e-3, j


def test_gradient_image_matches_render(smooth, det64, carm, gt_pose):
    v = smooth[0]
    img, _ = render_trilinear_with_grad(v, det64, gt_pose, frame=carm)
    ref = render_trilinear(v, make_rays(det64, carm.to_world(gt_pose)))
    assert np.array_equal(img.pixels, ref.pixels)


def test_in_plane_x_gradient_tracks_detector_shift(smooth, det64):
    # moving the camera along its own x axis slides the image along u
    v = smooth[0]
    e = EulerPose(0, 0, 0, 0, 0, -600)
    img, g = render_trilinear_with_grad(v, det64, e, chart="euler_zxy")
    mask = np.abs(img.pixels) > 1e-6
    fd = _fd_euler(v, det64, e, Frame.identity(), 3, 1e-2, None)
    assert rel_err(g.d_pixels[..., 3][mask], fd[mask]) < 1e-3
    # pixel u now sees what sat at u + dx before, so dI/dx follows dI/du
    du = np.gradient(img.pixels, axis=1)
    corr = np.corrcoef(g.d_pixels[..., 3][mask], du[mask])[0, 1]
    assert corr > 0.99


def test_gimbal_lock_rejected_in_euler_chart(smooth, det64):
    with pytest.raises(GimbalLockError, match="se3"):
        render_trilinear_with_grad(smooth[0], det64, EulerPose(10, 90, 0, 0, 0, -600), chart="euler_zxy")
    render_trilinear_with_grad(smooth[0], det64, EulerPose(10, 90, 0, 0, 0, -600), chart="se3")


# ---------------------------------------------------------------- Beer-Lambert


def test_beer_lambert():
    img = Image(np.array([[0.0, 0.2]]))
    bl = to_beer_lambert(img, 3.0)
    assert bl.pixels[0, 0] == 3.0
    assert to_beer_lambert(img).pixels[0, 1] == pytest.approx(0.8187307530779818, abs=1e-15)
    rng = np.random.default_rng(6)
    x = Image(rng.uniform(0, 5, (9, 11)))
    assert np.max(np.abs(from_beer_lambert(to_beer_lambert(x, 2.0), 2.0).pixels - x.pixels)) < 1e-12
    with pytest.raises(ValueError):
        to_beer_lambert(img, 0.0)


# ---------------------------------------------------------------- structures


def test_render_structure_composition(det64, carm, gt_pose):
    v, _, lm = make_phantom("nested_spheres", voxel_mm=1.0)
    rays = make_rays(det64, carm.to_world(gt_pose))
    for keep in ({1}, {2}, {1, 2}, set()):
        for method in ("siddon", "trilinear"):
            a = render_structure(v, lm, keep, rays, method).pixels
            b = render(mask_structures(v, lm, keep), rays, method).pixels
            assert np.max(np.abs(a - b)) <= 1e-12
    assert not render_structure(v, lm, set(), rays).pixels.any()
    assert np.array_equal(render_structure(v, lm, {1, 2}, rays).pixels, render(v, rays).pixels)


def test_render_structure_inner_chord():
    v, _, lm = make_phantom("nested_spheres", voxel_mm=0.25)
    # central ray through voxel centres
    got = render_structure(v, lm, {2}, axis_ray(0.125, 0.125), "siddon").pixels[0, 0]
    r = np.hypot(0.125, 0.125)
    assert got == pytest.approx(0.03 * 2 * np.sqrt(8**2 - r**2), rel=0.02)


def test_label_shape_mismatch(det64):
    v = Volume(np.ones((4, 4, 4)))
    with pytest.raises(ValueError):
        render_structure(v, LabelMap(np.ones((4, 4, 5), np.int16)), {1}, make_rays(det64, Pose.identity()))
