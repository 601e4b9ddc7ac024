import numpy as np
import pytest

from textvo.errors import (FlatPatch, LengthMismatch, RegionTooSmall,
                           TooFewValid)
from textvo.geometry import PinholeCamera
from textvo.image import build_pyramid, sample_bilinear_with_gradient
from textvo.photometric import (MAX_REF_PIXELS, TextPatch, make_text_patch,
                                normalize_patch, normalized_ssd,
                                photometric_residuals,
                                photometric_residuals_jacobians,
                                pixels_in_quad, quad_area,
                                select_reference_pixels, zncc)
from textvo.simulator import (Scene, ScenePatch, TrajectorySpec,
                              project_patch_quad, render_frame,
                              trajectory_poses)

CAM = PinholeCamera(fx=460.0, fy=460.0, cx=319.5, cy=239.5, width=640, height=480)


def textured(shape=(120, 160), seed=0):
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:shape[0], 0:shape[1]].astype(float)
    img = np.full(shape, 120.0)
    for _ in range(6):
        fx, fy = rng.uniform(0.01, 0.05, size=2)
        img += rng.uniform(8, 15) * np.sin(2 * np.pi * (fx * xs + fy * ys)
                                           + rng.uniform(0, 2 * np.pi))
    for _ in range(12):
        x0, y0 = rng.integers(5, shape[1] - 25), rng.integers(5, shape[0] - 25)
        img[y0:y0 + rng.integers(4, 15), x0:x0 + rng.integers(4, 15)] -= 60.0
    return np.clip(img, 0, 255)


# ---------------------------------------------------------------------------
# normalization / similarity scores
# ---------------------------------------------------------------------------

def test_normalize_patch_example():
    norm, mean, std = normalize_patch([0.0, 10.0, 20.0])
    assert mean == pytest.approx(10.0)
    assert std == pytest.approx(8.1650, abs=1e-4)
    assert np.allclose(norm, [-1.2247, 0.0, 1.2247], atol=1e-4)
    # population stddev: normalized energy equals N exactly
    assert (norm ** 2).sum() == pytest.approx(3.0, abs=1e-12)


def test_normalize_patch_flat_raises():
    with pytest.raises(FlatPatch):
        normalize_patch(np.full(10, 42.0))
    with pytest.raises(FlatPatch):
        normalize_patch([5.0])


def test_normalize_affine_invariance():
    rng = np.random.default_rng(1)
    v = rng.uniform(0, 255, size=40)
    a, _, _ = normalize_patch(v)
    b, _, _ = normalize_patch(3.7 * v - 12.0)
    assert np.allclose(a, b, atol=1e-12)


def test_zncc_self_and_negation():
    rng = np.random.default_rng(2)
    for n in (5, 15, 64):
        a, _, _ = normalize_patch(rng.uniform(0, 255, size=n))
        assert zncc(a, a) == pytest.approx(n, abs=1e-9)
        assert zncc(a, -a) == pytest.approx(-n, abs=1e-9)
        assert abs(zncc(a, np.roll(a, 3))) <= n + 1e-9


def test_normalized_ssd_zncc_identity():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = rng.integers(4, 40)
        a, _, _ = normalize_patch(rng.uniform(0, 255, size=n))
        b, _, _ = normalize_patch(rng.uniform(0, 255, size=n))
        assert normalized_ssd(a, b) == pytest.approx(2 * n - 2 * zncc(a, b),
                                                     abs=1e-9)


def test_score_length_mismatch():
    with pytest.raises(LengthMismatch):
        zncc(np.zeros(3), np.zeros(4))
    with pytest.raises(LengthMismatch):
        normalized_ssd(np.zeros(3), np.zeros(4))


# ---------------------------------------------------------------------------
# region handling / reference pixel selection
# ---------------------------------------------------------------------------

def test_quad_area():
    assert quad_area([(0, 0), (4, 0), (4, 3), (0, 3)]) == pytest.approx(12.0)
    assert quad_area([(0, 0), (0, 3), (4, 3), (4, 0)]) == pytest.approx(12.0)


def test_pixels_in_quad_counts_square():
    pts = pixels_in_quad([(10, 10), (20, 10), (20, 18), (10, 18)])
    assert len(pts) == 11 * 9
    assert pts[:, 0].min() >= 10 and pts[:, 0].max() <= 20


def test_select_reference_pixels_fast_path():
    img = textured(seed=4)
    quad = np.array([(20.0, 20.0), (140.0, 22.0), (138.0, 100.0), (22.0, 98.0)])
    pts = select_reference_pixels(img, quad)
    assert 3 <= len(pts) <= MAX_REF_PIXELS
    from textvo.image import _points_in_polygon
    assert _points_in_polygon(pts, quad).all()


def test_select_reference_pixels_grid_fallback():
    ys, xs = np.mgrid[0:120, 0:160].astype(float)
    smooth = 60.0 + 0.5 * xs + 0.3 * ys   # gradient, no corners
    quad = np.array([(30.0, 30.0), (120.0, 30.0), (120.0, 90.0), (30.0, 90.0)])
    pts = select_reference_pixels(smooth, quad)
    assert len(pts) >= 8


def test_select_reference_pixels_tiny_quad():
    with pytest.raises(RegionTooSmall):
        select_reference_pixels(textured(), [(0, 0), (4, 0), (4, 4), (0, 4)])


def test_make_text_patch_freezes_sample_stats():
    img = textured(seed=5)
    quad = np.array([(20.0, 20.0), (140.0, 22.0), (138.0, 100.0), (22.0, 98.0)])
    patch = make_text_patch(img, quad, CAM)
    v, _ = sample_bilinear_with_gradient(img, patch.ref_pixels)
    assert patch.host_mean == pytest.approx(v.mean())
    assert patch.host_std == pytest.approx(v.std())
    assert np.allclose(patch.host_values_normalized,
                       (v - v.mean()) / v.std())
    # frozen statistics make the stored values exactly standardized
    assert abs(patch.host_values_normalized.mean()) < 1e-12
    assert patch.host_values_normalized.std() == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# photometric residuals against rendered frames
# ---------------------------------------------------------------------------

def _two_view_setup(frames=5, target_index=3, seed=11):
    patch3d = ScenePatch(origin=[-0.6, -0.4, 0.0], e1=[1.2, 0.0, 0.1],
                         e2=[0.0, 0.8, 0.05], texture_seed=3)
    scene = Scene(camera=CAM, patches=[patch3d],
                  trajectory=TrajectorySpec(kind="arc", frames=frames,
                                            span=0.6, start=(0.0, 0.0, -2.5)),
                  seed=seed)
    poses = trajectory_poses(scene.trajectory, seed=scene.seed)
    host_pose, target_pose = poses[0], poses[target_index]
    host = render_frame(scene, host_pose, perturb=False)
    target = render_frame(scene, target_pose, perturb=False)
    quad, _ = project_patch_quad(patch3d, host_pose, CAM)
    # shrink the quad so every reference pixel stays comfortably in view
    quad = quad.mean(axis=0) + 0.8 * (quad - quad.mean(axis=0))
    patch = make_text_patch(host, quad, CAM)
    theta = patch3d.theta_in_frame(host_pose)
    pyr = build_pyramid(target, levels=3)
    return patch, theta, host_pose, target_pose, pyr, host


def test_residuals_near_zero_at_ground_truth():
    """Both sides are standardized over the same sample set, so residuals
    vanish at the true plane/poses up to interpolation error."""
    patch, theta, hp, tp, pyr, host = _two_view_setup()
    r, valid = photometric_residuals(patch, theta, hp, tp, pyr, 0, CAM)
    assert valid.sum() >= 0.5 * len(valid)
    # reference pixels sit on texture edges, so interpolation error is at its
    # worst there; 0.1 normalized units is ~3 intensity levels
    assert np.mean(np.abs(r[valid])) < 0.1
    assert np.all(r[~valid] == 0.0)


def test_cost_increases_away_from_ground_truth():
    patch, theta, hp, tp, pyr, _ = _two_view_setup()
    def cost(th):
        r, valid = photometric_residuals(patch, th, hp, tp, pyr, 0, CAM)
        return (r[valid] ** 2).sum()
    c0 = cost(theta)
    for d in np.eye(3) * 0.08:
        assert cost(theta + d) > c0
        assert cost(theta - d) > c0


def test_residuals_gain_bias_invariant():
    """Renormalization cancels any affine intensity change of the target."""
    patch, theta, hp, tp, pyr, _ = _two_view_setup()
    r0, v0 = photometric_residuals(patch, theta, hp, tp, pyr, 0, CAM)
    bright = build_pyramid(0.6 * pyr[0] + 30.0, levels=3)  # no clipping
    r1, v1 = photometric_residuals(patch, theta, hp, tp, bright, 0, CAM)
    assert np.array_equal(v0, v1)
    assert np.allclose(r0[v0], r1[v1], atol=1e-9)


def test_residuals_per_level():
    patch, theta, hp, tp, pyr, _ = _two_view_setup()
    for level in range(3):
        r, valid = photometric_residuals(patch, theta, hp, tp, pyr, level, CAM)
        assert valid.sum() >= 3
        # interpolation mismatch grows with the level's pixel footprint
        assert np.abs(r[valid]).mean() < (0.1, 0.3, 0.5)[level]
    with pytest.raises(ValueError):
        photometric_residuals(patch, theta, hp, tp, pyr, 5, CAM)


def test_residuals_flat_target():
    patch, theta, hp, tp, _, _ = _two_view_setup()
    flat = build_pyramid(np.full((480, 640), 50.0), levels=3)
    with pytest.raises(FlatPatch):
        photometric_residuals(patch, theta, hp, tp, flat, 0, CAM)


def test_residuals_too_few_valid():
    patch, theta, hp, tp, pyr, _ = _two_view_setup()
    # push the target far off to the side: projections leave the image
    tp_away = tp.retract([0.0, 0.0, 0.0, 5.0, 0.0, 0.0])
    with pytest.raises(TooFewValid):
        photometric_residuals(patch, theta, hp, tp_away, pyr, 0, CAM)


def test_residual_jacobians_match_finite_differences():
    patch, theta, hp, tp, pyr, _ = _two_view_setup()
    for level in (0, 1):
        r, valid, J_th, J_h, J_t = photometric_residuals_jacobians(
            patch, theta, hp, tp, pyr, level, CAM)
        assert J_th.shape == (len(r), 3)
        assert J_h.shape == (len(r), 6) and J_t.shape == (len(r), 6)
        assert np.all(J_th[~valid] == 0.0)

        h = 1e-6
        scale = max(np.abs(J_th).max(), np.abs(J_h).max(), np.abs(J_t).max())

        def check(J, f):
            for i in range(J.shape[1]):
                d = np.zeros(J.shape[1]); d[i] = h
                rp, vp = f(d)
                rm, vm = f(-d)
                assert np.array_equal(vp, vm)
                fd = (rp - rm) / (2 * h)
                assert np.abs(fd - J[:, i]).max() < 1e-3 * scale

        check(J_th, lambda d: photometric_residuals(
            patch, theta + d, hp, tp, pyr, level, CAM))
        check(J_h, lambda d: photometric_residuals(
            patch, theta, hp.retract(d), tp, pyr, level, CAM))
        check(J_t, lambda d: photometric_residuals(
            patch, theta, hp, tp.retract(d), pyr, level, CAM))


def test_partially_valid_rows_are_zeroed():
    """With some reference pixels projecting outside, their residual and
    Jacobian rows must vanish (no contribution to any cost)."""
    patch, theta, hp, tp, pyr, _ = _two_view_setup()
    patch3d = ScenePatch(origin=[-0.6, -0.4, 0.0], e1=[1.2, 0.0, 0.1],
                         e2=[0.0, 0.8, 0.05], texture_seed=3)
    scene = Scene(camera=CAM, patches=[patch3d],
                  trajectory=TrajectorySpec(frames=2), seed=11)
    found = False
    for pan in np.arange(0.02, 0.6, 0.02):
        # render an actual frame from a panned pose so part of the patch is
        # off-screen while the rest still shows real texture
        tp_shift = tp.retract([0.0, pan, 0.0, 0.0, 0.0, 0.0])
        img = render_frame(scene, tp_shift, perturb=False)
        pyr_shift = build_pyramid(img, levels=3)
        try:
            r, valid, J_th, J_h, J_t = photometric_residuals_jacobians(
                patch, theta, hp, tp_shift, pyr_shift, 0, CAM)
        except TooFewValid:
            break
        if not valid.all():
            found = True
            for arr in (r, J_th, J_h, J_t):
                assert np.all(arr[~valid] == 0.0)
            break
    assert found
