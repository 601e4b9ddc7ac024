"""Illumination-invariant photometric cost machinery for text patches.

Patch intensities are normalized to zero mean / unit (population) standard
deviation over the text region; residuals compare the frozen host values
against renormalized samples in the target image.
"""

from dataclasses import dataclass

import numpy as np

from . import geometry as geo
from .errors import FlatPatch, LengthMismatch, RegionTooSmall, TooFewValid
from .image import detect_corners, sample_bilinear_with_gradient

SIGMA_FLOOR = 1.0   # intensity levels; flatter patches are rejected
MAX_REF_PIXELS = 15
MIN_QUAD_AREA = 25.0  # px^2


def normalize_patch(values):
    """(values - mean) / population stddev; raises FlatPatch below the floor."""
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        raise FlatPatch("need at least 2 values")
    mean = values.mean()
    std = values.std()  # population stddev: sum Ihat^2 == N holds exactly
    if std < SIGMA_FLOOR:
        raise FlatPatch(f"stddev {std} below floor {SIGMA_FLOOR}")
    return (values - mean) / std, mean, std


def zncc(patch_a, patch_b):
    """Unnormalized ZNCC sum over normalized patches; in [-N, N]."""
    a = np.asarray(patch_a, dtype=float)
    b = np.asarray(patch_b, dtype=float)
    if a.shape != b.shape:
        raise LengthMismatch(f"{a.shape} vs {b.shape}")
    return float(a @ b)


def normalized_ssd(patch_a, patch_b):
    """Sum of squared differences of normalized patches; equals 2N - 2*zncc."""
    a = np.asarray(patch_a, dtype=float)
    b = np.asarray(patch_b, dtype=float)
    if a.shape != b.shape:
        raise LengthMismatch(f"{a.shape} vs {b.shape}")
    return float(((a - b) ** 2).sum())


def quad_area(quad):
    """Shoelace area of a quadrilateral (absolute value)."""
    q = np.asarray(quad, dtype=float)
    x, y = q[:, 0], q[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def pixels_in_quad(quad, shape=None):
    """Integer pixel coordinates inside a convex quad; (K, 2) array of (x, y)."""
    q = np.asarray(quad, dtype=float)
    x0 = int(np.floor(q[:, 0].min()))
    x1 = int(np.ceil(q[:, 0].max()))
    y0 = int(np.floor(q[:, 1].min()))
    y1 = int(np.ceil(q[:, 1].max()))
    if shape is not None:
        h, w = shape
        x0, x1 = max(x0, 0), min(x1, w - 1)
        y0, y1 = max(y0, 0), min(y1, h - 1)
    if x1 < x0 or y1 < y0:
        return np.zeros((0, 2))
    xs, ys = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1))
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
    from .image import _points_in_polygon
    return pts[_points_in_polygon(pts, q)]


def _grid_in_quad(quad, n_side=5):
    """Uniform lattice inside the quad via bilinear corner interpolation."""
    q = np.asarray(quad, dtype=float)
    s = (np.arange(1, n_side + 1)) / (n_side + 1)
    ss, tt = np.meshgrid(s, s)
    ss, tt = ss.ravel()[:, None], tt.ravel()[:, None]
    pts = ((1 - ss) * (1 - tt) * q[0] + ss * (1 - tt) * q[1]
           + ss * tt * q[2] + (1 - ss) * tt * q[3])
    return pts


def select_reference_pixels(img, quad, max_count=MAX_REF_PIXELS,
                            fast_threshold=20.0):
    """Pick up to max_count representative pixels inside the quad.

    FAST corners by descending score; a uniform grid fallback when fewer
    than 3 corners are found.
    """
    quad = np.asarray(quad, dtype=float)
    if quad_area(quad) < MIN_QUAD_AREA:
        raise RegionTooSmall(f"quad area {quad_area(quad)} < {MIN_QUAD_AREA}")
    corners = detect_corners(img, region=quad, max_count=max_count,
                             threshold=fast_threshold)
    if len(corners) >= 3:
        return np.array([c.position for c in corners])
    pts = _grid_in_quad(quad, n_side=4)
    h, w = img.shape
    inside = ((pts[:, 0] >= 1) & (pts[:, 0] <= w - 2)
              & (pts[:, 1] >= 1) & (pts[:, 1] <= h - 2))
    return pts[inside][:max_count]


@dataclass(frozen=True)
class TextPatch:
    """Host-side data of a text patch used for photometric comparison."""
    ref_pixels: np.ndarray        # (K, 2) host-image pixel coords, 3 <= K <= 15
    ref_normalized: np.ndarray    # (K, 2) normalized camera coords
    host_mean: float              # frozen stats over the quad interior
    host_std: float
    host_values_normalized: np.ndarray  # (K,) normalized host intensities
    quad: np.ndarray              # (4, 2) host-image pixel corners
    host_values_by_level: tuple = ()    # per-pyramid-level normalized values

    def host_values(self, level):
        """Normalized host intensities matching the given pyramid level."""
        if not self.host_values_by_level:
            return self.host_values_normalized
        return self.host_values_by_level[min(level,
                                             len(self.host_values_by_level) - 1)]


def make_text_patch(img, quad, camera, max_count=MAX_REF_PIXELS,
                    fast_threshold=20.0, levels=3):
    """Build a TextPatch: pick reference pixels, freeze host statistics.

    Host reference values are stored per pyramid level (sampled from the
    host pyramid with the shared frozen statistics) so that coarse-to-fine
    residuals compare like with like.
    """
    from .image import build_pyramid
    ref = select_reference_pixels(img, quad, max_count, fast_threshold)
    if len(ref) < 3:
        raise RegionTooSmall("fewer than 3 usable reference pixels")
    pyr = build_pyramid(img, levels=levels)
    # statistics are frozen over the reference sample set itself (per level)
    # so that residuals against identically renormalized target samples
    # vanish at perfect alignment
    by_level = []
    mean = std = None
    for level, lvl_img in enumerate(pyr.levels):
        scale = 1.0 / 2 ** level
        lvl_px = (ref + 0.5) * scale - 0.5
        h, w = lvl_img.shape
        lvl_px = np.clip(lvl_px, 0.0, [w - 1.0, h - 1.0])
        vals, _ = sample_bilinear_with_gradient(lvl_img, lvl_px)
        normalized, m, s = normalize_patch(vals)
        by_level.append(normalized)
        if level == 0:
            mean, std = m, s
    return TextPatch(
        ref_pixels=ref,
        ref_normalized=camera.normalize(ref),
        host_mean=mean,
        host_std=std,
        host_values_normalized=by_level[0],
        quad=np.asarray(quad, dtype=float),
        host_values_by_level=tuple(by_level),
    )


def photometric_residuals(patch, theta, host_pose, target_pose, target_pyramid,
                          level, camera):
    """Per-pixel residuals r = I_h_norm - I_t_norm at the given pyramid level.

    Target-side statistics are recomputed from the currently valid projected
    reference pixels.  Returns (residuals (K,), valid (K,) bool); masked
    entries are zero and contribute nothing.
    """
    r, valid, _ = _residuals_impl(patch, theta, host_pose, target_pose,
                                  target_pyramid, level, camera, want_jac=False)
    return r, valid


def photometric_residuals_jacobians(patch, theta, host_pose, target_pose,
                                    target_pyramid, level, camera):
    """Residuals plus Jacobians w.r.t. theta, host pose, and target pose.

    Returns (r (K,), valid (K,), J_theta (K,3), J_host (K,6), J_target (K,6)).
    The renormalization coupling (each residual depends on every sample via
    the recomputed mean/stddev) is included.
    """
    r, valid, (J_theta, J_host, J_target) = _residuals_impl(
        patch, theta, host_pose, target_pose, target_pyramid, level, camera,
        want_jac=True)
    return r, valid, J_theta, J_host, J_target


def _residuals_impl(patch, theta, host_pose, target_pose, target_pyramid,
                    level, camera, want_jac):
    if level >= len(target_pyramid):
        raise ValueError(f"level {level} beyond pyramid depth")
    cam_l = camera.scaled(level)
    img = target_pyramid[level]
    K = len(patch.ref_pixels)

    if want_jac:
        pixels, valid, J_th, J_h, J_t = geo.project_text_points_jacobians(
            patch.ref_pixels, host_pose, target_pose, theta, camera)
        # geometry Jacobians are in level-0 pixels; rescale to level pixels
        scale = 1.0 / 2 ** level
    else:
        pixels, valid = geo.project_text_points(
            patch.ref_pixels, host_pose, target_pose, theta, camera, margin=-1e18)
        scale = 1.0 / 2 ** level

    # map level-0 pixel coords to this level (box-filter center convention)
    lvl_pixels = (pixels + 0.5) * scale - 0.5
    valid = valid & cam_l.in_bounds(lvl_pixels, margin=1.0)

    n_valid = int(valid.sum())
    if n_valid < max(3, int(np.ceil(0.5 * K))):
        raise TooFewValid(f"{n_valid}/{K} reference pixels valid")

    vals = np.zeros(K)
    grads = np.zeros((K, 2))
    v, g = sample_bilinear_with_gradient(img, lvl_pixels[valid])
    vals[valid] = v
    grads[valid] = g

    s = vals[valid]
    mu = s.mean()
    sigma = s.std()
    if sigma < SIGMA_FLOOR / 8.0:
        raise FlatPatch("projected target patch is flat")
    r = np.zeros(K)
    r[valid] = patch.host_values(level)[valid] - (s - mu) / sigma

    if not want_jac:
        return r, valid, None

    # chain rule through sampling and the mean/std renormalization
    # ds_i/dx = grad_i . (d lvl_pixel_i / dx); lvl scale folds into grads
    G = grads * scale  # (K,2) gradient w.r.t. level-0 pixel motion
    full = {"theta": J_th, "host": J_h, "target": J_t}
    out = {}
    for key, Jpix in full.items():
        ds = np.einsum("kd,kdp->kp", G, Jpix)   # (K, P)
        ds[~valid] = 0.0
        dmu = ds[valid].mean(axis=0)
        dsigma = ((s - mu)[:, None] * ds[valid]).mean(axis=0) / sigma
        dt = np.zeros_like(ds)
        dt[valid] = (ds[valid] - dmu[None, :]) / sigma \
            - ((s - mu) / sigma ** 2)[:, None] * dsigma[None, :]
        out[key] = -dt
    return r, valid, (out["theta"], out["host"], out["target"])
