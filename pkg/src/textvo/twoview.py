"""Two-view bootstrap: essential matrix, decomposition, triangulation.

Inputs are normalized camera coordinates (pixels through the inverse
intrinsics); the first camera defines the world frame and the recovered
baseline is scaled to unit length (monocular gauge).
"""

import numpy as np

from .errors import BootstrapFailed
from .geometry import Pose, skew, so3_exp
from .solver import levenberg_marquardt

MIN_PAIRS = 8
RANSAC_ITERS = 200
RANSAC_THRESHOLD = 2e-3   # Sampson error in normalized coordinates (~1 px)
MIN_INLIER_RATIO = 0.5
MIN_PARALLAX_RAD = np.deg2rad(1.0)


def _homog(m):
    m = np.asarray(m, dtype=float)
    return np.concatenate([m, np.ones((len(m), 1))], axis=1)


def essential_eight_point(m1, m2):
    """Least-squares essential matrix with m2~^T E m1~ = 0 from >=8 pairs.

    Coordinates are Hartley-normalized for conditioning; the result is
    projected onto the essential manifold (two equal singular values).
    """
    m1 = np.asarray(m1, dtype=float)
    m2 = np.asarray(m2, dtype=float)
    if len(m1) < MIN_PAIRS or len(m1) != len(m2):
        raise BootstrapFailed(f"need >= {MIN_PAIRS} pairs, got {len(m1)}")

    def conditioning(m):
        c = m.mean(axis=0)
        s = np.sqrt(2.0) / max(np.linalg.norm(m - c, axis=1).mean(), 1e-12)
        T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
        return (m - c) * s, T

    n1, T1 = conditioning(m1)
    n2, T2 = conditioning(m2)
    x1, y1 = n1[:, 0], n1[:, 1]
    x2, y2 = n2[:, 0], n2[:, 1]
    A = np.stack([x2 * x1, x2 * y1, x2, y2 * x1, y2 * y1, y2,
                  x1, y1, np.ones_like(x1)], axis=1)
    _, _, Vt = np.linalg.svd(A)
    F = Vt[-1].reshape(3, 3)
    E = T2.T @ F @ T1
    U, s, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U[:, -1] *= -1
    if np.linalg.det(Vt) < 0:
        Vt[-1] *= -1
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt


def sampson_error(E, m1, m2):
    """First-order geometric error of each pair under E (normalized coords)."""
    h1, h2 = _homog(m1), _homog(m2)
    Em1 = h1 @ E.T
    Etm2 = h2 @ E
    num = np.einsum("ij,ij->i", h2, Em1) ** 2
    den = (Em1[:, 0] ** 2 + Em1[:, 1] ** 2
           + Etm2[:, 0] ** 2 + Etm2[:, 1] ** 2)
    return num / np.maximum(den, 1e-18)


def refine_essential(E, m1, m2, threshold=RANSAC_THRESHOLD):
    """Polish E by minimizing signed Sampson error over (R, t direction).

    The linear eight-point solution minimizes an algebraic error whose bias
    is several times the measurement noise; a few Levenberg-Marquardt steps
    on the geometric error remove it.  The translation scale is a gauge
    direction and is simply renormalized inside the retraction.
    """
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U[:, -1] *= -1
    if np.linalg.det(Vt) < 0:
        Vt[-1] *= -1
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    x0 = (U @ W @ Vt, U[:, 2].copy())   # Sampson error is candidate-invariant
    h1, h2 = _homog(m1), _homog(m2)

    def signed_residual(R21, t21):
        Ec = skew(t21) @ R21
        Em1 = h1 @ Ec.T
        Etm2 = h2 @ Ec
        num = np.einsum("ij,ij->i", h2, Em1)
        den = np.sqrt(Em1[:, 0] ** 2 + Em1[:, 1] ** 2
                      + Etm2[:, 0] ** 2 + Etm2[:, 1] ** 2)
        return num / np.maximum(den, 1e-18)

    def retract(x, dx):
        R21, t21 = x
        t = t21 + dx[3:]
        return R21 @ so3_exp(dx[:3]), t / np.linalg.norm(t)

    def residual_fn(x):
        r = signed_residual(*x)
        h = 1e-7
        J = np.empty((len(r), 6))
        for k in range(6):
            d = np.zeros(6)
            d[k] = h
            J[:, k] = (signed_residual(*retract(x, d))
                       - signed_residual(*retract(x, -d))) / (2 * h)
        return r, J

    deltas = np.full(len(h1), threshold)
    (R21, t21), _ = levenberg_marquardt(x0, residual_fn, retract_fn=retract,
                                        deltas_fn=lambda r: deltas,
                                        max_iters=20)
    return skew(t21) @ R21


def essential_ransac(m1, m2, iters=RANSAC_ITERS, threshold=RANSAC_THRESHOLD,
                     seed=0):
    """(E, inlier mask) by random-sample consensus over 8-point models."""
    m1 = np.asarray(m1, dtype=float)
    m2 = np.asarray(m2, dtype=float)
    n = len(m1)
    if n < MIN_PAIRS:
        raise BootstrapFailed(f"need >= {MIN_PAIRS} pairs, got {n}")
    rng = np.random.default_rng(seed)
    best_mask, best_count = None, -1
    for _ in range(iters):
        idx = rng.choice(n, size=MIN_PAIRS, replace=False)
        try:
            E = essential_eight_point(m1[idx], m2[idx])
        except np.linalg.LinAlgError:
            continue
        mask = sampson_error(E, m1, m2) < threshold ** 2
        if mask.sum() > best_count:
            best_count, best_mask = int(mask.sum()), mask
    if best_mask is None or best_count < MIN_PAIRS:
        raise BootstrapFailed("no consensus model")
    # final refit on all inliers, then a geometric polish; the second pass
    # re-polishes on the full recovered inlier set
    E = essential_eight_point(m1[best_mask], m2[best_mask])
    E = refine_essential(E, m1[best_mask], m2[best_mask], threshold=threshold)
    mask = sampson_error(E, m1, m2) < threshold ** 2
    if mask.sum() > best_mask.sum():
        E = refine_essential(E, m1[mask], m2[mask], threshold=threshold)
        mask = sampson_error(E, m1, m2) < threshold ** 2
    if mask.sum() < max(MIN_PAIRS, MIN_INLIER_RATIO * n):
        raise BootstrapFailed(f"only {int(mask.sum())}/{n} inliers")
    return E, mask


def triangulate_midpoint(pose1, pose2, m1, m2):
    """World points as midpoints of the closest segment between the rays."""
    m1h = _homog(np.atleast_2d(m1))
    m2h = _homog(np.atleast_2d(m2))
    d1 = m1h @ pose1.R.T
    d2 = m2h @ pose2.R.T
    o1, o2 = pose1.t, pose2.t
    pts = np.empty((len(m1h), 3))
    for i in range(len(m1h)):
        a, b = d1[i], d2[i]
        A = np.array([[a @ a, -a @ b], [a @ b, -b @ b]])
        rhs = np.array([a @ (o2 - o1), b @ (o2 - o1)])
        det = np.linalg.det(A)
        if abs(det) < 1e-14:
            pts[i] = np.full(3, np.nan)
            continue
        s, t = np.linalg.solve(A, rhs)
        pts[i] = 0.5 * (o1 + s * a + o2 + t * b)
    return pts if np.ndim(m1) == 2 else pts[0]


def decompose_essential(E, m1, m2):
    """Pick the (R21, t21) candidate with the best cheirality support.

    Returns (pose2, points, good mask): pose2 is camera-2-to-world with the
    first camera as world origin and a unit-length baseline; points are the
    midpoint triangulations of the pairs with positive depth in both views.
    """
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U[:, -1] *= -1
    if np.linalg.det(Vt) < 0:
        Vt[-1] *= -1
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    candidates = []
    for R21 in (U @ W @ Vt, U @ W.T @ Vt):
        for t21 in (U[:, 2], -U[:, 2]):
            R2 = R21.T
            t2 = -R21.T @ t21
            pose2 = Pose.from_rt(R2, t2 / np.linalg.norm(t2))
            pts = triangulate_midpoint(Pose.identity(), pose2, m1, m2)
            z1 = pts[:, 2]
            z2 = (pose2.inverse().transform(pts))[:, 2]
            good = np.isfinite(z1) & (z1 > 0) & (z2 > 0)
            candidates.append((int(good.sum()), pose2, pts, good))
    count, pose2, pts, good = max(candidates, key=lambda c: c[0])
    if count < 5:
        raise BootstrapFailed("cheirality check failed for all decompositions")
    return pose2, pts, good


def median_ray_parallax(pose2, m1, m2, points):
    """Median angle between the two observation rays of each point."""
    r1 = points / np.linalg.norm(points, axis=1, keepdims=True)
    v2 = points - pose2.t
    r2 = v2 / np.linalg.norm(v2, axis=1, keepdims=True)
    ang = np.arccos(np.clip(np.einsum("ij,ij->i", r1, r2), -1.0, 1.0))
    return float(np.median(ang))


def bootstrap_two_view(m1, m2, seed=0, threshold=RANSAC_THRESHOLD):
    """Full two-view initialization from normalized-coordinate pairs.

    Returns (pose2, points, inlier mask).  Raises BootstrapFailed on
    insufficient pairs, consensus, cheirality support, or parallax.
    """
    E, mask = essential_ransac(m1, m2, threshold=threshold, seed=seed)
    m1 = np.asarray(m1, dtype=float)
    m2 = np.asarray(m2, dtype=float)
    pose2, pts, good = decompose_essential(E, m1[mask], m2[mask])
    if median_ray_parallax(pose2, m1[mask][good], m2[mask][good],
                           pts[good]) < MIN_PARALLAX_RAD:
        raise BootstrapFailed("median parallax below floor")
    full_good = np.zeros(len(m1), dtype=bool)
    full_good[np.flatnonzero(mask)[good]] = True
    return pose2, pts[good], full_good
