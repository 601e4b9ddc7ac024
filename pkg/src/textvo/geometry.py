"""SE(3) poses, pinhole camera model, and text-plane geometry.

The text plane is encoded by a 3-vector ``theta`` expressed in its host
camera frame: the dot product of theta with the homogeneous normalized
image coordinates of a point on the plane gives that point's inverse
depth.  With the plane written as ``n^T p + d = 0`` this corresponds to
``theta = -n / d``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, DegenerateConfiguration

RHO_MIN = 0.01   # inverse-depth floor: max depth 100 m
RHO_MAX = 10.0   # inverse-depth cap: min depth 0.1 m
COND_CAP = 1e8   # condition cap for plane-from-depths solve


def skew(v):
    """3x3 cross-product matrix of a 3-vector."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


# ---------------------------------------------------------------------------
# quaternions (w, x, y, z) and SO(3)
# ---------------------------------------------------------------------------

def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    q = q / n
    # fix the double-cover sign for reproducibility
    if q[0] < 0.0:
        q = -q
    return q


def quat_mul(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conj(q):
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q):
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(R):
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0.0:
        s = np.sqrt(t + 1.0) * 2.0
        q = np.array([0.25 * s,
                      (R[2, 1] - R[1, 2]) / s,
                      (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    return quat_normalize(q)


def so3_exp(w):
    """Rotation matrix from an axis-angle 3-vector."""
    w = np.asarray(w, dtype=float)
    angle = np.linalg.norm(w)
    if angle < 1e-12:
        return np.eye(3) + skew(w)
    axis = w / angle
    K = skew(axis)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def so3_log(R):
    """Axis-angle 3-vector from a rotation matrix."""
    cos_angle = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = np.arccos(cos_angle)
    if angle < 1e-10:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if angle > np.pi - 1e-6:
        # near pi: extract axis from the symmetric part
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diag(A), 0.0))
        k = int(np.argmax(axis))
        axis = A[:, k] / axis[k]
        axis = axis / np.linalg.norm(axis)
        return axis * angle
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return v * angle / (2.0 * np.sin(angle))


class Pose:
    """Rigid transform (frame-to-world), stored as unit quaternion + translation.

    ``transform(p)`` maps a point from the pose's own frame into the
    parent (world) frame: ``R p + t``.
    """

    __slots__ = ("q", "t")

    def __init__(self, q=None, t=None):
        self.q = quat_normalize(q if q is not None else (1.0, 0.0, 0.0, 0.0))
        self.t = np.zeros(3) if t is None else np.asarray(t, dtype=float).copy()

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def from_rt(cls, R, t):
        return cls(quat_from_matrix(R), t)

    @classmethod
    def from_matrix(cls, T):
        return cls.from_rt(T[:3, :3], T[:3, 3])

    @property
    def R(self):
        return quat_to_matrix(self.q)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self):
        Rt = self.R.T
        return Pose.from_rt(Rt, -Rt @ self.t)

    def compose(self, other):
        """self * other (apply other first)."""
        return Pose(quat_mul(self.q, other.q), self.R @ other.t + self.t)

    def __matmul__(self, other):
        return self.compose(other)

    def transform(self, pts):
        pts = np.asarray(pts, dtype=float)
        return pts @ self.R.T + self.t

    def retract(self, delta):
        """Local update: rotation right-multiplied by exp(w), translation additive.

        delta = (wx, wy, wz, tx, ty, tz).
        """
        delta = np.asarray(delta, dtype=float)
        Rnew = self.R @ so3_exp(delta[:3])
        return Pose.from_rt(Rnew, self.t + delta[3:])

    def rotation_angle_to(self, other):
        """Relative rotation angle in radians."""
        return np.linalg.norm(so3_log(self.R.T @ other.R))

    def copy(self):
        return Pose(self.q.copy(), self.t.copy())

    def __repr__(self):
        return f"Pose(q={self.q}, t={self.t})"


def relative_pose(host, target):
    """(R, t) of T = T_target^-1 T_host, mapping host-frame points into target frame."""
    Rt = target.R.T
    R = Rt @ host.R
    t = Rt @ (host.t - target.t)
    return R, t


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def normalize(self, px):
        """Pixel coordinates -> normalized camera coordinates."""
        px = np.asarray(px, dtype=float)
        u = (px[..., 0] - self.cx) / self.fx
        v = (px[..., 1] - self.cy) / self.fy
        return np.stack([u, v], axis=-1)

    def pixel(self, m):
        """Normalized camera coordinates -> pixel coordinates."""
        m = np.asarray(m, dtype=float)
        return np.stack([m[..., 0] * self.fx + self.cx,
                         m[..., 1] * self.fy + self.cy], axis=-1)

    def project(self, pts):
        """3D camera-frame points -> pixel coordinates (no cheirality check)."""
        pts = np.asarray(pts, dtype=float)
        m = pts[..., :2] / pts[..., 2:3]
        return self.pixel(m)

    def scaled(self, level):
        """Camera matching pyramid level `level` (2x box-filter downsampling).

        Coarse pixel centers sit at fine coordinates 2*i + 0.5, so
        cx_level = (cx - 0.5) / 2 + ... applied recursively.
        """
        s = 2 ** level
        return PinholeCamera(
            fx=self.fx / s, fy=self.fy / s,
            cx=(self.cx + 0.5) / s - 0.5,
            cy=(self.cy + 0.5) / s - 0.5,
            width=self.width // s, height=self.height // s,
        )

    def in_bounds(self, px, margin=0.0):
        px = np.asarray(px, dtype=float)
        return ((px[..., 0] >= margin) & (px[..., 0] <= self.width - 1 - margin)
                & (px[..., 1] >= margin) & (px[..., 1] <= self.height - 1 - margin))


@dataclass(frozen=True)
class TextPlane:
    """Plane of a text patch, anchored in its host keyframe."""
    theta: np.ndarray       # 3-vector, 1/meters, host camera frame
    host_id: int

    @staticmethod
    def theta_from_plane(n, d):
        """theta from plane n^T p + d = 0; invariant under (n, d) -> (-n, -d)."""
        n = np.asarray(n, dtype=float)
        return -n / d


def homogeneous(m):
    """Append a 1 to normalized 2D coordinates (works on (...,2) arrays)."""
    m = np.asarray(m, dtype=float)
    return np.concatenate([m, np.ones(m.shape[:-1] + (1,))], axis=-1)


def inverse_depth(theta, m):
    """rho = theta^T (u, v, 1) for normalized coordinates m (scalar or batch)."""
    return homogeneous(m) @ np.asarray(theta, dtype=float)


def unit_normal(theta):
    """Unit plane normal direction (sign-ambiguous) in the host frame."""
    theta = np.asarray(theta, dtype=float)
    return theta / np.linalg.norm(theta)


def plane_from_inverse_depths(points, rhos):
    """Solve [m~_i^T] theta = rho_i by least squares (>= 3 points)."""
    points = np.asarray(points, dtype=float)
    rhos = np.asarray(rhos, dtype=float)
    if points.shape[0] < 3:
        raise DegenerateConfiguration("need at least 3 points")
    A = homogeneous(points)
    s = np.linalg.svd(A, compute_uv=False)
    if s[-1] == 0.0 or s[0] / s[-1] > COND_CAP:
        raise DegenerateConfiguration("collinear or near-collinear points")
    theta, *_ = np.linalg.lstsq(A, rhos, rcond=None)
    return theta


def backproject(theta, m):
    """Host-frame 3D point of normalized coordinates m on the plane."""
    rho = inverse_depth(theta, m)
    if rho <= RHO_MIN:
        raise BehindCamera(f"inverse depth {rho} below floor {RHO_MIN}")
    return homogeneous(m) / rho


def text_homography(theta, host_pose, target_pose):
    """Unnormalized homography R + t theta^T mapping host normalized coords to target."""
    R, t = relative_pose(host_pose, target_pose)
    return R + np.outer(t, np.asarray(theta, dtype=float))


def project_text_points(px, host_pose, target_pose, theta, camera, margin=1.0):
    """Project host-image pixels through the text-plane homography into the target image.

    px: (N, 2) host pixel coordinates.
    Returns (target_pixels (N, 2), valid (N,) bool).  valid requires positive
    depth in both cameras and the target pixel inside the image with `margin`.
    """
    px = np.atleast_2d(np.asarray(px, dtype=float))
    m = camera.normalize(px)
    mh = homogeneous(m)
    rho = mh @ np.asarray(theta, dtype=float)
    H = text_homography(theta, host_pose, target_pose)
    q = mh @ H.T
    # q = rho * (target-frame point); target depth is q[...,2] / rho
    with np.errstate(divide="ignore", invalid="ignore"):
        z_t = q[:, 2] / rho
        mp = q[:, :2] / q[:, 2:3]
    out = camera.pixel(mp)
    valid = (rho > RHO_MIN) & (z_t > 1.0 / RHO_MAX) & np.isfinite(out).all(axis=1)
    valid &= camera.in_bounds(out, margin=margin)
    out[~np.isfinite(out)] = -1.0
    return out, valid


def project_text_point(px, host_pose, target_pose, theta, camera, margin=1.0):
    """Single-point version of project_text_points.

    Raises BehindCamera on failed cheirality; returns (pixel, in_image flag).
    """
    px = np.asarray(px, dtype=float)
    m = camera.normalize(px)
    rho = inverse_depth(theta, m)
    if rho <= RHO_MIN:
        raise BehindCamera(f"host inverse depth {rho} below floor")
    H = text_homography(theta, host_pose, target_pose)
    q = H @ homogeneous(m)
    z_t = q[2] / rho
    if z_t <= 1.0 / RHO_MAX:
        raise BehindCamera(f"target depth {z_t} not positive")
    out = camera.pixel(q[:2] / q[2])
    return out, bool(camera.in_bounds(out, margin=margin))


def project_text_points_jacobians(px, host_pose, target_pose, theta, camera):
    """Target pixels of host pixels plus Jacobians.

    Returns (pixels (N,2), valid (N,), J_theta (N,2,3), J_host (N,2,6),
    J_target (N,2,6)).  Pose Jacobians are w.r.t. the retract() tangent
    (rotation first, then translation) of the respective pose.
    """
    px = np.atleast_2d(np.asarray(px, dtype=float))
    theta = np.asarray(theta, dtype=float)
    m = camera.normalize(px)
    mh = homogeneous(m)                       # (N,3)
    rho = mh @ theta                          # (N,)
    Rh, th = host_pose.R, host_pose.t
    Rt_T = target_pose.R.T
    tt = target_pose.t
    Pw = mh @ Rh.T + np.outer(rho, th)        # (N,3) = rho * world point
    q = (Pw - np.outer(rho, tt)) @ Rt_T.T     # (N,3) = rho * target point

    with np.errstate(divide="ignore", invalid="ignore"):
        z_t = q[:, 2] / rho
        mp = q[:, :2] / q[:, 2:3]
    pixels = camera.pixel(mp)
    valid = (rho > RHO_MIN) & (z_t > 1.0 / RHO_MAX) & np.isfinite(pixels).all(axis=1)
    pixels[~np.isfinite(pixels)] = -1.0

    N = px.shape[0]
    # d(dehom)/dq, scaled by focal lengths: (N,2,3)
    inv_q3 = np.where(q[:, 2] != 0.0, 1.0 / q[:, 2], 0.0)
    Jd = np.zeros((N, 2, 3))
    Jd[:, 0, 0] = camera.fx * inv_q3
    Jd[:, 1, 1] = camera.fy * inv_q3
    Jd[:, 0, 2] = -camera.fx * q[:, 0] * inv_q3 ** 2
    Jd[:, 1, 2] = -camera.fy * q[:, 1] * inv_q3 ** 2

    # dq/dtheta = (R_t^T (t_h - t_t)) m~^T -> (N,3,3)
    t_rel = Rt_T @ (th - tt)
    dq_dtheta = t_rel[None, :, None] * mh[:, None, :]
    # target rotation R_t <- R_t Exp(w): q(w) = Exp(-w) q, so dq/dw = [q]_x
    dq_dwt = np.stack([np.cross(q, np.eye(3)[i]) for i in range(3)], axis=2)
    dq_dtt = -rho[:, None, None] * Rt_T[None, :, :]
    # host rotation R_h <- R_h Exp(w): dq/dw column i = R_rel (e_i x m~)
    Rrel = Rt_T @ Rh
    dq_dwh = np.stack([np.cross(np.eye(3)[i], mh) @ Rrel.T for i in range(3)], axis=2)
    dq_dth = rho[:, None, None] * Rt_T[None, :, :]

    J_theta = Jd @ dq_dtheta
    J_target = np.concatenate([Jd @ dq_dwt, Jd @ dq_dtt], axis=2)
    J_host = np.concatenate([Jd @ dq_dwh, Jd @ dq_dth], axis=2)
    return pixels, valid, J_theta, J_host, J_target
