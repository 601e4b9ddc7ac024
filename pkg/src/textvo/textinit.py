"""Text object lifecycle: detection ingest, plane initialization, refinement.

Detector quads spawn candidates with FAST seed tracks; once enough
parallax accumulates, the plane 3-vector theta is solved linearly from the
tracks and then refined photometrically; candidates observed in enough
keyframes are promoted to active text objects.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import (DegenerateConfiguration, Diverged, InsufficientParallax,
                     RegionTooSmall, TooFewValid, FlatPatch)
from .geometry import TextPlane, homogeneous, inverse_depth, relative_pose, skew
from .image import detect_corners, klt_track
from .photometric import make_text_patch, photometric_residuals_jacobians
from .solver import levenberg_marquardt
from .worldmap import N_MIN

PARALLAX_FLOOR_PX = 2.0   # median rotation-compensated seed displacement
CANDIDATE_CAP_KF = 10     # keyframes without successful init -> rejected
SEED_COUNT = 10
IOU_EXTEND = 0.3          # detection matching an existing candidate
HUBER_TEXT = 1.345        # normalized intensity units
RHO_MIN, RHO_MAX = 0.01, 10.0
REFINE_LEVELS = (2, 1, 0)


# ---------------------------------------------------------------------------
# quad utilities
# ---------------------------------------------------------------------------

def _cross2(a, b):
    return a[0] * b[1] - a[1] * b[0]


def quad_is_convex(quad):
    """True when all cross products of consecutive edges share one sign."""
    q = np.asarray(quad, dtype=float)
    crosses = []
    for i in range(4):
        a = q[(i + 1) % 4] - q[i]
        b = q[(i + 2) % 4] - q[(i + 1) % 4]
        crosses.append(_cross2(a, b))
    crosses = np.asarray(crosses)
    return bool(np.all(crosses > 0) or np.all(crosses < 0))


def _clip_polygon(poly, a, b):
    """Sutherland-Hodgman: keep the side of directed edge a->b left of it."""
    out = []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        side_p = _cross2(b - a, p - a)
        side_q = _cross2(b - a, q - a)
        if side_p >= 0:
            out.append(p)
        if side_p * side_q < 0:
            t = side_p / (side_p - side_q)
            out.append(p + t * (q - p))
    return out


def _poly_area(poly):
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _ccw(quad):
    q = np.asarray(quad, dtype=float)
    x, y = q[:, 0], q[:, 1]
    signed = 0.5 * (np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
    return q if signed > 0 else q[::-1]


def quad_iou(quad_a, quad_b):
    """Intersection-over-union of two convex quads."""
    a = _ccw(quad_a)
    b = _ccw(quad_b)
    poly = list(a)
    for i in range(4):
        poly = _clip_polygon(poly, b[i], b[(i + 1) % 4])
        if not poly:
            return 0.0
    inter = _poly_area(poly)
    union = _poly_area(a) + _poly_area(b) - inter
    return inter / union if union > 0 else 0.0


def quad_in_image(quad, camera, margin=0.0):
    return bool(np.all(camera.in_bounds(np.asarray(quad, dtype=float),
                                        margin=margin)))


# ---------------------------------------------------------------------------
# plane initialization from point tracks
# ---------------------------------------------------------------------------

def init_theta_from_tracks(m_host, m_target, rel):
    """Linear plane solve from >=3 normalized-coordinate correspondences.

    rel: (R, t) mapping host-frame points into the target frame (a Pose is
    accepted too).  Each pair (m, m') satisfies
    [m'~]x t m~^T theta = -[m'~]x R m~ (three rows of rank 1 per pair).
    Returns (theta, smallest singular value of the stacked system).
    """
    m_host = np.atleast_2d(np.asarray(m_host, dtype=float))
    m_target = np.atleast_2d(np.asarray(m_target, dtype=float))
    if len(m_host) < 3 or len(m_host) != len(m_target):
        raise DegenerateConfiguration(f"need >=3 pairs, got {len(m_host)}")
    R, t = rel if isinstance(rel, tuple) else (rel.R, rel.t)
    if np.linalg.norm(t) < 1e-9:
        raise InsufficientParallax("zero baseline")
    rows = []
    rhs = []
    for m, mp in zip(homogeneous(m_host), homogeneous(m_target)):
        S = skew(mp)
        rows.append(np.outer(S @ t, m))
        rhs.append(-S @ R @ m)
    A = np.concatenate(rows, axis=0)
    b = np.concatenate(rhs, axis=0)
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[2] < 1e-10 * max(sv[0], 1e-300):
        raise DegenerateConfiguration(
            f"stacked system rank < 3 (singular values {sv[:3]})")
    theta, *_ = np.linalg.lstsq(A, b, rcond=None)
    return theta, float(sv[2])


def rotation_compensated_parallax(px_host, px_target, host_pose, target_pose,
                                  camera):
    """Median seed displacement with the rotation component removed (px)."""
    px_host = np.asarray(px_host, dtype=float)
    px_target = np.asarray(px_target, dtype=float)
    R_rel, _ = relative_pose(host_pose, target_pose)
    m = homogeneous(camera.normalize(px_host)) @ R_rel.T
    pred = camera.pixel(m[:, :2] / m[:, 2:3])
    return float(np.median(np.linalg.norm(px_target - pred, axis=1)))


# ---------------------------------------------------------------------------
# photometric refinement of theta
# ---------------------------------------------------------------------------

def _corner_depth_ok(theta, quad, camera):
    rho = np.array([inverse_depth(theta, camera.normalize(px)) for px in quad])
    return bool(np.all((rho >= RHO_MIN) & (rho <= RHO_MAX)))


def refine_theta(theta0, patch, host_pose, targets, camera,
                 max_iters=30, levels=REFINE_LEVELS):
    """Levenberg-Marquardt over theta alone, coarse-to-fine over the pyramid.

    targets: list of (pose, pyramid) keyframe observations.  Returns the
    refined theta; guaranteed not to end at a higher full-resolution cost
    than theta0.  Raises Diverged when the plane leaves the admissible
    depth range or the photometric terms become unevaluable.
    """
    theta0 = np.asarray(theta0, dtype=float)
    if not targets:
        raise Diverged("no target frames")
    if not _corner_depth_ok(theta0, patch.quad, camera):
        raise Diverged("initial plane puts quad corners outside depth range")

    def residual_at(theta, level):
        rs, Js = [], []
        for pose, pyr in targets:
            r, valid, J_th, _, _ = photometric_residuals_jacobians(
                patch, theta, host_pose, pose, pyr, level, camera)
            rs.append(r[valid])
            Js.append(J_th[valid])
        return np.concatenate(rs), np.concatenate(Js, axis=0)

    def full_res_cost(theta):
        r, _ = residual_at(theta, 0)
        from .solver import huber_cost
        return huber_cost(r, HUBER_TEXT)

    theta = theta0.copy()
    budget = max(max_iters // len(levels), 1)
    try:
        cost0 = full_res_cost(theta0)
        for level in levels:
            theta, _ = levenberg_marquardt(
                theta, lambda th: residual_at(th, level),
                deltas_fn=lambda r: HUBER_TEXT, max_iters=budget)
            if not _corner_depth_ok(theta, patch.quad, camera):
                raise Diverged("plane left admissible depth range")
        if full_res_cost(theta) > cost0:
            return theta0  # keep the no-worse starting point
    except (TooFewValid, FlatPatch) as e:
        raise Diverged(str(e)) from e
    return theta


# ---------------------------------------------------------------------------
# candidate management
# ---------------------------------------------------------------------------

@dataclass
class TextDetection:
    frame_id: int
    quad: np.ndarray          # (4, 2) pixel corners, counter-clockwise
    confidence: float = 1.0
    text_string: str = ""

    def __post_init__(self):
        self.quad = np.asarray(self.quad, dtype=float).reshape(4, 2)


@dataclass
class TextCandidate:
    host_frame: int           # frame (keyframe) the quad/seeds anchor to
    quad: np.ndarray          # quad in the host frame
    seeds_host: np.ndarray    # (N, 2) seed pixels in the host frame
    seeds_cur: np.ndarray     # current tracked positions
    alive: np.ndarray         # (N,) bool
    text_string: str = ""
    patch: object = None      # provisional TextPatch in the host frame
    theta: np.ndarray = None
    keyframes_seen: int = 0   # keyframes since creation
    successes: int = 0        # keyframe observations with a valid theta
    observed_kf_ids: list = field(default_factory=list)
    kf_targets: list = field(default_factory=list)  # (pose, pyramid) history
    status: str = "candidate"

    @property
    def live_count(self):
        return int(self.alive.sum())


def spawn_candidate(detection, image, camera, seed_count=SEED_COUNT,
                    active_quads=(), candidates=()):
    """Gate a detection and build a candidate from it.

    Returns (candidate | None, reason).  reason is "ok", "extended", or a
    rejection cause; extension updates the matching existing candidate's
    bookkeeping instead of spawning a duplicate.
    """
    quad = detection.quad
    if not quad_is_convex(quad):
        return None, "bad initialization: non-convex quad"
    if not quad_in_image(quad, camera):
        return None, "bad initialization: partially out of image"
    for aq in active_quads:
        if quad_iou(quad, aq) > 0.0:
            return None, "bad initialization: intersects active text"
    for cand in candidates:
        if cand.status == "candidate" and quad_iou(quad, cand.quad) > IOU_EXTEND:
            return None, "extended"
    try:
        corners = detect_corners(image, region=quad, max_count=seed_count)
    except Exception:
        corners = []
    seeds = np.array([c.position for c in corners], dtype=float)
    if len(seeds) < 3:
        return None, "bad initialization: fewer than 3 seeds"
    try:
        patch = make_text_patch(image, quad, camera)
    except (RegionTooSmall, FlatPatch) as e:
        return None, f"bad initialization: {e}"
    return TextCandidate(
        host_frame=detection.frame_id, quad=quad.copy(),
        seeds_host=seeds, seeds_cur=seeds.copy(),
        alive=np.ones(len(seeds), dtype=bool),
        text_string=detection.text_string, patch=patch), "ok"


def step_candidate_tracks(candidate, prev_pyramid, next_pyramid):
    """One frame of KLT on the live seeds; candidates below 3 live die."""
    if candidate.status != "candidate":
        return candidate.status
    idx = np.flatnonzero(candidate.alive)
    if len(idx) == 0:
        candidate.status = "rejected"
        return candidate.status
    tracked, ok = klt_track(prev_pyramid, next_pyramid,
                            candidate.seeds_cur[idx])
    candidate.seeds_cur[idx] = np.where(ok[:, None], tracked,
                                        candidate.seeds_cur[idx])
    candidate.alive[idx] &= ok
    if candidate.live_count < 3:
        candidate.status = "rejected"
    return candidate.status


def observe_at_keyframe(candidate, kf_id, host_pose, kf_pose, kf_pyramid,
                        camera, n_min=N_MIN, cap=CANDIDATE_CAP_KF):
    """Keyframe-rate candidate update: init/refine theta, count successes.

    Returns the candidate status after the update ("candidate", "promoted",
    or "rejected").  host_pose is the pose of the candidate's host keyframe.
    """
    if candidate.status != "candidate":
        return candidate.status
    candidate.keyframes_seen += 1
    idx = np.flatnonzero(candidate.alive)
    if len(idx) < 3:
        candidate.status = "rejected"
        return candidate.status

    parallax = rotation_compensated_parallax(
        candidate.seeds_host[idx], candidate.seeds_cur[idx],
        host_pose, kf_pose, camera)
    success = False
    if parallax >= PARALLAX_FLOOR_PX:
        rel = relative_pose(host_pose, kf_pose)
        try:
            theta, _ = init_theta_from_tracks(
                camera.normalize(candidate.seeds_host[idx]),
                camera.normalize(candidate.seeds_cur[idx]), rel)
            # refine against every keyframe observed so far: accuracy along
            # the plane normal is limited by the total baseline spread.  The
            # fresh linear solve (widest baseline) starts the refinement;
            # warm-starting from the previous narrow-baseline estimate tends
            # to stall in the flat region around it.
            targets = candidate.kf_targets + [(kf_pose, kf_pyramid)]
            theta = refine_theta(theta, candidate.patch, host_pose,
                                 targets, camera)
            candidate.theta = theta
            candidate.kf_targets.append((kf_pose, kf_pyramid))
            success = True
        except (InsufficientParallax, DegenerateConfiguration, Diverged):
            success = False
    if success:
        candidate.successes += 1
        candidate.observed_kf_ids.append(kf_id)
        if candidate.successes >= n_min:
            candidate.status = "promoted"
            return candidate.status
    if candidate.keyframes_seen >= cap and candidate.successes == 0:
        candidate.status = "rejected"
    return candidate.status


def promote_to_text(candidate, world_map, host_kf_id, camera):
    """Insert a promoted candidate into the map as an active text object."""
    plane = TextPlane(np.asarray(candidate.theta, dtype=float), host_kf_id)
    obj = world_map.insert_text(plane, candidate.patch,
                                semantic_string=candidate.text_string,
                                observed_keyframes=candidate.observed_kf_ids)
    world_map.promote_text(obj.id)
    return obj
