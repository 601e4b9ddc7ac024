"""Frame tracking and local bundle adjustment over a mixed cost.

The tracker and the windowed optimizer both minimize

    E = E_point + lambda_w * E_text

where E_point sums Huber-robustified reprojection residuals of map points
and E_text sums Huber-robustified normalized photometric residuals of
active text objects.  lambda_w balances the two residual scales and is
calibrated as the ratio of their standard deviations at ground truth.

Tracking runs in three stages: constant-velocity pose prediction, a
coarse-to-fine minimization of the text cost alone to pull the prediction
into the photometric basin, and a joint solve at full resolution.  Local
bundle adjustment optimizes the mutable keyframe poses, point positions,
and text plane parameters together, coarse-to-fine over the pyramid for
the text terms.

Gauge freedom (monocular): the oldest keyframe in the map is always held
fixed, and the distance between the two oldest keyframes is preserved by
the retraction, pinning the global scale.
"""

import numpy as np
import scipy.sparse as sp

from . import geometry as geo
from . import photometric as ph
from .errors import (FlatPatch, InsufficientData, TooFewValid, TrackingLost,
                     SolverFailure)
from .geometry import Pose
from .solver import SolverReport, levenberg_marquardt
from .worldmap import WorldMap

LAMBDA_W_DEFAULT = 25.0   # sigma_rep ~ 1 px over sigma_photo ~ 0.04
HUBER_POINT = 2.0         # px
HUBER_TEXT = 1.345        # normalized intensity units
POINT_GATE_CHI2 = 5.99    # chi-square 95%, 2 dof
MIN_POINT_SAMPLES = 30    # calibration floor
MIN_TEXT_SAMPLES = 10
MAX_ITERS_TRACK = 30
MAX_ITERS_BA = 50
TRACK_LEVELS = (2, 1, 0)
MIN_TRACK_SUPPORT = 4     # point inliers + per-text support below this -> lost


class TrackerConfig:
    """Knobs shared by tracking and bundle adjustment."""

    def __init__(self, lambda_w=LAMBDA_W_DEFAULT, sigma_rep=1.0,
                 huber_point=HUBER_POINT, huber_text=HUBER_TEXT,
                 max_iters_track=MAX_ITERS_TRACK, max_iters_ba=MAX_ITERS_BA,
                 levels=TRACK_LEVELS, min_support=MIN_TRACK_SUPPORT):
        if lambda_w < 0:
            raise ValueError("lambda_w must be >= 0")
        self.lambda_w = float(lambda_w)
        self.sigma_rep = float(sigma_rep)
        self.huber_point = float(huber_point)
        self.huber_text = float(huber_text)
        self.max_iters_track = int(max_iters_track)
        self.max_iters_ba = int(max_iters_ba)
        self.levels = tuple(levels)
        self.min_support = int(min_support)

    @property
    def point_gate_sq(self):
        """Squared hard gate on point reprojection error (px^2)."""
        return POINT_GATE_CHI2 * self.sigma_rep ** 2


# ---------------------------------------------------------------------------
# pose prediction and calibration

def predict_pose(history, timestamp=None):
    """Constant-velocity extrapolation from the last two (timestamp, pose).

    The last relative motion, expressed in the body frame, is scaled by the
    ratio of the upcoming time step to the last one and composed onto the
    newest pose.  With fewer than two entries the newest pose (or identity)
    is returned unchanged.
    """
    history = list(history)
    if not history:
        return Pose.identity()
    if len(history) == 1:
        return history[-1][1].copy()
    (t0, p0), (t1, p1) = history[-2], history[-1]
    rel = p0.inverse() @ p1
    dt = t1 - t0
    s = 1.0
    if timestamp is not None and dt > 0:
        s = (float(timestamp) - t1) / dt
    w = geo.so3_log(rel.R) * s
    step = Pose.from_rt(geo.so3_exp(w), rel.t * s)
    return p1 @ step


def calibrate_lambda_w(point_residuals, text_residuals):
    """Balance weight lambda_w = sigma_rep / sigma_photo.

    point_residuals: (N, 2) per-point reprojection residuals (px) measured
    at ground truth under the deployment's noise.  text_residuals: sequence
    of per-text arrays of normalized photometric residuals at ground truth.
    Returns (lambda_w, sigma_rep, sigma_photo).
    """
    pr = np.atleast_2d(np.asarray(point_residuals, dtype=float))
    if len(pr) < MIN_POINT_SAMPLES:
        raise InsufficientData(
            f"need >= {MIN_POINT_SAMPLES} point samples, got {len(pr)}")
    if len(text_residuals) < MIN_TEXT_SAMPLES:
        raise InsufficientData(
            f"need >= {MIN_TEXT_SAMPLES} text samples, got {len(text_residuals)}")
    sigma_rep = float(pr.ravel().std())
    photo = np.concatenate([np.ravel(t) for t in text_residuals])
    sigma_photo = float(photo.std())
    lam = sigma_rep / max(sigma_photo, 1e-12)
    return lam, sigma_rep, sigma_photo


# ---------------------------------------------------------------------------
# point reprojection residuals

def point_residuals_jacobians(points_w, pixels, pose, camera, want_jac=True):
    """Reprojection residuals r = project(points) - pixels for one camera.

    pose is camera-to-world.  Returns (r (N, 2), valid (N,)) and, with
    want_jac, additionally (J_pose (N, 2, 6), J_point (N, 2, 3)).  The pose
    Jacobian is w.r.t. the retract() tangent (rotation, then translation);
    rows of invalid points are zeroed.
    """
    p = np.atleast_2d(np.asarray(points_w, dtype=float))
    z = np.atleast_2d(np.asarray(pixels, dtype=float))
    q = (p - pose.t) @ pose.R                 # camera-frame points, rowwise
    with np.errstate(divide="ignore", invalid="ignore"):
        mp = q[:, :2] / q[:, 2:3]
    u = camera.pixel(mp)
    finite = np.isfinite(u).all(axis=1)
    valid = (q[:, 2] > 1.0 / geo.RHO_MAX) & finite
    u[~finite] = 0.0
    r = u - z
    r[~valid] = 0.0
    if not want_jac:
        return r, valid

    N = len(p)
    inv_z = np.where(valid, 1.0 / np.where(q[:, 2] != 0.0, q[:, 2], 1.0), 0.0)
    Jd = np.zeros((N, 2, 3))
    Jd[:, 0, 0] = camera.fx * inv_z
    Jd[:, 1, 1] = camera.fy * inv_z
    Jd[:, 0, 2] = -camera.fx * q[:, 0] * inv_z ** 2
    Jd[:, 1, 2] = -camera.fy * q[:, 1] * inv_z ** 2
    # pose retract R <- R Exp(w): q(w) = Exp(-w) q, so dq/dw = [q]_x
    dq_dw = np.zeros((N, 3, 3))
    dq_dw[:, 0, 1] = -q[:, 2]
    dq_dw[:, 0, 2] = q[:, 1]
    dq_dw[:, 1, 0] = q[:, 2]
    dq_dw[:, 1, 2] = -q[:, 0]
    dq_dw[:, 2, 0] = -q[:, 1]
    dq_dw[:, 2, 1] = q[:, 0]
    RT = pose.R.T
    J_pose = np.concatenate(
        [Jd @ dq_dw, Jd @ (-RT)[None, :, :]], axis=2)     # (N, 2, 6)
    J_point = Jd @ RT[None, :, :]                          # (N, 2, 3)
    J_pose[~valid] = 0.0
    J_point[~valid] = 0.0
    return r, valid, J_pose, J_point


# ---------------------------------------------------------------------------
# frame tracking

def _active_text_terms(world_map):
    """(text id, patch, theta, host pose) for every active text object."""
    terms = []
    for tid in sorted(world_map.text_objects):
        obj = world_map.text_objects[tid]
        if obj.status != "active":
            continue
        host = world_map.keyframes[obj.plane.host_id]
        terms.append((tid, obj.patch, obj.plane.theta, host.pose))
    return terms


def _usable_texts(texts, pose, pyramid, level, camera):
    """Text terms that evaluate cleanly at the given pose and level.

    Terms that fail mid-optimization reject the trial step instead (see
    the solver), so the row layout stays fixed within one solve.
    """
    out = []
    for term in texts:
        _, patch, theta, host_pose = term
        try:
            ph.photometric_residuals(patch, theta, host_pose, pose, pyramid,
                                     level, camera)
        except (TooFewValid, FlatPatch):
            continue
        out.append(term)
    return out


def _pose_residual_fn(points_w, meas, texts, pyramid, level, camera, config,
                      use_points, use_texts):
    """residual_fn(pose) -> (r, J) plus the fixed Huber delta vector."""
    sl = np.sqrt(config.lambda_w)
    deltas = []
    if use_points and len(points_w):
        deltas.append(np.full(2 * len(points_w), config.huber_point))
    if use_texts:
        for _, patch, _, _ in texts:
            deltas.append(np.full(len(patch.ref_pixels),
                                  sl * config.huber_text))
    deltas = np.concatenate(deltas) if deltas else np.zeros(0)

    def fn(pose):
        rows_r, rows_J = [], []
        if use_points and len(points_w):
            r, _, J_pose, _ = point_residuals_jacobians(
                points_w, meas, pose, camera)
            rows_r.append(r.ravel())
            rows_J.append(J_pose.reshape(-1, 6))
        if use_texts:
            for _, patch, theta, host_pose in texts:
                r, _, _, _, J_t = ph.photometric_residuals_jacobians(
                    patch, theta, host_pose, pose, pyramid, level, camera)
                rows_r.append(sl * r)
                rows_J.append(sl * J_t)
        return np.concatenate(rows_r), np.vstack(rows_J)

    return fn, deltas


def track_frame(pyramid, timestamp, point_matches, world_map, camera,
                config=None, history=()):
    """Estimate the frame pose against the current map.

    point_matches: list of (map point id, measured pixel) in this frame.
    history: list of (timestamp, pose) of previously tracked frames, used
    for the constant-velocity prediction.  Returns (pose, SolverReport)
    with the per-point inlier mask in the report.  Raises TrackingLost.
    """
    if config is None:
        config = TrackerConfig()
    pose = predict_pose(history, timestamp)

    matches = [(pid, np.asarray(px, dtype=float)) for pid, px in point_matches
               if pid in world_map.map_points]
    points_w = np.array([world_map.map_points[pid].position
                         for pid, _ in matches]).reshape(-1, 3)
    meas = np.array([px for _, px in matches]).reshape(-1, 2)
    texts = _active_text_terms(world_map) if config.lambda_w > 0 else []

    if not len(matches) and not texts:
        raise TrackingLost("no point matches and no active texts")

    try:
        # stage (b): text cost alone, coarse to fine
        if texts:
            per_level = max(1, config.max_iters_track // len(config.levels))
            for level in config.levels:
                usable = _usable_texts(texts, pose, pyramid, level, camera)
                if not usable:
                    continue
                fn, deltas = _pose_residual_fn(
                    points_w, meas, usable, pyramid, level, camera, config,
                    use_points=False, use_texts=True)
                pose, _ = levenberg_marquardt(
                    pose, fn, retract_fn=lambda p, dx: p.retract(dx),
                    deltas_fn=lambda r, d=deltas: d, max_iters=per_level)
        # stage (c): joint solve at full resolution
        usable = _usable_texts(texts, pose, pyramid, 0, camera)
        if not len(matches) and not usable:
            raise TrackingLost("no usable measurements at the predicted pose")
        fn, deltas = _pose_residual_fn(
            points_w, meas, usable, pyramid, 0, camera, config,
            use_points=True, use_texts=bool(usable))
        pose, report = levenberg_marquardt(
            pose, fn, retract_fn=lambda p, dx: p.retract(dx),
            deltas_fn=lambda r, d=deltas: d,
            max_iters=config.max_iters_track)
    except SolverFailure as e:
        raise TrackingLost(str(e)) from e
    if not np.isfinite(report.final_cost):
        raise TrackingLost("tracking cost diverged")

    # hard inlier gate on the point terms
    if len(matches):
        r, valid = point_residuals_jacobians(points_w, meas, pose, camera,
                                             want_jac=False)
        inliers = valid & ((r ** 2).sum(axis=1) <= config.point_gate_sq)
    else:
        inliers = np.zeros(0, dtype=bool)
    text_support = 3 * len(_usable_texts(texts, pose, pyramid, 0, camera))
    support = int(inliers.sum()) + text_support
    if support < config.min_support:
        raise TrackingLost(
            f"support {support} below floor {config.min_support}")
    report.inlier_mask = inliers
    return pose, report


# ---------------------------------------------------------------------------
# local bundle adjustment

class _BAState:
    """Variable block bookkeeping for the windowed solve."""

    def __init__(self, world_map, window, config):
        mutable, fixed, point_ids, text_ids = window
        self.world_map = world_map
        self.config = config
        kfs_sorted = sorted(world_map.keyframes)
        self.oldest = kfs_sorted[0]
        self.second = kfs_sorted[1] if len(kfs_sorted) > 1 else None
        # the oldest keyframe anchors the gauge and never varies
        self.pose_ids = [k for k in sorted(mutable) if k != self.oldest]
        self.point_ids = sorted(point_ids)
        self.text_ids = sorted(text_ids)
        self.all_kfs = set(mutable) | set(fixed)

        self.poses = {k: world_map.keyframes[k].pose.copy()
                      for k in self.pose_ids}
        self.points = {pid: world_map.map_points[pid].position.copy()
                       for pid in self.point_ids}
        self.thetas = {tid: np.asarray(
            world_map.text_objects[tid].plane.theta, dtype=float).copy()
            for tid in self.text_ids}

        self.pose_off = {k: 6 * i for i, k in enumerate(self.pose_ids)}
        base = 6 * len(self.pose_ids)
        self.point_off = {p: base + 3 * i
                          for i, p in enumerate(self.point_ids)}
        base += 3 * len(self.point_ids)
        self.theta_off = {t: base + 3 * i
                          for i, t in enumerate(self.text_ids)}
        self.n_cols = base + 3 * len(self.text_ids)

        # monocular scale gauge: distance between the two oldest keyframes
        anchor_t = world_map.keyframes[self.oldest].pose.t
        self.gauge_dist = None
        if self.second is not None and self.second in self.poses:
            self.gauge_dist = float(np.linalg.norm(
                self.poses[self.second].t - anchor_t))
        self.anchor_t = anchor_t

    def pose_of(self, kid):
        if kid in self.poses:
            return self.poses[kid]
        return self.world_map.keyframes[kid].pose

    def retracted(self, dx):
        new = object.__new__(_BAState)
        new.__dict__.update(self.__dict__)
        new.poses = {}
        for k in self.pose_ids:
            p = self.poses[k].retract(dx[self.pose_off[k]:self.pose_off[k] + 6])
            if k == self.second and self.gauge_dist is not None:
                d = p.t - self.anchor_t
                n = np.linalg.norm(d)
                if n > 1e-12:
                    p = Pose.from_rt(p.R, self.anchor_t + d * (self.gauge_dist / n))
            new.poses[k] = p
        new.points = {pid: self.points[pid] + dx[off:off + 3]
                      for pid, off in self.point_off.items()}
        new.thetas = {tid: self.thetas[tid] + dx[off:off + 3]
                      for tid, off in self.theta_off.items()}
        return new

    def write_back(self):
        for k, pose in self.poses.items():
            self.world_map.keyframes[k].pose = pose
        for pid, pos in self.points.items():
            self.world_map.map_points[pid].position = pos
        for tid, theta in self.thetas.items():
            obj = self.world_map.text_objects[tid]
            obj.plane = geo.TextPlane(theta, obj.plane.host_id)


def _ba_residual_fn(state, level, camera):
    """residual_fn(state) -> (r, sparse J) at one pyramid level, plus deltas."""
    wm = state.world_map
    config = state.config
    sl = np.sqrt(config.lambda_w)

    by_kf = {}         # kid -> ([pid], [pixel]); batched per camera
    for pid in state.point_ids:
        for kid, px in wm.map_points[pid].observations:
            if kid in state.all_kfs:
                by_kf.setdefault(kid, ([], []))
                by_kf[kid][0].append(pid)
                by_kf[kid][1].append(px)
    point_groups = []  # (kid, pids, pixels (n, 2), point column offsets)
    n_point_rows = 0
    for kid in sorted(by_kf):
        pids_g, pxs = by_kf[kid]
        point_groups.append((kid, pids_g, np.asarray(pxs, dtype=float),
                             np.array([state.point_off[p] for p in pids_g])))
        n_point_rows += 2 * len(pids_g)
    text_terms = []    # (tid, target kid) — the host never pairs with itself
    if config.lambda_w > 0:
        for tid in state.text_ids:
            obj = wm.text_objects[tid]
            host_id = obj.plane.host_id
            for kid in sorted(obj.observed_keyframes):
                if kid == host_id or kid not in state.pose_ids:
                    continue
                if wm.keyframes[kid].pyramid is None:
                    continue
                try:  # keep only pairs that evaluate at the current state
                    ph.photometric_residuals(
                        obj.patch, state.thetas[tid], state.pose_of(host_id),
                        state.pose_of(kid), wm.keyframes[kid].pyramid,
                        level, camera)
                except (TooFewValid, FlatPatch):
                    continue
                text_terms.append((tid, kid))

    deltas = [np.full(n_point_rows, config.huber_point)]
    for tid, _ in text_terms:
        K = len(wm.text_objects[tid].patch.ref_pixels)
        deltas.append(np.full(K, sl * config.huber_text))
    deltas = np.concatenate(deltas) if deltas else np.zeros(0)

    def fn(st):
        rows, cols, vals, res = [], [], [], []
        row = 0

        def add_block(r0, c0, block):
            h, w = block.shape
            rr, cc = np.mgrid[0:h, 0:w]
            rows.append((rr + r0).ravel())
            cols.append((cc + c0).ravel())
            vals.append(block.ravel())

        def add_blocks(r0s, c0s, blocks):
            n, h, w = blocks.shape
            rr = r0s[:, None, None] + np.arange(h)[None, :, None]
            cc = c0s[:, None, None] + np.arange(w)[None, None, :]
            rows.append(np.broadcast_to(rr, (n, h, w)).ravel())
            cols.append(np.broadcast_to(cc, (n, h, w)).ravel())
            vals.append(blocks.ravel())

        for kid, pids_g, pxs, pt_cols in point_groups:
            pose = st.pose_of(kid)
            pts = np.array([st.points[pid] for pid in pids_g])
            r, valid, J_pose, J_point = point_residuals_jacobians(
                pts, pxs, pose, camera)
            res.append(r.ravel())
            r0s = row + 2 * np.arange(len(pids_g))
            if kid in st.pose_off:
                add_blocks(r0s, np.full(len(pids_g), st.pose_off[kid]),
                           J_pose)
            add_blocks(r0s, pt_cols, J_point)
            row += 2 * len(pids_g)

        for tid, kid in text_terms:
            obj = wm.text_objects[tid]
            host_id = obj.plane.host_id
            host_pose = st.pose_of(host_id)
            target_pose = st.pose_of(kid)
            pyr = wm.keyframes[kid].pyramid
            K = len(obj.patch.ref_pixels)
            r, _, J_th, J_h, J_t = ph.photometric_residuals_jacobians(
                obj.patch, st.thetas[tid], host_pose, target_pose,
                pyr, level, camera)
            res.append(sl * r)
            add_block(row, st.theta_off[tid], sl * J_th)
            add_block(row, st.pose_off[kid], sl * J_t)
            if host_id in st.pose_off:
                add_block(row, st.pose_off[host_id], sl * J_h)
            row += K

        r_all = np.concatenate(res) if res else np.zeros(0)
        if rows:
            J = sp.coo_matrix(
                (np.concatenate(vals),
                 (np.concatenate(rows), np.concatenate(cols))),
                shape=(row, st.n_cols)).tocsr()
        else:
            J = sp.csr_matrix((row, st.n_cols))
        return r_all, J

    return fn, deltas


def local_bundle_adjust(world_map, window, camera, config=None):
    """Jointly refine poses, points, and text planes in a local window.

    window is the (mutable, fixed, points, texts) tuple from
    WorldMap.local_window.  Text terms run coarse-to-fine over the pyramid;
    point terms always use full resolution.  Results are written back to
    the map.  Raises SolverFailure when the normal equations stay singular.
    """
    if config is None:
        config = TrackerConfig()
    mutable, fixed, point_ids, text_ids = window
    if not mutable:
        raise ValueError("empty local window")
    state = _BAState(world_map, window, config)
    if state.n_cols == 0:
        return SolverReport(converged=True)

    levels = config.levels if (state.text_ids and config.lambda_w > 0) else (0,)
    budget = max(1, config.max_iters_ba // len(levels))
    total = SolverReport()
    for i, level in enumerate(levels):
        fn, deltas = _ba_residual_fn(state, level, camera)
        state, rep = levenberg_marquardt(
            state, fn, retract_fn=lambda s, dx: s.retracted(dx),
            deltas_fn=lambda r, d=deltas: d, max_iters=budget)
        total.iterations += rep.iterations
        if i == 0:
            total.initial_cost = rep.initial_cost
        total.final_cost = rep.final_cost
        total.converged = rep.converged
        total.cost_history.extend(rep.cost_history)
    state.write_back()
    return total


# ---------------------------------------------------------------------------
# bootstrap

def bootstrap(pixels1, pixels2, timestamps, camera, seed=0):
    """Initialize a map from two frames with tracked correspondences.

    pixels1/pixels2: matched pixel positions in the two frames.  Runs
    essential-matrix consensus, cheirality-checked decomposition, and
    midpoint triangulation with the baseline fixed to unit length.  Both
    frames become keyframes.  Returns (world_map, inlier mask).  Raises
    BootstrapFailed on insufficient pairs, consensus, or parallax.
    """
    from .twoview import bootstrap_two_view

    px1 = np.atleast_2d(np.asarray(pixels1, dtype=float))
    px2 = np.atleast_2d(np.asarray(pixels2, dtype=float))
    m1 = camera.normalize(px1)
    m2 = camera.normalize(px2)
    pose2, points, inliers = bootstrap_two_view(m1, m2, seed=seed)

    world_map = WorldMap()
    kf1 = world_map.insert_keyframe(timestamps[0], Pose.identity())
    kf2 = world_map.insert_keyframe(timestamps[1], pose2)
    idx = np.flatnonzero(inliers)
    for j, i in enumerate(idx):
        world_map.insert_point(points[j], observations=[
            (kf1.id, tuple(px1[i])), (kf2.id, tuple(px2[i]))])
    return world_map, inliers
