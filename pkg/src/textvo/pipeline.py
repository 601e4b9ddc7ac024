"""End-to-end odometry pipeline over an image sequence on disk.

Orchestrates the full loop: corner tracks feed a two-view bootstrap, every
frame is tracked against the map (points, text, or both depending on the
mode), keyframes are inserted by a hybrid policy, text detections are
ingested and stepped through their candidate lifecycle, new map points are
triangulated at keyframes, stale points are culled, and a local bundle
adjustment runs after every keyframe.

Outputs: TUM trajectory, map JSON, and a per-frame tracking log CSV.  A
tracking loss ends the run gracefully with the partial trajectory written
and the loss flagged in the summary.
"""

import csv
import json
import os
import time

import numpy as np

from . import textinit
from .config import RunConfig, read_calibration
from .errors import (BootstrapFailed, IoFailure, TooFewValid, TrackingLost)
from .estimation import bootstrap, local_bundle_adjust, track_frame
from .geometry import project_text_points
from .image import build_pyramid, detect_corners, klt_track, load_pgm
from .simulator import write_tum_trajectory
from .twoview import triangulate_midpoint

BOOTSTRAP_PARALLAX_DEG = 1.0   # median track displacement to attempt init
MAX_TRACKS = 250
MIN_TRACK_SPACING = 10.0       # px between a new corner and existing tracks
TRIANGULATION_PARALLAX_PX = 2.0


def read_sequence_index(seq_dir):
    """[(frame id, timestamp, frame path)] from times.txt."""
    times_path = os.path.join(seq_dir, "times.txt")
    rows = []
    try:
        with open(times_path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                fid, ts = line.split()
                path = os.path.join(seq_dir, "frames", f"frame_{int(fid):06d}.pgm")
                rows.append((int(fid), float(ts), path))
    except OSError as e:
        raise IoFailure(str(e)) from e
    return rows


def read_detections(path):
    """{frame id: [TextDetection]} from a JSON-lines detections file."""
    by_frame = {}
    try:
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                dets = []
                for d in rec.get("detections", []):
                    dets.append(textinit.TextDetection(
                        frame_id=rec["frame_id"],
                        quad=np.asarray(d["quad"], dtype=float).reshape(4, 2),
                        confidence=float(d.get("confidence", 1.0)),
                        text_string=d.get("text", "")))
                by_frame[rec["frame_id"]] = dets
    except OSError as e:
        raise IoFailure(str(e)) from e
    return by_frame


class _TrackTable:
    """Sparse corner tracks stepped frame to frame with KLT.

    Each track carries its current pixel position, the map point it is
    associated with (if any), and the keyframe + pixel where it started
    (for triangulating new points later).
    """

    def __init__(self):
        self.pos = np.zeros((0, 2))
        self.point_id = []        # map point id or None
        self.origin_kf = []       # keyframe id where the track started
        self.origin_px = np.zeros((0, 2))

    def __len__(self):
        return len(self.pos)

    def step(self, prev_pyr, next_pyr):
        if not len(self):
            return
        tracked, ok = klt_track(prev_pyr, next_pyr, self.pos)
        self.pos = tracked
        self._keep(ok)

    def _keep(self, mask):
        self.pos = self.pos[mask]
        self.origin_px = self.origin_px[mask]
        self.point_id = [p for p, m in zip(self.point_id, mask) if m]
        self.origin_kf = [k for k, m in zip(self.origin_kf, mask) if m]

    def drop_points(self, dead_ids):
        for i, pid in enumerate(self.point_id):
            if pid in dead_ids:
                self.point_id[i] = None

    def matches(self):
        return [(pid, tuple(px)) for pid, px in zip(self.point_id, self.pos)
                if pid is not None]

    def add(self, positions, kf_id):
        positions = np.atleast_2d(positions)
        self.pos = np.concatenate([self.pos, positions])
        self.origin_px = np.concatenate([self.origin_px, positions])
        self.point_id.extend([None] * len(positions))
        self.origin_kf.extend([kf_id] * len(positions))


def _top_up_tracks(tracks, image, kf_id, max_tracks=MAX_TRACKS,
                   spacing=MIN_TRACK_SPACING):
    want = max_tracks - len(tracks)
    if want <= 0:
        return 0
    try:
        corners = detect_corners(image, max_count=4 * max_tracks)
    except TooFewValid:
        return 0
    added = []
    for c in corners:
        p = np.asarray(c.position, dtype=float)
        near_old = (len(tracks) and
                    np.min(np.linalg.norm(tracks.pos - p, axis=1)) < spacing)
        near_new = any(np.linalg.norm(q - p) < spacing for q in added)
        if not near_old and not near_new:
            added.append(p)
            if len(added) >= want:
                break
    if added:
        tracks.add(np.array(added), kf_id)
    return len(added)


def _triangulate_new_points(wm, tracks, kf_id, camera, gate_sq):
    """Promote unassociated tracks with enough parallax to map points."""
    kf = wm.keyframes[kf_id]
    n_new = 0
    for i in range(len(tracks)):
        if tracks.point_id[i] is not None:
            continue
        okf = tracks.origin_kf[i]
        if okf is None or okf == kf_id or okf not in wm.keyframes:
            continue
        origin = wm.keyframes[okf]
        px_a, px_b = tracks.origin_px[i], tracks.pos[i]
        parallax = textinit.rotation_compensated_parallax(
            px_a[None], px_b[None], origin.pose, kf.pose, camera)
        if parallax < TRIANGULATION_PARALLAX_PX:
            continue
        p = triangulate_midpoint(origin.pose, kf.pose,
                                 camera.normalize(px_a),
                                 camera.normalize(px_b))
        if not np.isfinite(p).all():
            continue
        ok = True
        for pose, px in ((origin.pose, px_a), (kf.pose, px_b)):
            q = (p - pose.t) @ pose.R
            if q[2] <= 1e-6:
                ok = False
                break
            err = camera.pixel(q[:2] / q[2]) - px
            if err @ err > gate_sq:
                ok = False
                break
        if not ok:
            continue
        pt = wm.insert_point(p, observations=[(okf, tuple(px_a)),
                                              (kf_id, tuple(px_b))])
        tracks.point_id[i] = pt.id
        n_new += 1
    return n_new


def cull_points(wm, camera, gate_sq, fail_ratio):
    """Remove points whose gate-failure rate across observations is high."""
    dead = []
    for pid, pt in wm.map_points.items():
        fails = 0
        for kid, px in pt.observations:
            pose = wm.keyframes[kid].pose
            q = (pt.position - pose.t) @ pose.R
            if q[2] <= 1e-6:
                fails += 1
                continue
            err = camera.pixel(q[:2] / q[2]) - np.asarray(px)
            if err @ err > gate_sq:
                fails += 1
        if fails > fail_ratio * len(pt.observations):
            dead.append(pid)
    for pid in dead:
        wm.remove_point(pid)
    return set(dead)


def _active_text_quads(wm, pose, camera):
    """Projected quads of active texts in the given frame (visible only)."""
    quads = []
    for obj in wm.text_objects.values():
        if obj.status != "active":
            continue
        host = wm.keyframes[obj.plane.host_id].pose
        px, valid = project_text_points(obj.patch.quad, host, pose,
                                        obj.plane.theta, camera)
        if valid.all() and textinit.quad_in_image(px, camera):
            quads.append((obj.id, px))
    return quads


class PipelineResult:
    def __init__(self):
        self.trajectory = []      # (timestamp, Pose)
        self.log_rows = []
        self.lost = False
        self.lost_reason = ""
        self.frames_tracked = 0
        self.frames_total = 0

    def summary(self, wm):
        active = sum(1 for t in wm.text_objects.values()
                     if t.status == "active")
        return {
            "frames_total": self.frames_total,
            "frames_tracked": self.frames_tracked,
            "tracking_lost": self.lost,
            "lost_reason": self.lost_reason,
            "keyframes": len(wm.keyframes),
            "map_points": len(wm.map_points),
            "texts_active": active,
            "texts_total": len(wm.text_objects),
        }


def run_sequence(seq_dir, out_dir, config=None, detections_path=None,
                 mode="text+point"):
    """Run odometry over a sequence directory; write outputs to out_dir.

    Returns (world map, PipelineResult).  mode selects the tracking cost:
    "text+point" (default), "point-only" (text pipeline disabled entirely),
    or "text-only" (point terms dropped from tracking once texts are active;
    points still maintain the map).
    """
    if mode not in ("text+point", "point-only", "text-only"):
        raise ValueError(f"unknown mode {mode!r}")
    config = config or RunConfig()
    camera = config.camera()
    tcfg = config.tracker_config()
    if config["run.calibration_file"]:
        lam, sigma_rep, _ = read_calibration(config["run.calibration_file"])
        tcfg.lambda_w, tcfg.sigma_rep = lam, sigma_rep
    if mode == "point-only":
        tcfg.lambda_w = 0.0
    levels = config["image.pyramid_levels"]
    seed = config["run.seed"]
    os.makedirs(out_dir, exist_ok=True)

    index = read_sequence_index(seq_dir)
    result = PipelineResult()
    result.frames_total = len(index)
    detections = {}
    if mode != "point-only":
        if detections_path is None:
            default = os.path.join(seq_dir, "detections.jsonl")
            detections_path = default if os.path.exists(default) else None
        if detections_path is not None:
            detections = read_detections(detections_path)

    wm = None
    tracks = _TrackTable()
    candidates = []
    pyramids = {}            # frame id -> pyramid (kept for early frames)
    history = []             # (timestamp, pose) of the last two frames
    kf_of_frame = {}         # frame id -> keyframe id
    last_kf_track_count = 0
    last_kf_positions = None
    frames_since_kf = 0

    def log(fid, ts, n_matches, report, is_kf, dt):
        cost = report.final_cost if report is not None else 0.0
        inl = (int(report.inlier_mask.sum())
               if report is not None and report.inlier_mask is not None
               else 0)
        result.log_rows.append([fid, f"{ts:.9f}", n_matches, inl,
                                f"{cost:.6e}", int(is_kf), f"{dt:.4f}"])

    # --- phase 1: accumulate tracks until the two-view bootstrap succeeds ---
    boot_frame = None
    track_snapshots = {}
    first_img = load_pgm(index[0][2])
    pyramids[index[0][0]] = build_pyramid(first_img, levels=levels)
    corners = detect_corners(first_img, max_count=MAX_TRACKS)
    tracks.add(np.array([c.position for c in corners], dtype=float), None)
    first_positions = tracks.pos.copy()
    alive0 = np.ones(len(tracks), dtype=bool)
    parallax_floor = np.tan(np.deg2rad(BOOTSTRAP_PARALLAX_DEG)) * camera.fx

    for fid, ts, path in index[1:]:
        prev_id = max(pyramids)
        pyr = build_pyramid(load_pgm(path), levels=levels)
        pyramids[fid] = pyr
        before = len(tracks)
        tracked, ok = klt_track(pyramids[prev_id], pyr, tracks.pos)
        tracks.pos = tracked
        alive_idx = np.flatnonzero(alive0)
        alive0[alive_idx[~ok]] = False
        tracks._keep(ok)
        track_snapshots[fid] = (tracks.pos.copy(), alive0.copy())
        if len(tracks) < 8:
            break
        disp = np.median(np.linalg.norm(
            tracks.pos - first_positions[alive0], axis=1))
        if disp < parallax_floor:
            continue
        try:
            wm, inliers = bootstrap(first_positions[alive0], tracks.pos,
                                    (index[0][1], ts), camera, seed=seed)
        except BootstrapFailed:
            continue
        boot_frame = fid
        break

    if wm is None:
        result.lost = True
        result.lost_reason = "bootstrap failed"
        _write_outputs(out_dir, wm, camera, result)
        return wm, result

    # associate surviving tracks with the bootstrap points
    wm.keyframes[0].pyramid = pyramids[index[0][0]]
    wm.keyframes[1].pyramid = pyramids[boot_frame]
    pids = sorted(wm.map_points)
    j = 0
    for i in range(len(tracks)):
        if inliers[i]:
            tracks.point_id[i] = pids[j]
            j += 1
        tracks.origin_kf[i] = 0
    tracks.origin_px = first_positions[alive0].copy()
    kf_of_frame[index[0][0]] = 0
    kf_of_frame[boot_frame] = 1
    last_kf_track_count = len(tracks.matches())
    last_kf_positions = {pid: np.asarray(px)
                         for pid, px in tracks.matches()}

    result.trajectory.append((index[0][1], wm.keyframes[0].pose.copy()))
    boot_ts = next(ts for fid, ts, _ in index if fid == boot_frame)
    history = [(index[0][1], wm.keyframes[0].pose.copy()),
               (boot_ts, wm.keyframes[1].pose.copy())]
    log(index[0][0], index[0][1], last_kf_track_count, None, True, 0.0)

    # ingest detections at the first keyframe
    if detections.get(index[0][0]):
        _ingest(detections[index[0][0]], first_img, camera, wm, tracks,
                candidates, 0, index[0][0], pyramids)

    # frames strictly between the two bootstrap keyframes are interpolated
    # from the snapshots (they predate the map; the bootstrap pair anchors
    # them); tracking proper resumes after the bootstrap keyframe
    boot_pos = next(i for i, (fid, _, _) in enumerate(index)
                    if fid == boot_frame)
    for fid, ts, _ in index[1:boot_pos]:
        s = (ts - index[0][1]) / (boot_ts - index[0][1])
        p0, p1 = wm.keyframes[0].pose, wm.keyframes[1].pose
        rel = p0.inverse() @ p1
        from .geometry import so3_exp, so3_log, Pose
        step = Pose.from_rt(so3_exp(so3_log(rel.R) * s), rel.t * s)
        result.trajectory.append((ts, p0 @ step))
        log(fid, ts, 0, None, False, 0.0)
        result.frames_tracked += 1
    result.trajectory.append((boot_ts, wm.keyframes[1].pose.copy()))
    log(boot_frame, boot_ts, last_kf_track_count, None, True, 0.0)
    result.frames_tracked += 2

    if detections.get(boot_frame):
        _ingest(detections[boot_frame], pyramids[boot_frame].levels[0],
                camera, wm, tracks, candidates, 1, boot_frame, pyramids)

    # release early pyramids except the keyframes'
    for fid in list(pyramids):
        if fid not in (index[0][0], boot_frame):
            del pyramids[fid]
    prev_pyr = wm.keyframes[1].pyramid
    frames_since_kf = 0

    # --- phase 2: steady-state tracking ------------------------------------
    for fid, ts, path in index[boot_pos + 1:]:
        t_start = time.perf_counter()
        pyr = build_pyramid(load_pgm(path), levels=levels)
        tracks.step(prev_pyr, pyr)
        for cand in candidates:
            textinit.step_candidate_tracks(cand, prev_pyr, pyr)
        prev_pyr = pyr
        matches = tracks.matches()
        any_text = any(t.status == "active" for t in wm.text_objects.values())
        track_matches = [] if (mode == "text-only" and any_text) else matches
        try:
            pose, report = track_frame(pyr, ts, track_matches, wm, camera,
                                       config=tcfg, history=history)
        except TrackingLost as e:
            result.lost = True
            result.lost_reason = str(e)
            break
        result.trajectory.append((ts, pose))
        result.frames_tracked += 1
        history = (history + [(ts, pose)])[-2:]

        # drop point tracks whose reprojection left the gate
        if track_matches and report.inlier_mask is not None:
            for (pid, _), good in zip(track_matches, report.inlier_mask):
                if not good:
                    idx = tracks.point_id.index(pid)
                    tracks.point_id[idx] = None

        is_kf = _keyframe_due(tracks, last_kf_track_count, last_kf_positions,
                              frames_since_kf, config)
        frames_since_kf += 1
        if is_kf:
            frames_since_kf = 0
            kf = wm.insert_keyframe(ts, pose.copy(), pyramid=pyr)
            kf_of_frame[fid] = kf.id
            for pid, px in tracks.matches():
                wm.add_point_observation(pid, kf.id, px)
            _triangulate_new_points(wm, tracks, kf.id, camera,
                                    tcfg.point_gate_sq)
            _top_up_tracks(tracks, pyr.levels[0], kf.id)
            for tid, quad in _active_text_quads(wm, pose, camera):
                wm.record_text_observation(tid, kf.id)
            if mode != "point-only":
                for cand in candidates:
                    host_kf = kf_of_frame.get(cand.host_frame)
                    if host_kf is None or cand.status != "candidate":
                        continue
                    status = textinit.observe_at_keyframe(
                        cand, kf.id, wm.keyframes[host_kf].pose, pose, pyr,
                        camera, n_min=config["text.n_min"],
                        cap=config["text.candidate_cap"])
                    if status == "promoted":
                        # late duplicate gate: a candidate may have been
                        # spawned before an overlapping text went active
                        if _overlaps_active(cand, wm, host_kf, pose, camera):
                            cand.status = "rejected"
                        else:
                            textinit.promote_to_text(cand, wm, host_kf,
                                                     camera)
                if detections.get(fid):
                    _ingest(detections[fid], pyr.levels[0], camera, wm,
                            tracks, candidates, kf.id, fid, pyramids)
            dead = cull_points(wm, camera, tcfg.point_gate_sq,
                               config["map.cull_fail_ratio"])
            tracks.drop_points(dead)
            window = wm.local_window(wm.last_keyframe_id,
                                     size=config["map.local_window"])
            local_bundle_adjust(wm, window, camera, config=tcfg)
            last_kf_track_count = max(len(tracks.matches()), 1)
            last_kf_positions = {pid: np.asarray(px)
                                 for pid, px in tracks.matches()}
        log(fid, ts, len(matches), report, is_kf,
            time.perf_counter() - t_start)

    _write_outputs(out_dir, wm, camera, result)
    return wm, result


def _keyframe_due(tracks, last_count, last_positions, frames_since_kf,
                  config):
    if frames_since_kf + 1 >= config["keyframe.max_gap"]:
        return True
    matches = tracks.matches()
    if len(matches) < config["keyframe.tracked_ratio"] * last_count:
        return True
    if last_positions:
        disp = [np.linalg.norm(np.asarray(px) - last_positions[pid])
                for pid, px in matches if pid in last_positions]
        if disp and np.median(disp) > config["keyframe.parallax_px"]:
            return True
    return False


def _overlaps_active(cand, wm, host_kf, pose, camera):
    """True when the candidate's quad, projected into the current frame,
    intersects any active text's projected quad."""
    host_pose = wm.keyframes[host_kf].pose
    px, valid = project_text_points(cand.quad, host_pose, pose,
                                    cand.theta, camera)
    if not valid.all():
        return False
    return any(textinit.quad_iou(px, q) > 0.0
               for _, q in _active_text_quads(wm, pose, camera))


def _ingest(dets, image, camera, wm, tracks, candidates, kf_id, frame_id,
            pyramids):
    """Spawn candidates from this keyframe's detections."""
    pose = wm.keyframes[kf_id].pose
    active_quads = [q for _, q in _active_text_quads(wm, pose, camera)]
    for det in dets:
        det.frame_id = frame_id
        cand, reason = textinit.spawn_candidate(
            det, np.asarray(image, dtype=float), camera,
            active_quads=active_quads, candidates=candidates)
        if cand is not None:
            cand.host_frame = frame_id
            candidates.append(cand)


def _write_outputs(out_dir, wm, camera, result):
    write_tum_trajectory(os.path.join(out_dir, "trajectory.txt"),
                         result.trajectory)
    try:
        with open(os.path.join(out_dir, "tracking_log.csv"), "w",
                  newline="") as f:
            w = csv.writer(f)
            w.writerow(["frame", "timestamp", "matches", "inliers",
                        "final_cost", "keyframe", "elapsed_s"])
            w.writerows(result.log_rows)
        doc = wm.to_dict(camera) if wm is not None else {}
        if wm is not None:
            summary = result.summary(wm)
        else:
            summary = {"tracking_lost": True,
                       "lost_reason": result.lost_reason}
        doc["run_summary"] = summary
        with open(os.path.join(out_dir, "map.json"), "w") as f:
            json.dump(doc, f, sort_keys=True, indent=1)
    except OSError as e:
        raise IoFailure(str(e)) from e
