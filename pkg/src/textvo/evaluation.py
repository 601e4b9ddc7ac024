"""Trajectory accuracy metrics and the loosely-coupled plane baseline.

Trajectories are lists of (timestamp, Pose) in TUM order; the estimate is
timestamp-matched to ground truth, aligned by a closed-form rigid or
similarity fit, and scored with relative (RPE) and absolute (APE) position
errors.  Plane accuracy is the orientation-agnostic angle between normals.
The baseline fits a plane to triangulated text points with three-point
random-sample consensus instead of using the photometric estimate.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (DegenerateConfiguration, IoFailure, TooFewMatches,
                     ZeroVector)
from .geometry import Pose

MATCH_MAX_DT = 0.01          # seconds; timestamp association gate
RANSAC_PLANE_ITERS = 200
RANSAC_PLANE_THRESHOLD = 0.01   # meters


def read_tum_trajectory(path):
    """List of (timestamp, Pose) from `t tx ty tz qx qy qz qw` lines."""
    rows = []
    try:
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                v = [float(x) for x in line.split()]
                if len(v) != 8:
                    raise IoFailure(f"{path}: expected 8 columns, got {len(v)}")
                qx, qy, qz, qw = v[4:8]
                pose = Pose(q=[qw, qx, qy, qz], t=v[1:4])
                rows.append((v[0], pose))
    except OSError as e:
        raise IoFailure(str(e)) from e
    return rows


def match_timestamps(estimate, ground_truth, max_dt=MATCH_MAX_DT):
    """Nearest-neighbor timestamp association within max_dt seconds.

    Returns (matched estimate rows, matched ground-truth rows); each
    ground-truth row is used at most once.
    """
    gt_ts = np.array([ts for ts, _ in ground_truth])
    order = np.argsort(gt_ts)
    gt_ts = gt_ts[order]
    used = set()
    est_rows, gt_rows = [], []
    for ts, pose in estimate:
        i = int(np.searchsorted(gt_ts, ts))
        best, best_dt = None, max_dt
        for j in (i - 1, i):
            if 0 <= j < len(gt_ts) and j not in used:
                dt = abs(gt_ts[j] - ts)
                if dt <= best_dt:
                    best, best_dt = j, dt
        if best is not None:
            used.add(best)
            est_rows.append((ts, pose))
            gt_rows.append(ground_truth[order[best]])
    return est_rows, gt_rows


def umeyama_alignment(src, dst, with_scale=True):
    """Closed-form least-squares (s, R, t) with dst ~ s*R@src + t."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    U, d, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var = (xs ** 2).sum() / len(src)
        s = float(np.trace(np.diag(d) @ S) / max(var, 1e-18))
    else:
        s = 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def align_trajectories(estimate, ground_truth, mode="similarity"):
    """Timestamp-match then align estimate positions onto ground truth.

    Returns (aligned estimate rows, matched ground-truth rows, transform)
    where transform is the dict {scale, rotation, translation}.  Rotations of
    the estimate poses are rotated into the ground-truth frame as well.
    """
    if mode not in ("rigid", "similarity"):
        raise ValueError(f"unknown alignment mode {mode!r}")
    est_rows, gt_rows = match_timestamps(estimate, ground_truth)
    if len(est_rows) < 3:
        raise TooFewMatches(
            f"need >= 3 timestamp-matched pose pairs, got {len(est_rows)}")
    src = np.array([p.t for _, p in est_rows])
    dst = np.array([p.t for _, p in gt_rows])
    s, R, t = umeyama_alignment(src, dst, with_scale=(mode == "similarity"))
    aligned = [(ts, Pose.from_rt(R @ p.R, s * R @ p.t + t))
               for ts, p in est_rows]
    transform = {"scale": s, "rotation": R, "translation": t}
    return aligned, gt_rows, transform


@dataclass
class TrajectoryErrorReport:
    rpe_rmse: float              # meters per step at the given frame delta
    ape_rmse: float              # meters, after alignment
    delta: int
    rpe_series: np.ndarray = field(repr=False)
    ape_series: np.ndarray = field(repr=False)
    timestamps: np.ndarray = field(repr=False)

    @property
    def rpe_tenth_m(self):
        """RPE expressed in 0.1 m units (report convention)."""
        return 10.0 * self.rpe_rmse

    def summary_line(self):
        return (f"RPE {self.rpe_tenth_m:.3f} (0.1 m), "
                f"APE {self.ape_rmse:.3f} m")

    def to_dict(self):
        return {
            "rpe_rmse_m": self.rpe_rmse,
            "rpe_tenth_m": self.rpe_tenth_m,
            "ape_rmse_m": self.ape_rmse,
            "delta_frames": self.delta,
            "n_frames": int(len(self.ape_series)),
        }


def compute_rpe_ape(aligned, ground_truth, delta=1):
    """Trajectory error report from aligned, timestamp-matched rows."""
    if len(aligned) != len(ground_truth):
        raise TooFewMatches("aligned/ground-truth length mismatch")
    p_est = np.array([p.t for _, p in aligned])
    p_gt = np.array([p.t for _, p in ground_truth])
    ts = np.array([t for t, _ in aligned])
    ape_series = np.linalg.norm(p_est - p_gt, axis=1)
    if len(p_est) > delta:
        d_est = p_est[delta:] - p_est[:-delta]
        d_gt = p_gt[delta:] - p_gt[:-delta]
        rpe_series = np.linalg.norm(d_est - d_gt, axis=1)
    else:
        rpe_series = np.zeros(0)
    rpe = float(np.sqrt((rpe_series ** 2).mean())) if len(rpe_series) else 0.0
    ape = float(np.sqrt((ape_series ** 2).mean()))
    return TrajectoryErrorReport(rpe_rmse=rpe, ape_rmse=ape, delta=delta,
                                 rpe_series=rpe_series, ape_series=ape_series,
                                 timestamps=ts)


def angular_error(n_est, n_gt):
    """Orientation-agnostic angle between two plane normals, degrees."""
    n_est = np.asarray(n_est, dtype=float)
    n_gt = np.asarray(n_gt, dtype=float)
    na, nb = np.linalg.norm(n_est), np.linalg.norm(n_gt)
    if na < 1e-15 or nb < 1e-15:
        raise ZeroVector("plane normal has zero length")
    c = abs(float(n_est @ n_gt)) / (na * nb)
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


@dataclass
class PlaneErrorReport:
    errors_deg: dict             # text id -> angular error
    histogram: np.ndarray        # counts in 5-degree bins over [0, 90]
    bin_edges: np.ndarray

    @property
    def median_deg(self):
        return float(np.median(list(self.errors_deg.values())))

    def to_dict(self):
        return {
            "per_text_deg": {str(k): v for k, v in self.errors_deg.items()},
            "median_deg": self.median_deg,
            "histogram": self.histogram.tolist(),
            "bin_edges_deg": self.bin_edges.tolist(),
        }


def plane_error_report(errors_deg):
    """PlaneErrorReport from a {text id: angular error} mapping."""
    vals = np.array(list(errors_deg.values()), dtype=float)
    if len(vals) == 0:
        raise TooFewMatches("no plane errors to report")
    if (vals < 0).any() or (vals > 90).any():
        raise ValueError("angular errors outside [0, 90] degrees")
    edges = np.arange(0.0, 95.0, 5.0)
    hist, _ = np.histogram(vals, bins=edges)
    return PlaneErrorReport(errors_deg=dict(errors_deg), histogram=hist,
                            bin_edges=edges)


def fit_plane_least_squares(points):
    """(unit normal, d) with n^T p + d = 0 minimizing orthogonal distance."""
    points = np.asarray(points, dtype=float)
    c = points.mean(axis=0)
    _, s, Vt = np.linalg.svd(points - c)
    if len(points) < 3 or (len(s) > 1 and s[1] < 1e-12 * max(s[0], 1.0)):
        raise DegenerateConfiguration("points do not span a plane")
    n = Vt[-1]
    return n, -float(n @ c)


def ransac_plane_baseline(points, iterations=RANSAC_PLANE_ITERS,
                          inlier_threshold=RANSAC_PLANE_THRESHOLD, seed=0):
    """Robust plane fit to 3D points: best three-point hypothesis by inlier
    count, refined by least squares over its inliers.

    Returns (unit normal, d, inlier mask) with n^T p + d = 0.
    """
    points = np.asarray(points, dtype=float)
    if len(points) < 3:
        raise DegenerateConfiguration(
            f"need >= 3 points, got {len(points)}")
    rng = np.random.default_rng(seed)
    best_mask, best_count = None, -1
    for _ in range(iterations):
        idx = rng.choice(len(points), size=3, replace=False)
        a, b, c = points[idx]
        n = np.cross(b - a, c - a)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue   # collinear sample
        n = n / norm
        dist = np.abs((points - a) @ n)
        mask = dist < inlier_threshold
        if mask.sum() > best_count:
            best_count, best_mask = int(mask.sum()), mask
    if best_mask is None:
        raise DegenerateConfiguration("all sampled triples were collinear")
    n, d = fit_plane_least_squares(points[best_mask])
    dist = np.abs(points @ n + d)
    mask = dist < inlier_threshold
    return n, d, mask


# ---------------------------------------------------------------------------
# report files

def write_trajectory_csv(path, report):
    """Per-frame error series with a header row."""
    try:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["timestamp", "ape_m", "rpe_m"])
            for i, ts in enumerate(report.timestamps):
                rpe = (f"{report.rpe_series[i]:.9f}"
                       if i < len(report.rpe_series) else "")
                w.writerow([f"{ts:.9f}", f"{report.ape_series[i]:.9f}", rpe])
    except OSError as e:
        raise IoFailure(str(e)) from e


def write_plane_csv(path, report):
    try:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["text_id", "angular_error_deg"])
            for tid in sorted(report.errors_deg):
                w.writerow([tid, f"{report.errors_deg[tid]:.6f}"])
    except OSError as e:
        raise IoFailure(str(e)) from e


def write_summary_json(path, trajectory_report=None, plane_report=None,
                       extra=None):
    doc = {}
    if trajectory_report is not None:
        doc["trajectory"] = trajectory_report.to_dict()
    if plane_report is not None:
        doc["planes"] = plane_report.to_dict()
    if extra:
        doc.update(extra)
    try:
        with open(path, "w") as f:
            json.dump(doc, f, sort_keys=True, indent=1)
    except OSError as e:
        raise IoFailure(str(e)) from e
    return doc


def read_summary_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as e:
        raise IoFailure(str(e)) from e
