"""Synthetic planar-text scene generator and renderer.

Scenes consist of planar parallelogram patches (texts plus untextured-ish
walls) with procedural band-limited textures.  Frames are rendered by
per-pixel ray/plane intersection, which makes the renderer an exact
geometric oracle for the homography formulas.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import IoFailure
from .geometry import PinholeCamera, Pose, TextPlane, quat_from_matrix
from .image import save_pgm


@dataclass
class ScenePatch:
    """Planar parallelogram patch: corners are origin, +e1, +e1+e2, +e2."""
    origin: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    texture_seed: int = 0
    text: str = ""
    is_text: bool = True
    contrast: float = 1.0
    base: float = 150.0
    feather: float = 0.012  # glyph edge softness, fraction of chart width

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.e1 = np.asarray(self.e1, dtype=float)
        self.e2 = np.asarray(self.e2, dtype=float)
        self._params = None

    @property
    def corners(self):
        o, a, b = self.origin, self.e1, self.e2
        return np.array([o, o + a, o + a + b, o + b])

    @property
    def normal(self):
        n = np.cross(self.e1, self.e2)
        return n / np.linalg.norm(n)

    @property
    def plane(self):
        """(n, d) with n^T p + d = 0 in world coordinates."""
        n = self.normal
        return n, -float(n @ self.origin)

    def theta_in_frame(self, pose):
        """Ground-truth theta of this patch in the given camera frame."""
        n_w, d_w = self.plane
        n_c = pose.R.T @ n_w
        d_c = float(n_w @ pose.t + d_w)
        return TextPlane.theta_from_plane(n_c, d_c)

    def _texture_params(self):
        if self._params is None:
            rng = np.random.default_rng(self.texture_seed)
            waves = []
            for _ in range(6):
                freq = rng.uniform(0.8, 4.0, size=2) * rng.choice([-1.0, 1.0], size=2)
                amp = rng.uniform(6.0, 14.0)
                phase = rng.uniform(0.0, 2 * np.pi)
                waves.append((freq[0], freq[1], amp, phase))
            rects = []
            for _ in range(20):
                s0, t0 = rng.uniform(0.05, 0.8, size=2)
                w, h = rng.uniform(0.04, 0.18, size=2)
                depth = rng.uniform(50.0, 110.0)
                rects.append((s0, t0, min(s0 + w, 0.95), min(t0 + h, 0.95), depth))
            self._params = (waves, rects)
        return self._params

    def texture(self, s, t, feather=None):
        """Procedural intensity at chart coordinates (s, t) in [0, 1]^2.

        Sum of random-phase sinusoids plus soft-edged dark rectangles
        (glyph surrogates); edges feathered to keep the image band-limited.
        """
        if feather is None:
            feather = self.feather
        waves, rects = self._texture_params()
        val = np.full(np.broadcast(s, t).shape, self.base, dtype=float)
        for fx, fy, amp, ph in waves:
            val += self.contrast * amp * np.sin(2 * np.pi * (fx * s + fy * t) + ph)

        def soft_step(x):  # 0 -> 1 over [0, feather]
            u = np.clip(x / feather, 0.0, 1.0)
            return u * u * (3 - 2 * u)

        for s0, t0, s1, t1, depth in rects:
            inside = (soft_step(s - s0) * soft_step(s1 - s)
                      * soft_step(t - t0) * soft_step(t1 - t))
            val -= self.contrast * depth * inside
        return np.clip(val, 0.0, 255.0)


@dataclass
class PerturbationSpec:
    gain: float = 1.0
    bias: float = 0.0
    blur_sigma: float = 0.0
    noise_std: float = 0.0
    gain_flicker: float = 0.0   # per-frame multiplicative flicker amplitude
    bias_flicker: float = 0.0   # per-frame additive flicker amplitude

    def __post_init__(self):
        if not (0.2 <= self.gain <= 5.0):
            raise ValueError("gain outside [0.2, 5]")

    def frame_gain_bias(self, seed, frame):
        if self.gain_flicker == 0.0 and self.bias_flicker == 0.0:
            return self.gain, self.bias
        rng = np.random.default_rng((seed, 2000, frame))
        a = self.gain * (1.0 + self.gain_flicker * rng.uniform(-1.0, 1.0))
        b = self.bias + self.bias_flicker * rng.uniform(-1.0, 1.0)
        return a, b


@dataclass
class TrajectorySpec:
    kind: str = "arc"          # arc | orbit | random-walk | rotation-only
    frames: int = 100
    target: tuple = (0.0, 0.0, 0.0)
    start: tuple = (0.0, 0.0, -3.5)
    span: float = 2.0          # lateral extent (arc / random-walk), meters
    bob: float = 0.15          # vertical wobble amplitude, meters
    advance: float = 0.4       # forward motion over the run, meters
    radius: float = 3.5        # orbit radius, meters
    sweep_deg: float = 40.0    # orbit angular span, degrees
    pan_deg: float = 20.0      # rotation-only pan amplitude, degrees


def look_at(position, target, up_hint=(0.0, 1.0, 0.0)):
    """Camera pose (camera-to-world) with +z toward target, +y near up_hint."""
    position = np.asarray(position, dtype=float)
    z = np.asarray(target, dtype=float) - position
    z = z / np.linalg.norm(z)
    x = np.cross(np.asarray(up_hint, dtype=float), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=1)
    return Pose(quat_from_matrix(R), position)


def trajectory_poses(spec, seed=0):
    """Camera poses (camera-to-world) along the requested trajectory."""
    n = spec.frames
    target = np.asarray(spec.target, dtype=float)
    start = np.asarray(spec.start, dtype=float)
    poses = []
    if spec.kind == "arc":
        for i in range(n):
            u = i / max(n - 1, 1)
            p = start + np.array([
                spec.span * (u - 0.5),
                spec.bob * np.sin(2 * np.pi * u),
                spec.advance * np.sin(np.pi * u),
            ])
            poses.append(look_at(p, target))
    elif spec.kind == "orbit":
        half = np.deg2rad(spec.sweep_deg) / 2.0
        for i in range(n):
            u = i / max(n - 1, 1)
            phi = -half + 2 * half * u
            p = target + np.array([
                spec.radius * np.sin(phi),
                spec.bob * np.sin(2 * np.pi * u),
                -spec.radius * np.cos(phi),
            ])
            poses.append(look_at(p, target))
    elif spec.kind == "random-walk":
        rng = np.random.default_rng((seed, 77))
        steps = rng.normal(size=(n, 3)) * np.array([1.0, 0.4, 0.5])
        walk = np.cumsum(steps, axis=0)
        sm = np.stack([gaussian_filter(walk[:, k], sigma=max(n / 12, 2.0),
                                       mode="nearest") for k in range(3)], axis=1)
        sm -= sm[0]
        peak = np.abs(sm[:, 0]).max() or 1.0
        sm *= spec.span / (2 * peak)
        for i in range(n):
            poses.append(look_at(start + sm[i], target))
    elif spec.kind == "rotation-only":
        amp = np.deg2rad(spec.pan_deg)
        base = look_at(start, target)
        for i in range(n):
            u = i / max(n - 1, 1)
            pan = amp * np.sin(2 * np.pi * u)
            Rp = np.array([
                [np.cos(pan), 0.0, np.sin(pan)],
                [0.0, 1.0, 0.0],
                [-np.sin(pan), 0.0, np.cos(pan)],
            ])
            poses.append(Pose(quat_from_matrix(base.R @ Rp), start))
    else:
        raise ValueError(f"unknown trajectory kind {spec.kind!r}")
    return poses


@dataclass
class Scene:
    camera: PinholeCamera
    patches: list
    trajectory: TrajectorySpec
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)
    seed: int = 0
    fps: float = 30.0
    background: float = 90.0

    def text_patches(self):
        return [p for p in self.patches if p.is_text]


def render_frame(scene, pose, frame_idx=0, perturb=True, supersample=2):
    """Render one grayscale frame (float array, [0, 255]).

    Deterministic given (scene, pose, frame_idx).  Rays are cast on a
    supersampled grid and box-averaged (anti-aliasing); patches are drawn
    back-to-front by center depth; gain/bias is the final pixel-wise step,
    blur is applied before noise.
    """
    img = _raycast(scene, pose, scene.camera, supersample)
    if not perturb:
        return img
    pert = scene.perturbation
    if pert.blur_sigma > 0:
        img = gaussian_filter(img, pert.blur_sigma, mode="nearest")
    if pert.noise_std > 0:
        rng = np.random.default_rng((scene.seed, 1000, frame_idx))
        img = img + rng.normal(scale=pert.noise_std, size=img.shape)
    a, b = pert.frame_gain_bias(scene.seed, frame_idx)
    return np.clip(a * img + b, 0.0, 255.0)


def _raycast(scene, pose, cam, supersample=1):
    if supersample > 1:
        s = supersample
        fine = PinholeCamera(fx=cam.fx * s, fy=cam.fy * s,
                             cx=(cam.cx + 0.5) * s - 0.5,
                             cy=(cam.cy + 0.5) * s - 0.5,
                             width=cam.width * s, height=cam.height * s)
        img = _raycast(scene, pose, fine, 1)
        h, w = img.shape
        return img.reshape(h // s, s, w // s, s).mean(axis=(1, 3))
    h, w = cam.height, cam.width
    img = np.full((h, w), scene.background, dtype=float)
    R, C = pose.R, pose.t

    def center_depth(patch):
        c = patch.origin + 0.5 * patch.e1 + 0.5 * patch.e2
        return (pose.inverse().transform(c))[2]

    order = sorted(range(len(scene.patches)),
                   key=lambda i: -center_depth(scene.patches[i]))
    ys_full, xs_full = np.mgrid[0:h, 0:w]
    for idx in order:
        patch = scene.patches[idx]
        x0, x1, y0, y1 = _patch_bbox(patch, pose, cam)
        if x1 < x0 or y1 < y0:
            continue
        xs = xs_full[y0:y1 + 1, x0:x1 + 1]
        ys = ys_full[y0:y1 + 1, x0:x1 + 1]
        # world ray directions through the pixel centers
        mx = (xs - cam.cx) / cam.fx
        my = (ys - cam.cy) / cam.fy
        D = (np.stack([mx, my, np.ones_like(mx)], axis=-1) @ R.T)
        n, d = patch.plane
        denom = D @ n
        lam = -(n @ C + d) / np.where(np.abs(denom) < 1e-12, np.nan, denom)
        X = C + lam[..., None] * D
        M = np.linalg.inv(np.stack([patch.e1, patch.e2, n], axis=1))
        st = (X - patch.origin) @ M.T
        s, t = st[..., 0], st[..., 1]
        mask = np.isfinite(lam) & (lam > 0.05) & (s >= 0) & (s <= 1) & (t >= 0) & (t <= 1)
        if not mask.any():
            continue
        vals = patch.texture(s[mask], t[mask])
        img[ys[mask], xs[mask]] = vals
    return img


def _patch_bbox(patch, pose, cam, pad=2):
    """Conservative pixel bbox of the projected patch; full frame if a corner is behind."""
    pc = pose.inverse().transform(patch.corners)
    if np.any(pc[:, 2] < 0.05):
        return 0, cam.width - 1, 0, cam.height - 1
    px = cam.project(pc)
    x0 = max(int(np.floor(px[:, 0].min())) - pad, 0)
    x1 = min(int(np.ceil(px[:, 0].max())) + pad, cam.width - 1)
    y0 = max(int(np.floor(px[:, 1].min())) - pad, 0)
    y1 = min(int(np.ceil(px[:, 1].max())) + pad, cam.height - 1)
    return x0, x1, y0, y1


def project_patch_quad(patch, pose, camera):
    """Projected pixel quad of a patch plus the visible-area fraction.

    The fraction is estimated on a 15x15 chart grid (in front of the camera
    and inside the image bounds).
    """
    pc = pose.inverse().transform(patch.corners)
    with np.errstate(divide="ignore", invalid="ignore"):
        quad = camera.project(pc)
    g = np.linspace(0.0, 1.0, 15)
    ss, tt = np.meshgrid(g, g)
    pts = (patch.origin + ss.ravel()[:, None] * patch.e1
           + tt.ravel()[:, None] * patch.e2)
    pcs = pose.inverse().transform(pts)
    front = pcs[:, 2] > 0.05
    frac = 0.0
    if front.any():
        px = camera.project(pcs[front])
        inside = camera.in_bounds(px, margin=0.0)
        frac = inside.sum() / len(pts)
    return quad, float(frac)


def patch_visibility(scene, index, pose, grid=15):
    """Fraction of a patch's chart grid that is actually visible from a pose.

    Unlike project_patch_quad this also tests occlusion by the other
    patches of the scene (ray-parallelogram intersection along each view
    ray, Moller-Trumbore style).
    """
    patch = scene.patches[index]
    cam = scene.camera
    g = np.linspace(0.0, 1.0, grid)
    ss, tt = np.meshgrid(g, g)
    pts = (np.asarray(patch.origin) + ss.ravel()[:, None] * np.asarray(patch.e1)
           + tt.ravel()[:, None] * np.asarray(patch.e2))
    pcs = pose.inverse().transform(pts)
    visible = pcs[:, 2] > 0.05
    if visible.any():
        with np.errstate(divide="ignore", invalid="ignore"):
            px = cam.project(pcs[visible])
        ok = cam.in_bounds(px, margin=0.0) & np.isfinite(px).all(axis=1)
        visible[np.flatnonzero(visible)[~ok]] = False
    c = pose.t
    d = pts - c                      # P sits at ray parameter 1
    for j, other in enumerate(scene.patches):
        if j == index or not visible.any():
            continue
        o = np.asarray(other.origin)
        e1 = np.asarray(other.e1)
        e2 = np.asarray(other.e2)
        h = np.cross(d, e2)
        a = h @ e1
        with np.errstate(divide="ignore", invalid="ignore"):
            u = ((c - o) @ h.T) / a
            q = np.cross(c - o, e1)
            v = (d @ q) / a
            t = (e2 @ q) / a
        hit = (np.abs(a) > 1e-12) & (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
        hit &= (t > 1e-6) & (t < 1.0 - 1e-6)
        visible &= ~hit
    return float(visible.sum() / len(pts))


# ---------------------------------------------------------------------------
# scene spec (JSON) and sequence emission
# ---------------------------------------------------------------------------

def scene_from_dict(spec):
    cam = PinholeCamera(**spec["camera"])
    patches = [ScenePatch(
        origin=np.array(p["origin"], dtype=float),
        e1=np.array(p["e1"], dtype=float),
        e2=np.array(p["e2"], dtype=float),
        texture_seed=int(p.get("texture_seed", i)),
        text=p.get("text", ""),
        is_text=bool(p.get("is_text", True)),
        contrast=float(p.get("contrast", 1.0)),
        base=float(p.get("base", 150.0)),
        feather=float(p.get("feather", 0.012)),
    ) for i, p in enumerate(spec["patches"])]
    traj = TrajectorySpec(**spec.get("trajectory", {}))
    pert = PerturbationSpec(**spec.get("perturbation", {}))
    return Scene(camera=cam, patches=patches, trajectory=traj,
                 perturbation=pert, seed=int(spec.get("seed", 0)),
                 fps=float(spec.get("fps", 30.0)),
                 background=float(spec.get("background", 90.0)))


def load_scene(path):
    try:
        with open(path) as f:
            return scene_from_dict(json.load(f))
    except OSError as e:
        raise IoFailure(str(e)) from e


def _fmt(x):
    return f"{x:.9f}"


def write_tum_trajectory(path, rows):
    """rows: iterable of (timestamp, Pose)."""
    try:
        with open(path, "w") as f:
            for ts, pose in rows:
                qw, qx, qy, qz = pose.q
                t = pose.t
                f.write(" ".join([_fmt(ts), _fmt(t[0]), _fmt(t[1]), _fmt(t[2]),
                                  _fmt(qx), _fmt(qy), _fmt(qz), _fmt(qw)]) + "\n")
    except OSError as e:
        raise IoFailure(str(e)) from e


def simulate(scene, out_dir, min_visible=0.6):
    """Render the whole sequence and emit ground-truth files.

    Writes frames/frame_%06d.pgm, times.txt, groundtruth.txt (TUM),
    detections.jsonl, and planes_gt.json.  Returns per-kind counts.
    """
    import os
    frames_dir = os.path.join(out_dir, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    poses = trajectory_poses(scene.trajectory, seed=scene.seed)
    n = len(poses)
    texts = [(i, p) for i, p in enumerate(scene.patches) if p.is_text]

    detection_count = 0
    planes = {
        "patches": [
            {
                "id": pi,
                "text": patch.text,
                "world_corners": patch.corners.tolist(),
                "world_normal": patch.normal.tolist(),
                "theta_per_frame": {},
            }
            for pi, patch in texts
        ]
    }
    by_id = {entry["id"]: entry for entry in planes["patches"]}

    try:
        with open(os.path.join(out_dir, "times.txt"), "w") as tf, \
                open(os.path.join(out_dir, "detections.jsonl"), "w") as df:
            for k, pose in enumerate(poses):
                ts = k / scene.fps
                img = render_frame(scene, pose, frame_idx=k)
                save_pgm(os.path.join(frames_dir, f"frame_{k:06d}.pgm"), img)
                tf.write(f"{k} {_fmt(ts)}\n")
                dets = []
                for pi, patch in texts:
                    quad, frac = project_patch_quad(patch, pose, scene.camera)
                    if frac < min_visible or not np.isfinite(quad).all():
                        continue
                    dets.append({
                        "quad": [round(float(v), 4) for v in quad.ravel()],
                        "confidence": round(frac, 4),
                        "text": patch.text,
                    })
                    theta = patch.theta_in_frame(pose)
                    by_id[pi]["theta_per_frame"][str(k)] = [float(v) for v in theta]
                    detection_count += 1
                df.write(json.dumps({"frame_id": k, "detections": dets},
                                    sort_keys=True) + "\n")
        write_tum_trajectory(os.path.join(out_dir, "groundtruth.txt"),
                             [(k / scene.fps, p) for k, p in enumerate(poses)])
        with open(os.path.join(out_dir, "planes_gt.json"), "w") as pf:
            json.dump(planes, pf, sort_keys=True, indent=1)
    except OSError as e:
        raise IoFailure(str(e)) from e
    return {"frames": n, "detections": detection_count, "texts": len(texts)}


def build_demo_scene_spec(n_text=8, frames=200, seed=7, kind="arc",
                          blur_sigma=0.0, noise_std=0.0, gain=1.0, bias=0.0,
                          gain_flicker=0.0, bias_flicker=0.0,
                          wall_contrast=1.0, sign_scale=1.0, tilt_scale=1.0,
                          start_z=-3.4, feather=0.05):
    """Scene-spec dict: a shallow two-panel wall with tilted text patches.

    The two wall panels meet at a slight angle and texts carry varying
    tilts and depth offsets, so the scene is not a single plane (keeps
    two-view bootstrap well-conditioned).
    """
    rng = np.random.default_rng(seed)
    patches = []
    # two wall panels forming a shallow corner at x = 0
    ang = np.deg2rad(14.0)
    for sgn, tex_seed in ((-1, 101), (1, 102)):
        dx = 4.6 * np.cos(ang)
        dz = 4.6 * np.sin(ang)
        origin = np.array([0.0, -3.0, 0.25]) if sgn > 0 else \
            np.array([-dx * 1.0, -3.0, 0.25 + dz])
        e1 = np.array([dx, 0.0, -dz]) if sgn < 0 else np.array([dx, 0.0, dz])
        patches.append({
            "origin": origin.tolist(), "e1": e1.tolist(),
            "e2": [0.0, 6.0, 0.0], "texture_seed": tex_seed,
            "is_text": False, "contrast": wall_contrast, "base": 120.0,
        })
    # text patches spread over the walls, tilted and slightly proud of them
    n_cols = int(np.ceil(np.sqrt(n_text)))
    n_rows = (n_text + n_cols - 1) // n_cols
    k = 0
    for row in range(n_rows):
        for col in range(n_cols):
            if k >= n_text:
                break
            x = -1.6 + 3.2 * (col + 0.5) / n_cols + rng.uniform(-0.12, 0.12)
            y = -1.1 + 2.2 * (row + 0.5) / n_rows + rng.uniform(-0.08, 0.08)
            z = rng.uniform(-0.25, 0.05)
            width = sign_scale * rng.uniform(0.55, 0.75)
            height = width * rng.uniform(0.45, 0.6)
            tilt_y = np.deg2rad(tilt_scale * rng.uniform(-30.0, 30.0))
            tilt_x = np.deg2rad(tilt_scale * rng.uniform(-12.0, 12.0))
            e1 = width * np.array([np.cos(tilt_y), 0.0, np.sin(tilt_y)])
            e2 = height * np.array([0.0, np.cos(tilt_x), np.sin(tilt_x)])
            patches.append({
                "origin": [x - width / 2, y - height / 2, z],
                "e1": e1.tolist(), "e2": e2.tolist(),
                "texture_seed": 300 + k,
                "text": f"SIGN_{k:02d}", "is_text": True,
                "contrast": 1.0, "base": 170.0,
                # soft glyph edges keep plane normals observable at the
                # farthest viewing distance (sharper edges alias under
                # bilinear sampling and bias the photometric optimum)
                "feather": feather,
            })
            k += 1
    return {
        "seed": seed,
        "fps": 30.0,
        "camera": {"fx": 460.0, "fy": 460.0, "cx": 319.5, "cy": 239.5,
                   "width": 640, "height": 480},
        "patches": patches,
        "trajectory": {"kind": kind, "frames": frames,
                       "target": [0.0, 0.0, 0.3], "start": [0.0, 0.0, start_z],
                       "span": 2.2, "bob": 0.12, "advance": 0.5},
        "perturbation": {"gain": gain, "bias": bias, "blur_sigma": blur_sigma,
                         "noise_std": noise_std, "gain_flicker": gain_flicker,
                         "bias_flicker": bias_flicker},
    }
