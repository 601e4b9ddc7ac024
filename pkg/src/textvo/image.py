"""Grayscale image handling: pyramids, bilinear sampling, FAST corners, KLT.

Images are plain float64 numpy arrays of shape (height, width) with
intensities in [0, 255].  Pixel coordinates are (x, y) with x along the
width axis; the sample at integer (x, y) is ``img[y, x]``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import IoFailure, OutOfBounds, TooSmall


def load_pgm(path):
    """Read a binary (P5) or ascii (P2) PGM file as a float64 image."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise IoFailure(str(e)) from e
    tokens = []
    i = 0
    while len(tokens) < 4 and i < len(data):
        # skip whitespace and comments
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if i < len(data) and data[i:i + 1] == b"#":
            while i < len(data) and data[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        tokens.append(data[i:j])
        i = j
    if len(tokens) < 4 or tokens[0] not in (b"P5", b"P2"):
        raise IoFailure(f"{path}: not a PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if tokens[0] == b"P5":
        raster = data[i + 1: i + 1 + w * h]
        if len(raster) != w * h:
            raise IoFailure(f"{path}: truncated raster")
        img = np.frombuffer(raster, dtype=np.uint8).reshape(h, w)
    else:
        vals = np.array(data[i:].split(), dtype=np.uint16)[: w * h]
        img = vals.reshape(h, w)
    if maxval != 255:
        img = img.astype(float) * (255.0 / maxval)
    return img.astype(float)


def save_pgm(path, img):
    """Write a float image (clipped/rounded to [0,255]) as binary P5 PGM."""
    arr = np.clip(np.round(np.asarray(img)), 0, 255).astype(np.uint8)
    h, w = arr.shape
    try:
        with open(path, "wb") as f:
            f.write(f"P5\n{w} {h}\n255\n".encode())
            f.write(arr.tobytes())
    except OSError as e:
        raise IoFailure(str(e)) from e


def sample_bilinear(img, pts):
    """Bilinear interpolation at subpixel points.

    pts: (..., 2) array of (x, y); all points must lie in
    [0, w-1] x [0, h-1].  Exact at integer coordinates.
    """
    pts = np.asarray(pts, dtype=float)
    h, w = img.shape
    x, y = pts[..., 0], pts[..., 1]
    if np.any((x < 0) | (x > w - 1) | (y < 0) | (y > h - 1)):
        raise OutOfBounds("sample position outside image")
    return _sample_unchecked(img, x, y)


def _sample_unchecked(img, x, y):
    h, w = img.shape
    x0 = np.clip(np.floor(x).astype(int), 0, w - 2)
    y0 = np.clip(np.floor(y).astype(int), 0, h - 2)
    fx = x - x0
    fy = y - y0
    i00 = img[y0, x0]
    i01 = img[y0, x0 + 1]
    i10 = img[y0 + 1, x0]
    i11 = img[y0 + 1, x0 + 1]
    return (i00 * (1 - fx) * (1 - fy) + i01 * fx * (1 - fy)
            + i10 * (1 - fx) * fy + i11 * fx * fy)


def sample_bilinear_with_gradient(img, pts):
    """Sample values and the analytic gradient of the bilinear surface.

    Returns (values, grads) with grads shaped (..., 2) as (d/dx, d/dy).
    Points outside the valid domain are clamped; callers mask them.
    """
    pts = np.asarray(pts, dtype=float)
    h, w = img.shape
    x = np.clip(pts[..., 0], 0.0, w - 1.0)
    y = np.clip(pts[..., 1], 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(int), 0, w - 2)
    y0 = np.clip(np.floor(y).astype(int), 0, h - 2)
    fx = x - x0
    fy = y - y0
    i00 = img[y0, x0]
    i01 = img[y0, x0 + 1]
    i10 = img[y0 + 1, x0]
    i11 = img[y0 + 1, x0 + 1]
    val = (i00 * (1 - fx) * (1 - fy) + i01 * fx * (1 - fy)
           + i10 * (1 - fx) * fy + i11 * fx * fy)
    gx = (i01 - i00) * (1 - fy) + (i11 - i10) * fy
    gy = (i10 - i00) * (1 - fx) + (i11 - i01) * fx
    return val, np.stack([gx, gy], axis=-1)


@dataclass
class Pyramid:
    """Image pyramid; level 0 is full resolution, each level a 2x2 box downsample."""
    levels: list

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]


def build_pyramid(img, levels):
    if levels < 1:
        raise TooSmall("need at least one level")
    h, w = img.shape
    if min(h, w) < 2 ** (levels - 1):
        raise TooSmall(f"{w}x{h} image too small for {levels} levels")
    out = [np.asarray(img, dtype=float)]
    for _ in range(levels - 1):
        prev = out[-1]
        ph, pw = prev.shape
        ph2, pw2 = ph // 2, pw // 2
        c = prev[: ph2 * 2, : pw2 * 2]
        down = (c[0::2, 0::2] + c[0::2, 1::2] + c[1::2, 0::2] + c[1::2, 1::2]) / 4.0
        out.append(down)
    return Pyramid(out)


@dataclass
class Corner:
    position: np.ndarray  # (x, y) pixels
    score: float


# FAST Bresenham circle of radius 3, clockwise from 12 o'clock, as (dx, dy)
_FAST_CIRCLE = np.array([
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
])

_FAST_ARC = 9
_BORDER = 3


def _points_in_polygon(pts, poly):
    """Vectorized point-in-convex-polygon test (CCW or CW polygons)."""
    pts = np.asarray(pts, dtype=float)
    poly = np.asarray(poly, dtype=float)
    n = len(poly)
    sides = []
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        cross = (b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0])
        sides.append(cross)
    sides = np.stack(sides, axis=1)
    return np.all(sides >= 0, axis=1) | np.all(sides <= 0, axis=1)


def detect_corners(img, region=None, max_count=500, threshold=20.0):
    """FAST-9 segment-test corners with 3x3 non-maximum suppression.

    region: optional convex polygon ((K,2) pixel corners) restricting output.
    Returns corners sorted by descending score (ties broken by position),
    truncated to max_count.
    """
    img = np.asarray(img, dtype=float)
    h, w = img.shape
    if h <= 2 * _BORDER or w <= 2 * _BORDER:
        return []
    center = img[_BORDER:h - _BORDER, _BORDER:w - _BORDER]
    diffs = np.empty((16,) + center.shape)
    for k, (dx, dy) in enumerate(_FAST_CIRCLE):
        diffs[k] = img[_BORDER + dy:h - _BORDER + dy, _BORDER + dx:w - _BORDER + dx] - center

    bright = diffs > threshold
    dark = diffs < -threshold
    is_bright = np.zeros(center.shape, dtype=bool)
    is_dark = np.zeros(center.shape, dtype=bool)
    for k in range(16):
        arc_b = bright[k].copy()
        arc_d = dark[k].copy()
        for j in range(1, _FAST_ARC):
            idx = (k + j) % 16
            arc_b &= bright[idx]
            arc_d &= dark[idx]
        is_bright |= arc_b
        is_dark |= arc_d

    score = np.zeros(center.shape)
    excess_b = np.maximum(diffs - threshold, 0.0).sum(axis=0)
    excess_d = np.maximum(-diffs - threshold, 0.0).sum(axis=0)
    score[is_bright] = excess_b[is_bright]
    score[is_dark] = np.maximum(score[is_dark], excess_d[is_dark])

    if not np.any(score > 0):
        return []
    from scipy.ndimage import maximum_filter
    local_max = maximum_filter(score, size=3, mode="constant")
    keep = (score > 0) & (score >= local_max)
    ys, xs = np.nonzero(keep)
    xs = xs + _BORDER
    ys = ys + _BORDER
    scores = score[keep]

    if region is not None and len(xs) > 0:
        mask = _points_in_polygon(np.stack([xs, ys], axis=1), region)
        xs, ys, scores = xs[mask], ys[mask], scores[mask]

    order = np.lexsort((xs, ys, -scores))[:max_count]
    return [Corner(position=np.array([float(xs[i]), float(ys[i])]), score=float(scores[i]))
            for i in order]


def klt_track(prev, next_pyr, points, window=11, max_iters=30, eps=0.01,
              fb_gate=0.5, min_eig=1e-4, resid_gate=20.0):
    """Pyramidal Lucas-Kanade tracking with a forward-backward check.

    prev, next_pyr: Pyramids with matching level counts.
    points: (N, 2) pixel positions in prev level 0.
    Returns (tracked (N, 2), converged (N,) bool).  The backward pass is
    seeded with the forward displacement, so the check guards against
    instability rather than re-solving from scratch.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    fwd, ok = _klt_pyramidal(prev, next_pyr, points, window, max_iters, eps, min_eig)
    if resid_gate is not None and np.any(ok):
        resid = _window_residual(prev[0], next_pyr[0], points, fwd, window)
        ok = ok & (resid <= resid_gate)
    if fb_gate is not None and np.any(ok):
        back, ok_b = _klt_pyramidal(next_pyr, prev, fwd, window, max_iters, eps,
                                    min_eig, init=points)
        dist = np.linalg.norm(back - points, axis=1)
        ok = ok & ok_b & (dist <= fb_gate)
    return fwd, ok


def _window_residual(img_a, img_b, pts_a, pts_b, window):
    """Mean absolute intensity difference between the two track windows."""
    half = window // 2
    offs = np.stack(np.meshgrid(np.arange(-half, half + 1),
                                np.arange(-half, half + 1)), axis=-1).reshape(-1, 2).astype(float)
    wa = pts_a[:, None, :] + offs[None, :, :]
    wb = pts_b[:, None, :] + offs[None, :, :]
    va, _ = sample_bilinear_with_gradient(img_a, wa)
    vb, _ = sample_bilinear_with_gradient(img_b, wb)
    return np.abs(va - vb).mean(axis=1)


def _klt_pyramidal(prev, nxt, points, window, max_iters, eps, min_eig, init=None):
    n_levels = len(prev)
    guess = (points if init is None else init) / (2.0 ** n_levels)
    ok = np.ones(len(points), dtype=bool)
    for lvl in range(n_levels - 1, -1, -1):
        guess = guess * 2.0
        base = points / (2.0 ** lvl)
        guess, ok = _klt_level(prev[lvl], nxt[lvl], base, guess, ok,
                               window, max_iters, eps, min_eig, final=(lvl == 0))
    return guess, ok


def _klt_level(img_a, img_b, pts_a, pts_b, ok, window, max_iters, eps, min_eig,
               final):
    """One pyramid level of Lucas-Kanade.

    Points whose template window leaves the level bounds are passed through
    unchanged at coarse levels and fail only at the final level.
    """
    half = window // 2
    offs = np.stack(np.meshgrid(np.arange(-half, half + 1),
                                np.arange(-half, half + 1)), axis=-1).reshape(-1, 2).astype(float)
    h, w = img_a.shape
    hb, wb = img_b.shape
    n = len(pts_a)
    pts_b = pts_b.copy()
    ok = ok.copy()

    win_a = pts_a[:, None, :] + offs[None, :, :]
    inside_a = ((win_a[..., 0] >= 0) & (win_a[..., 0] <= w - 1)
                & (win_a[..., 1] >= 0) & (win_a[..., 1] <= h - 1)).all(axis=1)
    usable = ok & inside_a
    if final:
        ok &= inside_a
    if not np.any(usable):
        return pts_b, ok & ~final

    val_a, grad_a = sample_bilinear_with_gradient(img_a, win_a)
    # structure tensor from the template window
    gxx = (grad_a[..., 0] ** 2).sum(axis=1)
    gxy = (grad_a[..., 0] * grad_a[..., 1]).sum(axis=1)
    gyy = (grad_a[..., 1] ** 2).sum(axis=1)
    tr = gxx + gyy
    det = gxx * gyy - gxy * gxy
    lam_min = tr / 2 - np.sqrt(np.maximum(tr * tr / 4 - det, 0.0))
    textured = lam_min > min_eig * (window * window)
    ok &= textured | ~usable
    usable &= textured

    inv = np.zeros((n, 2, 2))
    good = usable & (det > 0)
    inv[good, 0, 0] = gyy[good] / det[good]
    inv[good, 0, 1] = -gxy[good] / det[good]
    inv[good, 1, 0] = -gxy[good] / det[good]
    inv[good, 1, 1] = gxx[good] / det[good]

    converged = np.zeros(n, dtype=bool)
    for _ in range(max_iters):
        idx = np.nonzero(usable & ~converged)[0]
        if len(idx) == 0:
            break
        win_b = pts_b[idx, None, :] + offs[None, :, :]
        inside = ((win_b[..., 0] >= 0) & (win_b[..., 0] <= wb - 1)
                  & (win_b[..., 1] >= 0) & (win_b[..., 1] <= hb - 1)).all(axis=1)
        ok[idx[~inside]] = False
        usable[idx[~inside]] = False
        idx = idx[inside]
        if len(idx) == 0:
            continue
        val_b = _sample_unchecked(img_b, win_b[inside][..., 0], win_b[inside][..., 1])
        err = val_b - val_a[idx]
        bx = (err * grad_a[idx, :, 0]).sum(axis=1)
        by = (err * grad_a[idx, :, 1]).sum(axis=1)
        step = -(inv[idx] @ np.stack([bx, by], axis=1)[..., None])[..., 0]
        pts_b[idx] += step
        converged[idx] = np.linalg.norm(step, axis=1) < eps

    if final:
        ok &= converged
        ok &= ((pts_b[:, 0] >= 0) & (pts_b[:, 0] <= wb - 1)
               & (pts_b[:, 1] >= 0) & (pts_b[:, 1] <= hb - 1))
    return pts_b, ok
