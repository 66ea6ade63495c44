"""Point-set operations: sampling, grouping, beam thinning, augmentation.

Points are bare (n, 3) float64 arrays. Camera frame unless an op says
otherwise (beam elevation is a sensor-frame notion).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .boxes3d import Box3D, points_in_box, wrap_angle
from .nn.dense import as_dense


def _check_points(points, name="points"):
    pts = as_dense(points, name)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"{name}: expected (n, 3), got {pts.shape}")
    return pts


def farthest_point_sampling(points, m: int, seed: int = 0) -> np.ndarray:
    """Pick m indices maximizing the minimum pairwise spread.

    The first index comes from a generator seeded with ``seed``; every
    subsequent pick is the point farthest from the chosen set, ties going
    to the lowest index. Returns (m,) int64 indices.
    """
    pts = _check_points(points)
    n = len(pts)
    if not 1 <= m <= n:
        raise ValueError(f"farthest_point_sampling: m={m} not in [1, {n}]")
    rng = np.random.default_rng(seed)
    idx = np.empty(m, dtype=np.int64)
    idx[0] = int(rng.integers(n))
    d2 = np.sum((pts - pts[idx[0]]) ** 2, axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(d2))  # argmax takes the first max, so ties -> lowest index
        idx[i] = nxt
        d2 = np.minimum(d2, np.sum((pts - pts[nxt]) ** 2, axis=1))
    return idx


@dataclass
class BallGroups:
    """Fixed-width neighborhoods around m centers.

    idx: (m, k) int64 point indices, nearest first. Rows with fewer than k
        in-radius neighbors are right-padded with the nearest neighbor;
        empty rows hold -1 throughout.
    count: (m,) int64 true neighbor counts; 0 marks an empty group, whose
        consumers should substitute the center's own feature.
    """

    idx: np.ndarray
    count: np.ndarray


def ball_group(points, centers, radius: float, max_neighbors: int) -> BallGroups:
    """Group points within ``radius`` of each center, nearest first.

    Equal distances are broken by point index, so the result is
    deterministic for any input order.
    """
    pts = _check_points(points)
    ctr = _check_points(centers, "centers")
    if radius <= 0:
        raise ValueError(f"ball_group: radius must be positive, got {radius}")
    if max_neighbors < 1:
        raise ValueError(f"ball_group: max_neighbors must be >= 1, got {max_neighbors}")
    m, k = len(ctr), int(max_neighbors)
    idx = np.full((m, k), -1, dtype=np.int64)
    count = np.zeros(m, dtype=np.int64)
    d2 = np.sum((ctr[:, None, :] - pts[None, :, :]) ** 2, axis=2)
    r2 = float(radius) ** 2
    for i in range(m):
        near = np.nonzero(d2[i] <= r2)[0]
        if near.size == 0:
            continue
        order = near[np.argsort(d2[i, near], kind="stable")][:k]
        c = order.size
        idx[i, :c] = order
        if c < k:
            idx[i, c:] = order[0]
        count[i] = c
    return BallGroups(idx=idx, count=count)


# -- beam structure ----------------------------------------------------------------


@dataclass
class BeamConfig:
    """Nominal spinning-lidar beam layout used to re-bin points by elevation."""

    n_beams: int = 64
    elev_min_deg: float = -23.6
    elev_max_deg: float = 3.2


def beam_bin_indices(points_sensor, cfg: BeamConfig = BeamConfig()) -> np.ndarray:
    """Assign each sensor-frame point to an elevation bin.

    Elevation is atan2(z_up, sqrt(x^2 + y^2)) in the sensor frame (x
    forward, y left, z up). The span is cut into ``n_beams`` uniform bins;
    out-of-span points clip into the edge bins.
    """
    pts = _check_points(points_sensor)
    if cfg.n_beams < 1:
        raise ValueError(f"beam_bin_indices: n_beams must be >= 1, got {cfg.n_beams}")
    lo = math.radians(cfg.elev_min_deg)
    hi = math.radians(cfg.elev_max_deg)
    if not hi > lo:
        raise ValueError("beam_bin_indices: elevation span is empty")
    elev = np.arctan2(pts[:, 2], np.hypot(pts[:, 0], pts[:, 1]))
    frac = (elev - lo) / (hi - lo)
    return np.clip((frac * cfg.n_beams).astype(np.int64), 0, cfg.n_beams - 1)


def beam_subsample_mask(points_sensor, keep_every: int, cfg: BeamConfig = BeamConfig()):
    """Boolean mask keeping every ``keep_every``-th beam (bin % keep_every == 0)."""
    if keep_every < 1:
        raise ValueError(f"beam_subsample_mask: keep_every must be >= 1, got {keep_every}")
    bins = beam_bin_indices(points_sensor, cfg)
    return bins % int(keep_every) == 0


def beam_subsample(points_sensor, keep_every: int, cfg: BeamConfig = BeamConfig()):
    """Subset of the points on the kept beams (order preserved)."""
    pts = _check_points(points_sensor)
    return pts[beam_subsample_mask(pts, keep_every, cfg)]


# -- augmentation ------------------------------------------------------------------


def rotate_scene(points, boxes, angle: float):
    """Rotate everything about the vertical axis by ``angle``."""
    pts = _check_points(points)
    c, s = math.cos(angle), math.sin(angle)
    out = pts.copy()
    out[:, 0] = pts[:, 0] * c + pts[:, 2] * s
    out[:, 2] = -pts[:, 0] * s + pts[:, 2] * c
    new_boxes = []
    for b in boxes:
        nx = b.x * c + b.z * s
        nz = -b.x * s + b.z * c
        new_boxes.append(Box3D(nx, b.y, nz, b.l, b.h, b.w, wrap_angle(b.yaw + angle)))
    return out, new_boxes


def flip_scene(points, boxes):
    """Mirror across the forward axis: negate lateral x, yaw -> pi - yaw.

    An involution: applying it twice restores the scene.
    """
    pts = _check_points(points)
    out = pts.copy()
    out[:, 0] = -pts[:, 0]
    new_boxes = [
        Box3D(-b.x, b.y, b.z, b.l, b.h, b.w, wrap_angle(math.pi - b.yaw)) for b in boxes
    ]
    return out, new_boxes


def scale_boxes(points, boxes, scales):
    """Scale each box and its interior points about the box center.

    Boxes are assumed disjoint (a point inside two boxes would be scaled
    by whichever comes first).
    """
    pts = _check_points(points).copy()
    if len(scales) != len(boxes):
        raise ValueError(f"scale_boxes: {len(boxes)} boxes but {len(scales)} scales")
    taken = np.zeros(len(pts), dtype=bool)
    new_boxes = []
    for b, s in zip(boxes, scales):
        s = float(s)
        if s <= 0:
            raise ValueError(f"scale_boxes: scale must be positive, got {s}")
        inside = points_in_box(pts, b) & ~taken
        center = np.array([b.x, b.y, b.z])
        pts[inside] = center + s * (pts[inside] - center)
        taken |= inside
        new_boxes.append(Box3D(b.x, b.y, b.z, b.l * s, b.h * s, b.w * s, b.yaw))
    return pts, new_boxes


def augment(points, boxes, seed: int):
    """Standard train-time scene augmentation.

    Draws, in a fixed order from one seeded generator: a global rotation
    uniform in [-pi/18, pi/18], a fair flip coin, and one scale per box
    uniform in [0.95, 1.05]. Box membership of every point is preserved.
    """
    rng = np.random.default_rng(seed)
    angle = rng.uniform(-math.pi / 18.0, math.pi / 18.0)
    do_flip = rng.random() < 0.5
    scales = rng.uniform(0.95, 1.05, size=len(boxes))
    pts, bxs = rotate_scene(points, boxes, angle)
    if do_flip:
        pts, bxs = flip_scene(pts, bxs)
    pts, bxs = scale_boxes(pts, bxs, scales)
    return pts, bxs


# -- test-time corruption -----------------------------------------------------------


@dataclass
class PerturbationConfig:
    """Illumination gain/offset for the image, noise clusters for the cloud.

    ``noise_radius`` of None means half the box diagonal of whichever box
    the cluster is attached to.
    """

    gain_lo: float = 0.5
    gain_hi: float = 1.5
    offset: float = 5.0
    noise_points: int = 100
    noise_radius: float | None = None


def perturb(image, points, boxes, cfg: PerturbationConfig, seed: int):
    """Corrupt one frame: y = a*x + b on the image, noise balls in the cloud.

    Draw order from one seeded generator: the gain, then per box the noise
    directions and radii. The image is clamped back to [0, 255]. Returns
    (image', points') where points' has the noise appended after the
    originals.
    """
    rng = np.random.default_rng(seed)
    img = np.asarray(image, dtype=np.float64)
    gain = rng.uniform(cfg.gain_lo, cfg.gain_hi)
    out_img = np.clip(gain * img + cfg.offset, 0.0, 255.0)

    pts = _check_points(points)
    chunks = [pts]
    for b in boxes:
        k = int(cfg.noise_points)
        if k <= 0:
            continue
        radius = cfg.noise_radius
        if radius is None:
            radius = 0.5 * math.sqrt(b.l**2 + b.h**2 + b.w**2)
        directions = rng.normal(size=(k, 3))
        norms = np.linalg.norm(directions, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        directions /= norms
        radii = radius * rng.random(k) ** (1.0 / 3.0)  # uniform in the ball
        chunks.append(np.array([b.x, b.y, b.z]) + directions * radii[:, None])
    return out_img, np.concatenate(chunks, axis=0)
