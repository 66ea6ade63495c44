"""Synthetic street-like scenes with paired clouds and images.

Each scene places a few labeled boxes ("cars": bright, saturated albedo)
and a few unlabeled decoy boxes (same geometry, dull ground-like albedo)
on a flat ground plane, samples LiDAR-ish surface and ground points with
1/distance^2 falloff, and ray-casts a small pinhole image. Point intensity
is pure noise everywhere, so the only way to tell a decoy from a car is
the image. Everything is reproducible from one integer seed.

Scenes are written to / read from KITTI-format frame directories
(calib/, velodyne/, label_2/, image_2/) so real scans and synthetic frames
flow through one path; masks are recomputed from boxes on load rather than
persisted, which keeps them consistent with the stored geometry by
construction.
"""

from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .boxes3d import Box3D, corners_3d, iou_bev, points_in_box
from .geometry import project_points
from .kitti_io import (
    CalibRecord,
    LabelRecord,
    PointSet,
    RangeConfig,
    crop_and_subsample,
    read_calib,
    read_labels,
    read_velodyne,
    write_calib,
    write_labels,
    write_velodyne,
)
from .pointops import PerturbationConfig, beam_subsample_mask, perturb

# sensor-to-camera axis permutation: x_cam = -y_s, y_cam = -z_s, z_cam = x_s
TR_SENSOR_TO_CAM = np.array(
    [[0.0, -1.0, 0.0, 0.0], [0.0, 0.0, -1.0, 0.0], [1.0, 0.0, 0.0, 0.0]]
)

GROUND_Y = 1.6  # camera height above the plane, y pointing down

SKY_RGB = (170.0, 180.0, 190.0)
GROUND_RGB = (95.0, 90.0, 85.0)
CHECKER_AMP = 25.0


@dataclass
class SceneConfig:
    """Knobs for scene generation; defaults aim at minutes-scale training."""

    image_hw: tuple[int, int] = (48, 160)
    focal: float = 96.0
    n_objects: tuple[int, int] = (1, 3)
    n_decoys: tuple[int, int] = (1, 2)
    length_range: tuple[float, float] = (3.2, 4.6)
    width_range: tuple[float, float] = (1.5, 1.9)
    height_range: tuple[float, float] = (1.4, 1.8)
    z_range: tuple[float, float] = (6.0, 42.0)
    frustum_margin: float = 0.75  # fraction of the view half-width usable for centers
    placement_gap: float = 0.75  # meters of clearance between box footprints
    max_retries: int = 40
    points_at_10m: float = 120.0
    min_obj_points: int = 24
    max_obj_points: int = 320
    n_ground: int = 700
    ground_z: tuple[float, float] = (3.0, 55.0)
    pixel_noise: float = 2.0
    n_points: int = 256
    range_cfg: RangeConfig = field(default_factory=RangeConfig)
    class_name: str = "Car"

    def p2(self) -> np.ndarray:
        h, w = self.image_hw
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        return np.array(
            [[self.focal, 0.0, cx, 0.0], [0.0, self.focal, cy, 0.0], [0.0, 0.0, 1.0, 0.0]]
        )

    def calib(self) -> CalibRecord:
        return CalibRecord(self.p2(), np.eye(3), TR_SENSOR_TO_CAM)


@dataclass
class SceneSample:
    """One frame: subsampled camera-frame points, rendered image, labels.

    ``decoys`` are the unlabeled scenery boxes (never persisted); loaded
    frames have an empty list. ``image`` holds integral float64 values in
    [0, 255] so the in-memory frame equals its PNG round trip exactly.
    """

    points: PointSet
    image: np.ndarray
    boxes: list
    classes: list
    point_mask: np.ndarray
    pixel_mask: np.ndarray
    calib: CalibRecord
    decoys: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


# -- ray casting ----------------------------------------------------------------


def _pixel_rays(p2, image_hw):
    """Per-pixel rays (origin, directions) for a (3, 4) projection."""
    h, w = image_hw
    k = np.asarray(p2, dtype=np.float64)[:, :3]
    t = np.asarray(p2, dtype=np.float64)[:, 3]
    origin = np.linalg.solve(k, -t)
    u, v = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    pix = np.stack([u.ravel(), v.ravel(), np.ones(h * w)], axis=1)
    dirs = np.linalg.solve(k, pix.T).T
    return origin, dirs


def _ray_box_depth(origin, dirs, box: Box3D):
    """Slab test of many rays against one oriented box.

    Returns (hit, t) where t parameterizes origin + t * dirs; for rays
    starting outside the box t is the entry distance.
    """
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rel = origin - np.array([box.x, box.y, box.z])
    o_l = np.array([rel[0] * c - rel[2] * s, rel[1], rel[0] * s + rel[2] * c])
    d_l = np.stack(
        [dirs[:, 0] * c - dirs[:, 2] * s, dirs[:, 1], dirs[:, 0] * s + dirs[:, 2] * c],
        axis=1,
    )
    ext = np.array([box.l / 2.0, box.h / 2.0, box.w / 2.0])
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-ext - o_l) / d_l
        t2 = (ext - o_l) / d_l
    near = np.minimum(t1, t2)
    far = np.maximum(t1, t2)
    flat = d_l == 0.0
    if flat.any():
        inside = (np.abs(o_l) <= ext)[None, :] & flat
        near[flat] = np.where(inside[flat], -np.inf, np.inf)
        far[flat] = np.where(inside[flat], np.inf, -np.inf)
    tmin = near.max(axis=1)
    tmax = far.min(axis=1)
    hit = (tmax >= tmin) & (tmax > 0.0)
    return hit, np.where(tmin > 0.0, tmin, tmax)


def pixel_silhouette(boxes, p2, image_hw) -> np.ndarray:
    """(h, w) mask of pixels whose ray meets any of the boxes (no occlusion)."""
    h, w = image_hw
    mask = np.zeros(h * w, dtype=bool)
    if boxes:
        origin, dirs = _pixel_rays(p2, image_hw)
        for box in boxes:
            hit, _ = _ray_box_depth(origin, dirs, box)
            mask |= hit
    return mask.reshape(h, w)


def _render(shaded, p2, image_hw, rng, pixel_noise):
    """Flat-shade boxes over a checkered ground plane and a constant sky.

    ``shaded`` is a list of (Box3D, rgb) pairs; nearest surface wins.
    """
    h, w = image_hw
    origin, dirs = _pixel_rays(p2, image_hw)
    n = h * w
    depth = np.full(n, np.inf)
    color = np.tile(np.array(SKY_RGB), (n, 1))

    down = dirs[:, 1] > 1e-12
    t_g = (GROUND_Y - origin[1]) / dirs[down, 1]
    ground_hit = t_g > 0.0
    gpos = origin + t_g[ground_hit, None] * dirs[down][ground_hit]
    parity = ((np.floor(gpos[:, 0]) + np.floor(gpos[:, 2])) % 2.0) * 2.0 - 1.0
    idx = np.flatnonzero(down)[ground_hit]
    depth[idx] = t_g[ground_hit]
    color[idx] = np.array(GROUND_RGB) + (CHECKER_AMP * parity)[:, None]

    for box, rgb in shaded:
        hit, t = _ray_box_depth(origin, dirs, box)
        closer = hit & (t < depth)
        depth[closer] = t[closer]
        color[closer] = np.asarray(rgb, dtype=np.float64)

    noisy = color + rng.uniform(-pixel_noise, pixel_noise, size=color.shape)
    return np.clip(np.rint(noisy), 0.0, 255.0).reshape(h, w, 3)


# -- scene assembly ---------------------------------------------------------------


def _sample_box(cfg: SceneConfig, rng) -> Box3D:
    length = rng.uniform(*cfg.length_range)
    width = rng.uniform(*cfg.width_range)
    height = rng.uniform(*cfg.height_range)
    z = rng.uniform(*cfg.z_range)
    half_view = z * (cfg.image_hw[1] / 2.0) / cfg.focal
    x = rng.uniform(-1.0, 1.0) * cfg.frustum_margin * half_view
    return Box3D(x, GROUND_Y - height / 2.0, z, length, height, width, rng.uniform(-math.pi, math.pi))


def _fully_visible(box: Box3D, cfg: SceneConfig) -> bool:
    corners = corners_3d(box)
    return bool(project_points(corners, cfg.p2(), cfg.image_hw).valid.all())


def _clear_of(box: Box3D, placed, gap: float) -> bool:
    pad_a = Box3D(box.x, box.y, box.z, box.l + gap, box.h, box.w + gap, box.yaw)
    for other in placed:
        pad_b = Box3D(other.x, other.y, other.z, other.l + gap, other.h, other.w + gap, other.yaw)
        if iou_bev(pad_a, pad_b) > 0.0:
            return False
    return True


def _place_boxes(cfg: SceneConfig, rng, count: int, existing) -> list:
    placed = []
    for _ in range(count):
        for _ in range(cfg.max_retries):
            cand = _sample_box(cfg, rng)
            if _fully_visible(cand, cfg) and _clear_of(cand, existing + placed, cfg.placement_gap):
                placed.append(cand)
                break
    return placed


_FACE_EPS = 1e-4  # inward offset keeping surface points inside through float32


def _surface_points(box: Box3D, cfg: SceneConfig, rng) -> np.ndarray:
    dist = math.sqrt(box.x**2 + box.y**2 + box.z**2)
    n = int(np.clip(round(cfg.points_at_10m * (10.0 / max(dist, 1.0)) ** 2),
                    cfg.min_obj_points, cfg.max_obj_points))
    ex, ey, ez = box.l / 2.0 - _FACE_EPS, box.h / 2.0 - _FACE_EPS, box.w / 2.0 - _FACE_EPS
    areas = np.array([box.h * box.w, box.h * box.w, box.l * box.w,
                      box.l * box.w, box.l * box.h, box.l * box.h])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    local = np.empty((n, 3))
    local[:, 0] = rng.uniform(-ex, ex, n)
    local[:, 1] = rng.uniform(-ey, ey, n)
    local[:, 2] = rng.uniform(-ez, ez, n)
    axis = face // 2  # 0 -> local x face, 1 -> local y, 2 -> local z
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    extent = np.array([ex, ey, ez])
    local[np.arange(n), axis] = sign * extent[axis]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    world = np.empty_like(local)
    world[:, 0] = box.x + local[:, 0] * c + local[:, 2] * s
    world[:, 1] = box.y + local[:, 1]
    world[:, 2] = box.z - local[:, 0] * s + local[:, 2] * c
    return world


def _ground_points(cfg: SceneConfig, rng, avoid) -> np.ndarray:
    z_lo, z_hi = cfg.ground_z
    u = rng.random(cfg.n_ground)
    # density proportional to 1/z^2 via the inverse CDF
    z = 1.0 / (1.0 / z_lo - u * (1.0 / z_lo - 1.0 / z_hi))
    half_view = z * (cfg.image_hw[1] / 2.0) / cfg.focal
    x = rng.uniform(-1.0, 1.0, cfg.n_ground) * np.minimum(half_view, 39.9)
    pts = np.column_stack([x, np.full(cfg.n_ground, GROUND_Y), z])
    keep = np.ones(len(pts), dtype=bool)
    for box in avoid:
        keep &= ~points_in_box(pts, box)
    return pts[keep]


def _palette_color(rng) -> tuple:
    r, g, b = colorsys.hsv_to_rgb(rng.random(), rng.uniform(0.7, 0.95), rng.uniform(0.75, 0.95))
    return (255.0 * r, 255.0 * g, 255.0 * b)


def _decoy_color(rng) -> tuple:
    jitter = rng.uniform(-10.0, 10.0)
    return tuple(v + jitter for v in GROUND_RGB)


def synth_scene(cfg: SceneConfig, seed) -> SceneSample:
    """Generate one reproducible scene."""
    rng = np.random.default_rng(seed)
    n_req = int(rng.integers(cfg.n_objects[0], cfg.n_objects[1] + 1))
    n_dec = int(rng.integers(cfg.n_decoys[0], cfg.n_decoys[1] + 1))
    boxes = _place_boxes(cfg, rng, n_req, [])
    decoys = _place_boxes(cfg, rng, n_dec, boxes)

    clouds = [_surface_points(b, cfg, rng) for b in boxes + decoys]
    clouds.append(_ground_points(cfg, rng, boxes + decoys))
    xyz = np.concatenate(clouds, axis=0)
    intensity = rng.random(len(xyz))
    order = rng.permutation(len(xyz))
    raw = PointSet(xyz[order], intensity[order])

    sub_seed = int(rng.integers(2**63))
    points = crop_and_subsample(raw, cfg.range_cfg, cfg.n_points, seed=sub_seed)

    shaded = [(b, _palette_color(rng)) for b in boxes]
    shaded += [(d, _decoy_color(rng)) for d in decoys]
    image = _render(shaded, cfg.p2(), cfg.image_hw, rng, cfg.pixel_noise)

    point_mask = np.zeros(len(points), dtype=bool)
    for b in boxes:
        point_mask |= points_in_box(points.xyz, b)
    pixel_mask = pixel_silhouette(boxes, cfg.p2(), cfg.image_hw)

    return SceneSample(
        points=points,
        image=image,
        boxes=boxes,
        classes=[cfg.class_name] * len(boxes),
        point_mask=point_mask,
        pixel_mask=pixel_mask,
        calib=cfg.calib(),
        decoys=decoys,
        meta={"seed": seed if isinstance(seed, int) else str(seed),
              "n_objects_requested": n_req, "n_objects": len(boxes), "n_decoys": len(decoys)},
    )


def make_dataset(cfg: SceneConfig, n_frames: int, base_seed: int) -> list:
    """n_frames independent scenes; frame i is seeded by (base_seed, i)."""
    return [synth_scene(cfg, np.random.SeedSequence([base_seed, i])) for i in range(n_frames)]


# -- test-time corruption at the frame level --------------------------------------


def perturb_sample(sample: SceneSample, cfg: PerturbationConfig, seed: int) -> SceneSample:
    """Apply illumination gain/offset and per-object noise clusters.

    Boxes and the pixel mask are untouched (the scene itself did not move);
    the point mask is recomputed since noise points may fall inside boxes.
    """
    image, xyz = perturb(sample.image, sample.points.xyz, sample.boxes, cfg, seed)
    n_new = len(xyz) - len(sample.points)
    extra = np.random.default_rng(seed + 1).random(n_new)
    points = PointSet(xyz, np.concatenate([sample.points.intensity, extra]))
    point_mask = np.zeros(len(points), dtype=bool)
    for b in sample.boxes:
        point_mask |= points_in_box(points.xyz, b)
    return SceneSample(
        points=points,
        image=image,
        boxes=list(sample.boxes),
        classes=list(sample.classes),
        point_mask=point_mask,
        pixel_mask=sample.pixel_mask.copy(),
        calib=sample.calib,
        decoys=list(sample.decoys),
        meta=dict(sample.meta, perturb_seed=seed),
    )


def sparsify_sample(
    sample: SceneSample, keep_every: int, n_points: int, seed: int
) -> SceneSample:
    """Drop all but every ``keep_every``-th elevation beam, then resample.

    The beam pattern lives in the sensor frame, so points go through the
    frame's calibration before binning. The survivors are resampled (with
    replacement if too few remain) back to ``n_points`` so downstream code
    sees the usual cloud size; the image and boxes are untouched and the
    point mask is recomputed for the new cloud.
    """
    sensor = sample.calib.velo_from_cam(sample.points.xyz)
    kept = sample.points.select(np.flatnonzero(beam_subsample_mask(sensor, keep_every)))
    if len(kept) == 0:
        raise ValueError(f"no points survive keep_every={keep_every}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(kept), size=n_points, replace=len(kept) < n_points)
    points = kept.select(np.sort(idx))
    point_mask = np.zeros(len(points), dtype=bool)
    for b in sample.boxes:
        point_mask |= points_in_box(points.xyz, b)
    return SceneSample(
        points=points,
        image=sample.image.copy(),
        boxes=list(sample.boxes),
        classes=list(sample.classes),
        point_mask=point_mask,
        pixel_mask=sample.pixel_mask.copy(),
        calib=sample.calib,
        decoys=list(sample.decoys),
        meta=dict(sample.meta, keep_every=keep_every, sparsify_seed=seed),
    )


# -- frame directories -------------------------------------------------------------


def _bbox2d(box: Box3D, p2, image_hw) -> np.ndarray:
    h, w = image_hw
    corners = corners_3d(box)
    coords = project_points(corners, p2, image_hw)
    uv = coords.uv
    return np.array(
        [
            max(float(uv[:, 0].min()), 0.0),
            max(float(uv[:, 1].min()), 0.0),
            min(float(uv[:, 0].max()), w - 1.0),
            min(float(uv[:, 1].max()), h - 1.0),
        ]
    )


def write_frame(root, frame_id: str, sample: SceneSample) -> None:
    root = Path(root)
    for sub in ("calib", "velodyne", "label_2", "image_2"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    (root / "calib" / f"{frame_id}.txt").write_text(write_calib(sample.calib))
    sensor_xyz = sample.calib.velo_from_cam(sample.points.xyz)
    (root / "velodyne" / f"{frame_id}.bin").write_bytes(
        write_velodyne(PointSet(sensor_xyz, sample.points.intensity))
    )
    image_hw = sample.image.shape[:2]
    records = [
        LabelRecord.from_box3d(name, box, bbox=_bbox2d(box, sample.calib.p2, image_hw))
        for name, box in zip(sample.classes, sample.boxes)
    ]
    (root / "label_2" / f"{frame_id}.txt").write_text(write_labels(records))
    Image.fromarray(sample.image.astype(np.uint8)).save(root / "image_2" / f"{frame_id}.png")


def load_frame(root, frame_id: str, n_points: int | None = None,
               range_cfg: RangeConfig | None = None, seed: int = 0) -> SceneSample:
    """Read one KITTI-format frame; masks are rebuilt from the stored boxes.

    ``n_points`` of None keeps the cropped cloud as stored; otherwise the
    count is normalized exactly as during generation.
    """
    root = Path(root)
    calib = read_calib((root / "calib" / f"{frame_id}.txt").read_text())
    raw = read_velodyne((root / "velodyne" / f"{frame_id}.bin").read_bytes())
    cam = PointSet(calib.cam_from_velo(raw.xyz), raw.intensity)
    range_cfg = range_cfg or RangeConfig()
    if n_points is None:
        points = cam.select(range_cfg.contains(cam.xyz))
    else:
        points = crop_and_subsample(cam, range_cfg, n_points, seed=seed)
    records = read_labels((root / "label_2" / f"{frame_id}.txt").read_text())
    boxes = [r.to_box3d() for r in records]
    with Image.open(root / "image_2" / f"{frame_id}.png") as im:
        image = np.asarray(im, dtype=np.float64)
    point_mask = np.zeros(len(points), dtype=bool)
    for b in boxes:
        point_mask |= points_in_box(points.xyz, b)
    pixel_mask = pixel_silhouette(boxes, calib.p2, image.shape[:2])
    return SceneSample(
        points=points,
        image=image,
        boxes=boxes,
        classes=[r.cls for r in records],
        point_mask=point_mask,
        pixel_mask=pixel_mask,
        calib=calib,
        meta={"frame_id": frame_id},
    )


def frame_ids(n_frames: int) -> list:
    return [f"{i:06d}" for i in range(n_frames)]


def write_dataset(root, samples) -> None:
    for i, sample in enumerate(samples):
        write_frame(root, f"{i:06d}", sample)


def load_dataset(root, n_points: int | None = None,
                 range_cfg: RangeConfig | None = None, base_seed: int = 0) -> list:
    root = Path(root)
    ids = sorted(p.stem for p in (root / "velodyne").glob("*.bin"))
    return [
        load_frame(root, fid, n_points=n_points, range_cfg=range_cfg,
                   seed=base_seed + i)
        for i, fid in enumerate(ids)
    ]
