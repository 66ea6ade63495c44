"""KITTI-format frame ingestion.

Calibration text, 15-field label text, and velodyne binaries (little-endian
float32 x, y, z, intensity quadruples), plus camera-frame range cropping
and point-count normalization. Read/write pairs round-trip bit-exactly so
real scans and synthetic scenes flow through one path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes3d import Box3D, wrap_angle
from .nn.dense import as_dense


# -- point sets ---------------------------------------------------------------


@dataclass
class PointSet:
    """A cloud with per-point intensity.

    xyz: (n, 3) float64. The frame is the source's: velodyne files carry
    sensor coordinates (x forward, y left, z up); after cam_from_velo they
    are camera coordinates (x right, y down, z forward).
    intensity: (n,) float64.
    """

    xyz: np.ndarray
    intensity: np.ndarray

    def __post_init__(self):
        self.xyz = as_dense(self.xyz, "xyz")
        self.intensity = as_dense(self.intensity, "intensity")
        if self.xyz.ndim != 2 or self.xyz.shape[1] != 3:
            raise ValueError(f"PointSet: xyz must be (n, 3), got {self.xyz.shape}")
        if self.intensity.shape != (self.xyz.shape[0],):
            raise ValueError(
                f"PointSet: intensity shape {self.intensity.shape} does not match "
                f"{self.xyz.shape[0]} points"
            )

    def __len__(self):
        return self.xyz.shape[0]

    def select(self, idx) -> "PointSet":
        return PointSet(self.xyz[idx], self.intensity[idx])


def read_velodyne(data: bytes) -> PointSet:
    """Decode a velodyne buffer: consecutive float32 (x, y, z, intensity)."""
    if len(data) % 16 != 0:
        raise ValueError(
            f"velodyne buffer has {len(data)} bytes, not a multiple of 16"
        )
    raw = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(np.float64)
    if raw.size and not np.all(np.isfinite(raw)):
        raise ValueError(
            f"velodyne buffer holds {int(np.sum(~np.isfinite(raw)))} non-finite values"
        )
    return PointSet(raw[:, :3], raw[:, 3])


def write_velodyne(points: PointSet) -> bytes:
    """Inverse of :func:`read_velodyne`; float32-exact inputs round-trip
    byte for byte."""
    quad = np.column_stack([points.xyz, points.intensity])
    return quad.astype("<f4").tobytes()


# -- calibration --------------------------------------------------------------


@dataclass
class CalibRecord:
    """Camera projection P2 (3x4), rectification r0 (3x3), and the
    sensor-to-camera rigid transform tr (3x4)."""

    p2: np.ndarray
    r0: np.ndarray
    tr: np.ndarray

    def __post_init__(self):
        self.p2 = as_dense(self.p2, "P2")
        self.r0 = as_dense(self.r0, "R0_rect")
        self.tr = as_dense(self.tr, "Tr_velo_to_cam")
        for name, arr, shape in (
            ("P2", self.p2, (3, 4)),
            ("R0_rect", self.r0, (3, 3)),
            ("Tr_velo_to_cam", self.tr, (3, 4)),
        ):
            if arr.shape != shape:
                raise ValueError(f"calib {name} must be {shape}, got {arr.shape}")

    def cam_from_velo(self, xyz) -> np.ndarray:
        """Map (n, 3) sensor-frame points to the rectified camera frame."""
        pts = np.asarray(xyz, dtype=np.float64)
        return (pts @ self.tr[:, :3].T + self.tr[:, 3]) @ self.r0.T

    def velo_from_cam(self, xyz) -> np.ndarray:
        """Inverse of :meth:`cam_from_velo`."""
        pts = np.asarray(xyz, dtype=np.float64)
        unrect = np.linalg.solve(self.r0, pts.T).T
        return np.linalg.solve(self.tr[:, :3], (unrect - self.tr[:, 3]).T).T

    def velo_projection(self) -> np.ndarray:
        """The composed (3, 4) matrix taking sensor-frame points to pixels."""
        r0h = np.eye(4)
        r0h[:3, :3] = self.r0
        trh = np.eye(4)
        trh[:3, :] = self.tr
        return self.p2 @ r0h @ trh


_CALIB_KEYS = {"P2": (3, 4), "R0_rect": (3, 3), "Tr_velo_to_cam": (3, 4)}


def read_calib(text: str) -> CalibRecord:
    """Parse KITTI calibration text (keys P2, R0_rect, Tr_velo_to_cam;
    other keys such as P0/P1/P3/Tr_imu_to_velo are ignored)."""
    found = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or ":" not in line:
            continue
        key, _, rest = line.partition(":")
        key = key.strip()
        if key not in _CALIB_KEYS:
            continue
        shape = _CALIB_KEYS[key]
        vals = rest.split()
        if len(vals) != shape[0] * shape[1]:
            raise ValueError(
                f"calib key '{key}' has {len(vals)} values, expected {shape[0] * shape[1]}"
            )
        found[key] = np.array([float(v) for v in vals]).reshape(shape)
    missing = [k for k in _CALIB_KEYS if k not in found]
    if missing:
        raise ValueError(f"calib missing key '{missing[0]}'")
    return CalibRecord(found["P2"], found["R0_rect"], found["Tr_velo_to_cam"])


def write_calib(calib: CalibRecord) -> str:
    lines = []
    for key, arr in (("P2", calib.p2), ("R0_rect", calib.r0), ("Tr_velo_to_cam", calib.tr)):
        lines.append(key + ": " + " ".join(repr(float(v)) for v in arr.ravel()))
    return "\n".join(lines) + "\n"


# -- labels -------------------------------------------------------------------


@dataclass
class LabelRecord:
    """One 15-field KITTI label line.

    Location (x, y, z) is the bottom-face center in the camera frame and
    (h, w, l) are height/width/length, both per the label convention;
    :meth:`to_box3d` moves to the geometric-center representation used
    everywhere else in this package.
    """

    cls: str
    truncated: float
    occluded: int
    alpha: float
    bbox: np.ndarray  # (4,) 2D image box: left, top, right, bottom
    h: float
    w: float
    l: float
    x: float
    y: float
    z: float
    ry: float

    def __post_init__(self):
        self.bbox = np.asarray(self.bbox, dtype=np.float64)
        if self.bbox.shape != (4,):
            raise ValueError(f"LabelRecord: bbox must have 4 entries, got {self.bbox.shape}")

    def to_box3d(self) -> Box3D:
        return Box3D(
            x=self.x, y=self.y - self.h / 2.0, z=self.z,
            l=self.l, h=self.h, w=self.w, yaw=self.ry,
        )

    @classmethod
    def from_box3d(cls, name: str, box: Box3D, bbox=(0.0, 0.0, 0.0, 0.0)) -> "LabelRecord":
        # observation angle: heading relative to the ray through the box center
        alpha = wrap_angle(box.yaw - np.arctan2(box.x, box.z))
        return cls(
            cls=name, truncated=0.0, occluded=0, alpha=float(alpha),
            bbox=np.asarray(bbox, dtype=np.float64),
            h=box.h, w=box.w, l=box.l,
            x=box.x, y=box.y + box.h / 2.0, z=box.z, ry=box.yaw,
        )


def read_labels(text: str) -> list[LabelRecord]:
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        f = line.split()
        if len(f) != 15:
            raise ValueError(f"label line {lineno} has {len(f)} fields, expected 15")
        records.append(
            LabelRecord(
                cls=f[0], truncated=float(f[1]), occluded=int(f[2]), alpha=float(f[3]),
                bbox=np.array([float(v) for v in f[4:8]]),
                h=float(f[8]), w=float(f[9]), l=float(f[10]),
                x=float(f[11]), y=float(f[12]), z=float(f[13]), ry=float(f[14]),
            )
        )
    return records


def write_labels(records) -> str:
    lines = []
    for r in records:
        fields = [r.cls, repr(float(r.truncated)), str(int(r.occluded)), repr(float(r.alpha))]
        fields += [repr(float(v)) for v in r.bbox]
        fields += [repr(float(v)) for v in (r.h, r.w, r.l, r.x, r.y, r.z, r.ry)]
        lines.append(" ".join(fields))
    return "\n".join(lines) + ("\n" if lines else "")


# -- range crop and count normalization ----------------------------------------


@dataclass(frozen=True)
class RangeConfig:
    """Closed per-axis camera-frame intervals; defaults follow the usual
    detection range (x right, y down, z forward, meters)."""

    x: tuple[float, float] = (-40.0, 40.0)
    y: tuple[float, float] = (-1.0, 3.0)
    z: tuple[float, float] = (0.0, 70.4)

    def contains(self, xyz) -> np.ndarray:
        pts = np.asarray(xyz, dtype=np.float64)
        ok = np.ones(len(pts), dtype=bool)
        for axis, (lo, hi) in enumerate((self.x, self.y, self.z)):
            ok &= (pts[:, axis] >= lo) & (pts[:, axis] <= hi)
        return ok


def crop_and_subsample(
    points: PointSet,
    range_cfg: RangeConfig,
    n_points: int,
    seed,
    crop_first: bool = True,
) -> PointSet:
    """Crop to the range and normalize the count to exactly ``n_points``.

    Surplus points are dropped by uniform choice without replacement;
    deficits are filled by sampling with replacement. ``crop_first=False``
    subsamples the raw cloud before cropping (the order is a convention,
    not a law of nature), in which case fewer than n_points may survive.
    """
    if n_points < 1:
        raise ValueError(f"n_points must be >= 1, got {n_points}")
    rng = np.random.default_rng(seed)
    if not crop_first:
        if len(points) > n_points:
            points = points.select(np.sort(rng.choice(len(points), n_points, replace=False)))
        return _crop(points, range_cfg)
    points = _crop(points, range_cfg)
    n = len(points)
    if n == n_points:
        return points
    idx = rng.choice(n, n_points, replace=n < n_points)
    return points.select(idx)


def _crop(points: PointSet, range_cfg: RangeConfig) -> PointSet:
    keep = range_cfg.contains(points.xyz)
    if not keep.any():
        raise ValueError("no points survive the range crop")
    return points.select(keep)
