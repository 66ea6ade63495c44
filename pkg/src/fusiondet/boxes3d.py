"""Rotated 3-d boxes: overlap, suppression, and average precision.

Boxes live in the camera frame (x right, y down, z forward). Yaw rotates
about the vertical axis and is measured in the ground (x, z) plane; the
heading of a box with yaw t is (cos t, -sin t) in (x, z). Bird's-eye-view
(BEV) geometry is everything projected onto that plane.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def wrap_angle(a):
    """Wrap to [-pi, pi)."""
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@dataclass
class Box3D:
    """Oriented box: geometric center (x, y, z), sizes (l, h, w), yaw.

    l runs along the heading, h along vertical (y), w across. Sizes must be
    non-negative and finite; zero sizes are legal degenerate boxes (their
    IoU with anything is zero). Yaw is wrapped to [-pi, pi) on construction.
    """

    x: float
    y: float
    z: float
    l: float
    h: float
    w: float
    yaw: float

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.l, self.h, self.w, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"Box3D: non-finite field in {vals}")
        if self.l < 0 or self.h < 0 or self.w < 0:
            raise ValueError(f"Box3D: negative size (l={self.l}, h={self.h}, w={self.w})")
        self.yaw = float(wrap_angle(self.yaw))

    def volume(self) -> float:
        return self.l * self.h * self.w

    def bev_diag(self) -> float:
        return math.hypot(self.l, self.w)


def corners_bev(box: Box3D) -> np.ndarray:
    """(4, 2) ground-plane corners in (x, z), counter-clockwise."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    dl, dw = box.l / 2.0, box.w / 2.0
    local = np.array([[dl, dw], [-dl, dw], [-dl, -dw], [dl, -dw]])
    world = np.empty_like(local)
    world[:, 0] = box.x + local[:, 0] * c + local[:, 1] * s
    world[:, 1] = box.z - local[:, 0] * s + local[:, 1] * c
    return world


def corners_3d(box: Box3D) -> np.ndarray:
    """(8, 3) corners; first four at the top face (y - h/2), then bottom."""
    bev = corners_bev(box)
    out = np.zeros((8, 3))
    out[:4, [0, 2]] = bev
    out[4:, [0, 2]] = bev
    out[:4, 1] = box.y - box.h / 2.0
    out[4:, 1] = box.y + box.h / 2.0
    return out


def points_in_box(points, box: Box3D) -> np.ndarray:
    """Boolean mask of points strictly within the closed box volume."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points_in_box: points must be (n, 3), got {pts.shape}")
    d = pts - np.array([box.x, box.y, box.z])
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    # inverse of the corner rotation: local = R(yaw)^-1 . world
    dx = d[:, 0] * c - d[:, 2] * s
    dz = d[:, 0] * s + d[:, 2] * c
    return (
        (np.abs(dx) <= box.l / 2.0)
        & (np.abs(dz) <= box.w / 2.0)
        & (np.abs(d[:, 1]) <= box.h / 2.0)
    )


# -- polygon overlap -------------------------------------------------------------


def polygon_area(poly) -> float:
    """Shoelace area (absolute) of a simple polygon given as (n, 2)."""
    p = np.asarray(poly, dtype=np.float64)
    if len(p) < 3:
        return 0.0
    x, z = p[:, 0], p[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(z, -1)) - np.dot(z, np.roll(x, -1))))


def clip_polygon(subject, clip) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex subject by a convex CCW clip."""
    out = [tuple(p) for p in np.asarray(subject, dtype=np.float64)]
    clip = np.asarray(clip, dtype=np.float64)
    for i in range(len(clip)):
        if not out:
            break
        a = clip[i]
        b = clip[(i + 1) % len(clip)]
        ex, ez = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ez * (p[0] - a[0])

        src = out
        out = []
        for j in range(len(src)):
            cur = src[j]
            prv = src[j - 1]
            cs, ps = side(cur), side(prv)
            if cs >= 0.0:
                if ps < 0.0:
                    out.append(_edge_hit(prv, cur, ps, cs))
                out.append(cur)
            elif ps >= 0.0:
                out.append(_edge_hit(prv, cur, ps, cs))
    return np.asarray(out, dtype=np.float64).reshape(-1, 2)


def _edge_hit(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def _ccw(poly):
    p = np.asarray(poly, dtype=np.float64)
    x, z = p[:, 0], p[:, 1]
    signed = 0.5 * float(np.dot(x, np.roll(z, -1)) - np.dot(z, np.roll(x, -1)))
    return p if signed >= 0 else p[::-1]


def iou_bev(a: Box3D, b: Box3D) -> float:
    """Ground-plane IoU of two rotated boxes via exact polygon clipping."""
    ra = a.bev_diag() / 2.0
    rb = b.bev_diag() / 2.0
    if math.hypot(a.x - b.x, a.z - b.z) > ra + rb:  # circumcircles disjoint
        return 0.0
    area_a = a.l * a.w
    area_b = b.l * b.w
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    inter = polygon_area(clip_polygon(_ccw(corners_bev(a)), _ccw(corners_bev(b))))
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return float(inter / union)


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volumetric IoU: BEV intersection times vertical interval overlap."""
    va = a.volume()
    vb = b.volume()
    if va <= 0.0 or vb <= 0.0:
        return 0.0
    ra = a.bev_diag() / 2.0
    rb = b.bev_diag() / 2.0
    if math.hypot(a.x - b.x, a.z - b.z) > ra + rb:
        return 0.0
    dy = min(a.y + a.h / 2.0, b.y + b.h / 2.0) - max(a.y - a.h / 2.0, b.y - b.h / 2.0)
    if dy <= 0.0:
        return 0.0
    inter_bev = polygon_area(clip_polygon(_ccw(corners_bev(a)), _ccw(corners_bev(b))))
    inter = inter_bev * dy
    union = va + vb - inter
    if union <= 0.0:
        return 0.0
    return float(inter / union)


# -- suppression -----------------------------------------------------------------


def nms(boxes, scores, pre_top_k: int = 8000, iou_thresh: float = 0.8, keep_top: int = 100):
    """Greedy BEV non-maximum suppression.

    Candidates are ranked by score (descending, stable: ties keep input
    order), truncated to ``pre_top_k``, then greedily kept while dropping
    any box whose BEV IoU with an already-kept box exceeds ``iou_thresh``.
    At most ``keep_top`` survive. Returns kept indices into the input.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if len(boxes) != len(scores):
        raise ValueError(
            f"nms: {len(boxes)} boxes but {len(scores)} scores"
        )
    order = np.argsort(-scores, kind="stable")[:pre_top_k]
    kept: list[int] = []
    for idx in order:
        cand = boxes[idx]
        if all(iou_bev(cand, boxes[k]) <= iou_thresh for k in kept):
            kept.append(int(idx))
            if len(kept) >= keep_top:
                break
    return np.asarray(kept, dtype=np.int64)


# -- evaluation ------------------------------------------------------------------


@dataclass
class Detection:
    """One detected box on one frame."""

    frame_id: str
    cls: str
    score: float
    box: Box3D


@dataclass
class GroundTruth:
    frame_id: str
    cls: str
    box: Box3D


def eval_map_r40(detections, ground_truths, iou_thresh, bev: bool = False):
    """Average precision at 40 recall positions, per class.

    Args:
        detections: sequence of :class:`Detection`.
        ground_truths: sequence of :class:`GroundTruth`.
        iou_thresh: float, or dict mapping class name -> threshold.
        bev: match on BEV IoU instead of volumetric IoU.

    Detections are taken in descending score order (ties resolved by input
    order); each may match at most one still-unmatched ground truth of the
    same class on the same frame, picking the highest-IoU one at or above
    the threshold. AP is the mean of the precision envelope sampled at
    recalls k/40, k = 1..40. Classes with zero ground truths are absent
    from the result (their AP is undefined).
    """
    overlap = iou_bev if bev else iou_3d
    classes = sorted({g.cls for g in ground_truths})
    result: dict[str, float] = {}
    for cls in classes:
        gts = [g for g in ground_truths if g.cls == cls]
        dets = [d for d in detections if d.cls == cls]
        thresh = iou_thresh[cls] if isinstance(iou_thresh, dict) else float(iou_thresh)
        order = np.argsort(-np.asarray([d.score for d in dets]), kind="stable")
        matched = [False] * len(gts)
        by_frame: dict[str, list[int]] = {}
        for i, g in enumerate(gts):
            by_frame.setdefault(g.frame_id, []).append(i)
        tp_flags = np.zeros(len(dets), dtype=bool)
        for rank, di in enumerate(order):
            det = dets[di]
            best_iou, best_gi = 0.0, -1
            for gi in by_frame.get(det.frame_id, []):
                if matched[gi]:
                    continue
                o = overlap(det.box, gts[gi].box)
                if o > best_iou:
                    best_iou, best_gi = o, gi
            if best_gi >= 0 and best_iou >= thresh:
                matched[best_gi] = True
                tp_flags[rank] = True
        result[cls] = _ap_r40(tp_flags, len(gts))
    return result


def _ap_r40(tp_flags_in_rank_order, n_gt: int) -> float:
    if n_gt <= 0:
        raise ValueError("AP undefined with zero ground truths")
    if len(tp_flags_in_rank_order) == 0:
        return 0.0
    tp = np.cumsum(tp_flags_in_rank_order)
    fp = np.cumsum(~np.asarray(tp_flags_in_rank_order, dtype=bool))
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    total = 0.0
    for k in range(1, 41):
        r = k / 40.0
        attained = precision[recall >= r]
        total += float(attained.max()) if attained.size else 0.0
    return total / 40.0


# -- detection dump ---------------------------------------------------------------


def write_detections(detections, path) -> None:
    """One line per detection: frame class score x y z l h w yaw.

    Floats are written with repr so a read-back is value-exact.
    """
    lines = []
    for d in detections:
        if any(ch.isspace() for ch in d.cls) or not d.cls:
            raise ValueError(f"class name {d.cls!r} cannot contain whitespace")
        if any(ch.isspace() for ch in d.frame_id) or not d.frame_id:
            raise ValueError(f"frame id {d.frame_id!r} cannot contain whitespace")
        b = d.box
        fields = [d.frame_id, d.cls] + [
            repr(float(v)) for v in (d.score, b.x, b.y, b.z, b.l, b.h, b.w, b.yaw)
        ]
        lines.append(" ".join(fields))
    with open(path, "w") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))


def read_detections(path):
    out = []
    with open(path) as f:
        for ln, raw in enumerate(f, start=1):
            raw = raw.strip()
            if not raw:
                continue
            parts = raw.split()
            if len(parts) != 10:
                raise ValueError(f"detection dump line {ln}: expected 10 fields, got {len(parts)}")
            frame_id, cls = parts[0], parts[1]
            score, x, y, z, l, h, w, yaw = (float(v) for v in parts[2:])
            out.append(Detection(frame_id, cls, score, Box3D(x, y, z, l, h, w, yaw)))
    return out
