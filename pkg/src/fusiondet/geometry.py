"""Camera projection and differentiable point <-> grid resampling.

Pixel coordinates are continuous (u, v) = (column, row). The bilinear
sampler and the grid scatterer share one corner/weight scheme, which makes
them exact adjoints: <sample(F, c), G> == <F, scatter(G, c)> for any
feature map F and point features G.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn.dense import as_dense
from .nn.layers import LayerTape

DEPTH_EPS = 1e-6


@dataclass
class PixelCoords:
    """Projected pixel coordinates with a per-point validity mask.

    uv: (n, 2) float64 (u=column, v=row); invalid points carry (0, 0) so
        vectorized consumers never see NaN; the mask is the truth.
    valid: (n,) bool. A point is valid when its homogeneous depth exceeds
        DEPTH_EPS and (u, v) lies inside [0, w-1] x [0, h-1] (closed).
    size: (h, w) of the grid the coordinates refer to.
    """

    uv: np.ndarray
    valid: np.ndarray
    size: tuple[int, int]

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.uv.ndim != 2 or self.uv.shape[1] != 2:
            raise ValueError(f"PixelCoords: uv must be (n, 2), got {self.uv.shape}")
        if self.valid.shape != (self.uv.shape[0],):
            raise ValueError(
                f"PixelCoords: valid mask shape {self.valid.shape} does not match "
                f"{self.uv.shape[0]} points"
            )

    def __len__(self):
        return self.uv.shape[0]


def project_points(points, matrix, image_size) -> PixelCoords:
    """Project camera-frame points through a 3x4 matrix.

    Args:
        points: (n, 3) xyz in the camera frame.
        matrix: (3, 4) projection (intrinsics x rigid transform).
        image_size: (h, w) target grid.

    The perspective divide makes the result invariant to a positive
    rescaling of the matrix (away from the depth-epsilon band, which is
    tested on the raw homogeneous depth).
    """
    pts = as_dense(points, "points")
    mat = np.asarray(matrix, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"project_points: points must be (n, 3), got {pts.shape}")
    if mat.shape != (3, 4):
        raise ValueError(f"project_points: matrix must be (3, 4), got {mat.shape}")
    h, w = int(image_size[0]), int(image_size[1])

    hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
    q = hom @ mat.T
    depth = q[:, 2]
    ok = depth > DEPTH_EPS
    uv = np.zeros((len(pts), 2))
    np.divide(q[:, :2], depth[:, None], out=uv, where=ok[:, None])
    inside = (
        (uv[:, 0] >= 0.0)
        & (uv[:, 0] <= w - 1.0)
        & (uv[:, 1] >= 0.0)
        & (uv[:, 1] <= h - 1.0)
    )
    valid = ok & inside
    uv[~valid] = 0.0
    return PixelCoords(uv=uv, valid=valid, size=(h, w))


def scale_coords(coords: PixelCoords, factor: float, new_size) -> PixelCoords:
    """Rescale coordinates onto a coarser/finer grid, re-deriving validity.

    Dividing by an encoder stride can push edge points past the smaller
    map's last row/col, so being inside the new bounds is checked fresh.
    """
    h, w = int(new_size[0]), int(new_size[1])
    uv = coords.uv / float(factor)
    inside = (
        (uv[:, 0] >= 0.0)
        & (uv[:, 0] <= w - 1.0)
        & (uv[:, 1] >= 0.0)
        & (uv[:, 1] <= h - 1.0)
    )
    valid = coords.valid & inside
    uv = np.where(valid[:, None], uv, 0.0)
    return PixelCoords(uv=uv, valid=valid, size=(h, w))


def _corner_scheme(coords: PixelCoords):
    """Shared 4-neighbor indices and weights for sample/scatter.

    Out-of-grid corners keep a clamped index but a zero weight; invalid
    points get four zero weights. Using one scheme on both sides is what
    guarantees exact adjointness.
    """
    h, w = coords.size
    u = coords.uv[:, 0]
    v = coords.uv[:, 1]
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    du = u - u0
    dv = v - v0
    valid = coords.valid.astype(np.float64)
    corners = []
    for a, b, wgt in (
        (0, 0, (1.0 - du) * (1.0 - dv)),
        (1, 0, du * (1.0 - dv)),
        (0, 1, (1.0 - du) * dv),
        (1, 1, du * dv),
    ):
        iu = u0 + a
        iv = v0 + b
        in_grid = (iu >= 0) & (iu <= w - 1) & (iv >= 0) & (iv <= h - 1)
        wc = wgt * valid * in_grid
        corners.append((np.clip(iv, 0, h - 1), np.clip(iu, 0, w - 1), wc))
    return corners


def bilinear_sample(fmap, coords: PixelCoords):
    """Sample a feature map at continuous coordinates.

    fmap: (h, w, c); coords must have been built for the same (h, w).
    Invalid points yield all-zero features (not edge-clamped values).
    Returns (features (n, c), tape).
    """
    fmap = as_dense(fmap, "feature map")
    if fmap.ndim != 3:
        raise ValueError(f"bilinear_sample: fmap must be (h, w, c), got {fmap.shape}")
    if fmap.shape[:2] != tuple(coords.size):
        raise ValueError(
            f"bilinear_sample: coords were built for {coords.size}, map is {fmap.shape[:2]}"
        )
    corners = _corner_scheme(coords)
    out = np.zeros((len(coords), fmap.shape[2]))
    for iv, iu, wc in corners:
        out += wc[:, None] * fmap[iv, iu]
    return out, LayerTape(
        "bilinear_sample", corners=corners, map_shape=fmap.shape, n=len(coords)
    )


def bilinear_sample_backward(tape, gfeats):
    """Gradient w.r.t. the feature map (coords are geometry, not inputs)."""
    c = tape.take()
    gfeats = np.asarray(gfeats, dtype=np.float64)
    want = (c["n"], c["map_shape"][2])
    if gfeats.shape != want:
        raise ValueError(
            f"bilinear_sample backward: gradient shape {gfeats.shape}, expected {want}"
        )
    gmap = np.zeros(c["map_shape"])
    for iv, iu, wc in c["corners"]:
        np.add.at(gmap, (iv, iu), wc[:, None] * gfeats)
    return gmap


def grid_scatter(feats, coords: PixelCoords, size):
    """Scatter per-point features onto a grid with bilinear weights.

    Adjoint of :func:`bilinear_sample`; overlapping points accumulate.
    Invalid points are omitted. Returns (fmap (h, w, c), tape).
    """
    feats = as_dense(feats, "point features")
    if feats.ndim != 2 or feats.shape[0] != len(coords):
        raise ValueError(
            f"grid_scatter: features must be ({len(coords)}, c), got {feats.shape}"
        )
    h, w = int(size[0]), int(size[1])
    if (h, w) != tuple(coords.size):
        raise ValueError(
            f"grid_scatter: coords were built for {coords.size}, target is {(h, w)}"
        )
    corners = _corner_scheme(coords)
    gmap = np.zeros((h, w, feats.shape[1]))
    for iv, iu, wc in corners:
        np.add.at(gmap, (iv, iu), wc[:, None] * feats)
    return gmap, LayerTape(
        "grid_scatter", corners=corners, map_shape=gmap.shape, n=len(coords)
    )


def grid_scatter_backward(tape, gmap):
    """Gradient w.r.t. the point features: a bilinear gather of gmap."""
    c = tape.take()
    gmap = np.asarray(gmap, dtype=np.float64)
    if gmap.shape != c["map_shape"]:
        raise ValueError(
            f"grid_scatter backward: gradient shape {gmap.shape}, expected {c['map_shape']}"
        )
    gfeats = np.zeros((c["n"], gmap.shape[2]))
    for iv, iu, wc in c["corners"]:
        gfeats += wc[:, None] * gmap[iv, iu]
    return gfeats
