"""Training objectives and the bin-based box encoding.

Every loss returns its scalar value together with the analytic gradients of
that value w.r.t. its differentiable inputs. Probabilities and log
arguments are clamped to [CLAMP, 1 - CLAMP]; gradients are evaluated at the
clamped values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .boxes3d import Box3D, wrap_angle

CLAMP = 1e-7


def _clamped(p):
    return np.clip(np.asarray(p, dtype=np.float64), CLAMP, 1.0 - CLAMP)


# -- classification ---------------------------------------------------------------


def focal_loss(probs, fg_mask, alpha: float = 0.25, gamma: float = 2.0):
    """Mean focal loss over a set of predicted probabilities.

    Foreground elements contribute -alpha * (1-p)^gamma * log(p); background
    elements the complement -(1-alpha) * p^gamma * log(1-p). Returns
    (value, grad) with grad the same shape as ``probs``.
    """
    p = _clamped(probs)
    fg = np.asarray(fg_mask, dtype=bool)
    if fg.shape != p.shape:
        raise ValueError(
            f"focal_loss: mask shape {fg.shape} does not match probs {p.shape}"
        )
    n = max(p.size, 1)
    logp = np.log(p)
    log1p = np.log1p(-p)
    omp = 1.0 - p
    loss_fg = -alpha * omp**gamma * logp
    loss_bg = -(1.0 - alpha) * p**gamma * log1p
    value = float(np.where(fg, loss_fg, loss_bg).sum() / n)

    grad_fg = alpha * gamma * omp ** (gamma - 1.0) * logp - alpha * omp**gamma / p
    grad_bg = (
        -(1.0 - alpha) * gamma * p ** (gamma - 1.0) * log1p
        + (1.0 - alpha) * p**gamma / omp
    )
    grad = np.where(fg, grad_fg, grad_bg) / n
    return value, grad


def bernoulli_kl(p, q):
    """Elementwise KL(Ber(p) || Ber(q)) with clamped arguments.

    Returns (kl, dkl_dp, dkl_dq), all shaped like the broadcast inputs.
    """
    p = _clamped(p)
    q = _clamped(q)
    kl = p * np.log(p / q) + (1.0 - p) * np.log((1.0 - p) / (1.0 - q))
    dp = np.log(p / q) - np.log((1.0 - p) / (1.0 - q))
    dq = -p / q + (1.0 - p) / (1.0 - q)
    return kl, dp, dq


def mc_loss(
    c_p,
    c_i,
    valid,
    tau: float = 0.2,
    lam1: float = 0.5,
    lam2: float = 0.5,
    stop_grad_avg: bool = False,
    active_mean: bool = False,
):
    """Consistency penalty pulling the two confidence estimates together.

    For each point with a valid image projection, the average
    c_a = (c_p + c_i) / 2 anchors two KL terms,
    lam1 * KL(c_i || c_a) + lam2 * KL(c_p || c_a); a pair participates only
    when max(c_p, c_i) > tau (confident in at least one modality). The sum
    is divided by the total point count (``active_mean`` switches to the
    active-pair mean). By default gradients also flow through c_a;
    ``stop_grad_avg`` freezes the anchor.

    Returns (value, grad_c_p, grad_c_i).
    """
    cp = _clamped(c_p)
    ci = _clamped(c_i)
    valid = np.asarray(valid, dtype=bool)
    if not (cp.shape == ci.shape == valid.shape):
        raise ValueError(
            f"mc_loss: shapes differ: c_p {cp.shape}, c_i {ci.shape}, valid {valid.shape}"
        )
    active = valid & (np.maximum(cp, ci) > tau)
    n = cp.size
    denom = max(int(np.count_nonzero(active)), 1) if active_mean else max(n, 1)

    ca = 0.5 * (cp + ci)
    kl_i, dkli_dx, dkli_da = bernoulli_kl(ci, ca)
    kl_p, dklp_dx, dklp_da = bernoulli_kl(cp, ca)
    per_pair = lam1 * kl_i + lam2 * kl_p
    value = float(per_pair[active].sum() / denom)

    da = lam1 * dkli_da + lam2 * dklp_da
    if stop_grad_avg:
        da = np.zeros_like(da)
    gcp = (lam2 * dklp_dx + 0.5 * da) / denom
    gci = (lam1 * dkli_dx + 0.5 * da) / denom
    zero = np.zeros_like(gcp)
    return value, np.where(active, gcp, zero), np.where(active, gci, zero)


def ce_loss(conf, iou):
    """Confidence-quality term: mean of -log(conf * iou) over candidates.

    The IoU factor is a measured quality, not a differentiable input; the
    gradient is w.r.t. ``conf`` only. Empty input yields (0, empty grad).
    """
    conf = np.atleast_1d(np.asarray(conf, dtype=np.float64))
    iou = np.atleast_1d(np.asarray(iou, dtype=np.float64))
    if conf.shape != iou.shape:
        raise ValueError(f"ce_loss: conf shape {conf.shape} vs iou shape {iou.shape}")
    if conf.size == 0:
        return 0.0, np.zeros_like(conf)
    c = _clamped(conf)
    q = _clamped(iou)
    value = float(np.mean(-np.log(c) - np.log(q)))
    grad = (-1.0 / c) / conf.size
    return value, grad


@dataclass
class LossBreakdown:
    """Named parts of the detection objective."""

    cls: float = 0.0
    reg: float = 0.0
    ims: float = 0.0
    mc: float = 0.0
    ce: float = 0.0


def rpn_total_loss(parts: LossBreakdown, beta: float = 5.0) -> float:
    """cls + reg + ims + mc + beta * ce."""
    return parts.cls + parts.reg + parts.ims + parts.mc + beta * parts.ce


# -- bin-based box encoding ---------------------------------------------------------


@dataclass
class BoxCodecConfig:
    """Layout of the per-point box regression head.

    Ground-plane offsets along x and z are classified into bins centered at
    integer multiples of ``bin_size`` (bin k covers
    [k*bs - bs/2, k*bs + bs/2)), k in [-bins_per_side, +bins_per_side],
    with a sub-bin residual in bin units. Yaw uses ``n_bins_yaw`` uniform
    bins over [-pi, pi) (residual measured from the bin center, in bin
    widths, wrapping across the seam). The vertical offset and the three
    sizes are plain residuals: meters, and meters against the mean sizes.
    """

    bin_size: float = 0.5
    bins_per_side: int = 6
    n_bins_yaw: int = 12
    mean_l: float = 3.8
    mean_h: float = 1.5
    mean_w: float = 1.7

    @property
    def n_bins_xz(self) -> int:
        return 2 * self.bins_per_side + 1

    @property
    def logits_width(self) -> int:
        return 2 * self.n_bins_xz + self.n_bins_yaw

    @property
    def head_width(self) -> int:
        # bin logits for x, z, yaw followed by 7 residuals
        # (x, z, yaw in bin units; y in meters; l, h, w against the means)
        return self.logits_width + 7

    @property
    def yaw_bin_width(self) -> float:
        return 2.0 * math.pi / self.n_bins_yaw

    def yaw_bin_center(self, k) -> float:
        return -math.pi + (np.asarray(k) + 0.5) * self.yaw_bin_width

    def mean_sizes(self) -> np.ndarray:
        return np.array([self.mean_l, self.mean_h, self.mean_w])


@dataclass
class RegTargets:
    """Encoded regression target for one (point, box) pair."""

    bin_x: int
    bin_z: int
    bin_yaw: int
    # residual order: x, z, yaw, y, l, h, w
    res: np.ndarray


def encode_reg_targets(point, box: Box3D, codec: BoxCodecConfig) -> RegTargets:
    """Encode a box relative to one of its points."""
    px, py, pz = (float(v) for v in np.asarray(point, dtype=np.float64))
    bs = codec.bin_size
    k = codec.bins_per_side

    def enc_axis(delta):
        b = int(np.clip(round(delta / bs), -k, k))
        return b, (delta - b * bs) / bs

    bx, rx = enc_axis(box.x - px)
    bz, rz = enc_axis(box.z - pz)

    t = wrap_angle(box.yaw)
    wbin = codec.yaw_bin_width
    byaw = int(np.floor((t + math.pi) / wbin)) % codec.n_bins_yaw
    ryaw = (t - codec.yaw_bin_center(byaw)) / wbin

    res = np.array(
        [
            rx,
            rz,
            ryaw,
            box.y - py,
            box.l - codec.mean_l,
            box.h - codec.mean_h,
            box.w - codec.mean_w,
        ]
    )
    return RegTargets(bin_x=bx, bin_z=bz, bin_yaw=byaw, res=res)


def decode_box(point, bin_x: int, bin_z: int, bin_yaw: int, res, codec: BoxCodecConfig) -> Box3D:
    """Inverse of :func:`encode_reg_targets`."""
    px, py, pz = (float(v) for v in np.asarray(point, dtype=np.float64))
    res = np.asarray(res, dtype=np.float64)
    if res.shape != (7,):
        raise ValueError(f"decode_box: residuals must be (7,), got {res.shape}")
    bs = codec.bin_size
    x = px + bin_x * bs + res[0] * bs
    z = pz + bin_z * bs + res[1] * bs
    yaw = wrap_angle(codec.yaw_bin_center(bin_yaw) + res[2] * codec.yaw_bin_width)
    y = py + res[3]
    l = codec.mean_l + res[4]
    h = codec.mean_h + res[5]
    w = codec.mean_w + res[6]
    return Box3D(x, y, z, max(l, 1e-3), max(h, 1e-3), max(w, 1e-3), yaw)


def split_head(head_out, codec: BoxCodecConfig):
    """Slice a (n, head_width) array into (logits_x, logits_z, logits_yaw, res)."""
    head_out = np.asarray(head_out)
    if head_out.ndim != 2 or head_out.shape[1] != codec.head_width:
        raise ValueError(
            f"split_head: expected (n, {codec.head_width}), got {head_out.shape}"
        )
    nxz = codec.n_bins_xz
    lx = head_out[:, :nxz]
    lz = head_out[:, nxz : 2 * nxz]
    ly = head_out[:, 2 * nxz : 2 * nxz + codec.n_bins_yaw]
    res = head_out[:, codec.logits_width :]
    return lx, lz, ly, res


def _softmax_ce(logits, target_idx):
    """Row-wise cross entropy; returns (per_row_loss, grad_logits)."""
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sm = ez / ez.sum(axis=1, keepdims=True)
    rows = np.arange(len(logits))
    loss = -np.log(np.maximum(sm[rows, target_idx], CLAMP))
    grad = sm.copy()
    grad[rows, target_idx] -= 1.0
    return loss, grad


def _smooth_l1(diff, transition: float = 1.0):
    a = np.abs(diff)
    quad = a <= transition
    loss = np.where(quad, 0.5 * diff**2 / transition, a - 0.5 * transition)
    grad = np.where(quad, diff / transition, np.sign(diff))
    return loss, grad


def bin_reg_loss(head_out, bins_x, bins_z, bins_yaw, res_targets, codec: BoxCodecConfig):
    """Box regression objective over foreground points.

    ``head_out`` is (n, head_width); targets come from
    :func:`encode_reg_targets`. Per point: cross entropy over the three bin
    heads plus smooth-L1 (transition 1.0) over the seven residuals, averaged
    over points. Returns (value, grad_head_out). Empty input yields zero.
    """
    head_out = np.asarray(head_out, dtype=np.float64)
    n = len(head_out)
    if n == 0:
        return 0.0, np.zeros((0, codec.head_width))
    lx, lz, ly, res = split_head(head_out, codec)
    bx = np.asarray(bins_x, dtype=np.int64) + codec.bins_per_side  # shift to [0, n_bins)
    bz = np.asarray(bins_z, dtype=np.int64) + codec.bins_per_side
    by = np.asarray(bins_yaw, dtype=np.int64)
    if not ((0 <= bx).all() and (bx < codec.n_bins_xz).all()):
        raise ValueError("bin_reg_loss: x bin index out of range")
    if not ((0 <= bz).all() and (bz < codec.n_bins_xz).all()):
        raise ValueError("bin_reg_loss: z bin index out of range")
    if not ((0 <= by).all() and (by < codec.n_bins_yaw).all()):
        raise ValueError("bin_reg_loss: yaw bin index out of range")
    res_t = np.asarray(res_targets, dtype=np.float64)
    if res_t.shape != (n, 7):
        raise ValueError(f"bin_reg_loss: residual targets must be ({n}, 7), got {res_t.shape}")

    ce_x, g_lx = _softmax_ce(lx, bx)
    ce_z, g_lz = _softmax_ce(lz, bz)
    ce_y, g_ly = _softmax_ce(ly, by)
    sl1, g_res = _smooth_l1(res - res_t)

    value = float((ce_x + ce_z + ce_y + sl1.sum(axis=1)).mean())
    grad = np.concatenate([g_lx, g_lz, g_ly, g_res], axis=1) / n
    return value, grad
