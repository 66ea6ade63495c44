"""The miniature two-stream detector.

Geometric stream: per-point MLP stem, one farthest-point-sampling +
ball-grouping set-abstraction stage, inverse-distance feature propagation
back to every point. Image stream: two stride-2 3x3 conv blocks and a
half-resolution decoder head. Cross-modal blocks are inserted after each
encoder stage plus a final image-to-point fusion before the heads; mode
"none" builds no cross-modal parameters at all.

Everything runs in float64 with hand-written backward passes; `backward`
accumulates into the model's ParamStore so a finite-difference probe can
check any parameter end to end. The ce term treats the measured box IoU
as a constant; pass ``frozen_iou`` to evaluate the exact function that the
analytic gradient differentiates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..boxes3d import iou_3d, points_in_box
from ..fusion import FUSION_MODES, FusionBlock, LiFusion
from ..geometry import (
    PixelCoords,
    bilinear_sample,
    bilinear_sample_backward,
    project_points,
    scale_coords,
)
from ..losses import (
    BoxCodecConfig,
    LossBreakdown,
    bin_reg_loss,
    ce_loss,
    decode_box,
    encode_reg_targets,
    focal_loss,
    mc_loss,
    rpn_total_loss,
    split_head,
)
from ..nn import (
    ParamStore,
    conv3x3,
    conv3x3_backward,
    init_conv3x3,
    init_linear,
    linear,
    linear_backward,
    sigmoid_act,
    sigmoid_backward,
    tanh_act,
    tanh_backward,
    upsample_nearest,
    upsample_nearest_backward,
)
from ..pointops import ball_group, farthest_point_sampling
from ..synth import pixel_silhouette

MODEL_MODES = FUSION_MODES + ("none",)

XYZ_SCALE = 20.0  # point coordinates are divided by this before the stem


@dataclass
class ToyModelConfig:
    point_width: int = 8
    point_width_sa: int = 16
    image_width: int = 6
    image_width_2: int = 12
    image_head_width: int = 8
    n_centers: int = 64
    ball_radius: float = 4.0
    max_neighbors: int = 16
    fusion_mode: str = "cascade"
    attention: bool = True
    mc_on: bool = True
    tau: float = 0.2
    lam1: float = 0.5
    lam2: float = 0.5
    beta: float = 5.0
    score_thresh: float = 0.3
    ce_cap: int = 32
    codec: BoxCodecConfig = field(default_factory=BoxCodecConfig)
    init_seed: int = 0

    def validate(self) -> None:
        if self.fusion_mode not in MODEL_MODES:
            raise ValueError(
                f"unknown fusion mode {self.fusion_mode!r}; pick one of {MODEL_MODES}"
            )
        widths = (
            self.point_width, self.point_width_sa, self.image_width,
            self.image_width_2, self.image_head_width, self.n_centers,
            self.max_neighbors, self.ce_cap,
        )
        if any(w < 1 for w in widths):
            raise ValueError(f"all widths/counts must be >= 1, got {widths}")
        if self.ball_radius <= 0:
            raise ValueError(f"ball_radius must be positive, got {self.ball_radius}")


@dataclass
class FrameCache:
    """Per-frame quantities that do not depend on parameters."""

    pf: np.ndarray  # (n, 4) stem input
    img: np.ndarray  # (h, w, 3) in [0, 1]
    coords_full: PixelCoords
    coords_half: PixelCoords
    coords_q_centers: PixelCoords
    fps: np.ndarray  # (m,)
    group_idx: np.ndarray  # (m, k)
    rel: np.ndarray  # (m, k, 3)
    nbr: np.ndarray  # (n, 3) center indices for feature propagation
    nbr_w: np.ndarray  # (n, 3) inverse-distance weights, rows sum to 1
    point_mask: np.ndarray  # (n,)
    pix_mask_half: np.ndarray  # (h/2, w/2)
    fg_idx: np.ndarray
    bins_x: np.ndarray
    bins_z: np.ndarray
    bins_yaw: np.ndarray
    res: np.ndarray  # (n_fg, 7)
    ce_idx: np.ndarray  # point indices of the confidence-consistency candidates
    ce_gt: list  # matching ground-truth box per candidate
    xyz: np.ndarray
    boxes: list
    frame_key: object = None


@dataclass
class StepState:
    parts: LossBreakdown
    total: float
    c_p: np.ndarray  # (n,)
    c_i: np.ndarray  # (h2, w2)
    c_a: np.ndarray  # (n,)
    iou: np.ndarray  # measured IoUs at the ce candidates
    box_out: np.ndarray  # (n, head_width)
    tapes: dict
    up_grads: dict


def half_projection(p2) -> np.ndarray:
    return np.diag([0.5, 0.5, 1.0]) @ np.asarray(p2, dtype=np.float64)


def build_frame_cache(sample, cfg: ToyModelConfig, frame_seed: int) -> FrameCache:
    """Precompute projections, groupings, and training targets for a frame."""
    xyz = sample.points.xyz
    n = len(xyz)
    if n < cfg.n_centers:
        raise ValueError(
            f"frame has {n} points, fewer than n_centers={cfg.n_centers}"
        )
    h, w = sample.image.shape[:2]
    half_hw = (-(-h // 2), -(-w // 2))
    quarter_hw = (-(-half_hw[0] // 2), -(-half_hw[1] // 2))

    coords_full = project_points(xyz, sample.calib.p2, (h, w))
    coords_half = scale_coords(coords_full, 2, half_hw)
    fps = farthest_point_sampling(xyz, cfg.n_centers, seed=frame_seed)
    groups = ball_group(xyz, xyz[fps], cfg.ball_radius, cfg.max_neighbors)
    if (groups.count == 0).any():
        raise ValueError("empty ball group; centers should be their own neighbors")
    rel = (xyz[groups.idx] - xyz[fps][:, None, :]) / cfg.ball_radius
    centers_full = PixelCoords(coords_full.uv[fps], coords_full.valid[fps], (h, w))
    coords_q_centers = scale_coords(centers_full, 4, quarter_hw)

    # 3 nearest centers per point, inverse-distance weights
    d2 = np.sum((xyz[:, None, :] - xyz[fps][None, :, :]) ** 2, axis=2)
    k = min(3, cfg.n_centers)
    nbr = np.argsort(d2, axis=1, kind="stable")[:, :k]
    dist = np.sqrt(np.take_along_axis(d2, nbr, axis=1))
    inv = 1.0 / np.maximum(dist, 1e-10)
    nbr_w = inv / inv.sum(axis=1, keepdims=True)

    pix_mask_half = pixel_silhouette(sample.boxes, half_projection(sample.calib.p2), half_hw)

    # targets: each foreground point regresses the first box containing it
    point_mask = np.zeros(n, dtype=bool)
    owner = np.full(n, -1, dtype=np.int64)
    for bi, box in enumerate(sample.boxes):
        inside = points_in_box(xyz, box) & ~point_mask
        owner[inside] = bi
        point_mask |= inside
    fg_idx = np.flatnonzero(point_mask)
    bins_x = np.zeros(len(fg_idx), dtype=np.int64)
    bins_z = np.zeros(len(fg_idx), dtype=np.int64)
    bins_yaw = np.zeros(len(fg_idx), dtype=np.int64)
    res = np.zeros((len(fg_idx), 7))
    for row, pi in enumerate(fg_idx):
        t = encode_reg_targets(xyz[pi], sample.boxes[owner[pi]], cfg.codec)
        bins_x[row], bins_z[row], bins_yaw[row] = t.bin_x, t.bin_z, t.bin_yaw
        res[row] = t.res
    if len(fg_idx) > cfg.ce_cap:
        pick = np.unique(np.linspace(0, len(fg_idx) - 1, cfg.ce_cap).round().astype(int))
    else:
        pick = np.arange(len(fg_idx))
    ce_idx = fg_idx[pick]
    ce_gt = [sample.boxes[owner[pi]] for pi in ce_idx]

    return FrameCache(
        pf=np.column_stack([xyz / XYZ_SCALE, sample.points.intensity]),
        img=sample.image / 255.0,
        coords_full=coords_full,
        coords_half=coords_half,
        coords_q_centers=coords_q_centers,
        fps=fps,
        group_idx=groups.idx,
        rel=rel,
        nbr=nbr,
        nbr_w=nbr_w,
        point_mask=point_mask,
        pix_mask_half=pix_mask_half,
        fg_idx=fg_idx,
        bins_x=bins_x,
        bins_z=bins_z,
        bins_yaw=bins_yaw,
        res=res,
        ce_idx=ce_idx,
        ce_gt=ce_gt,
        xyz=xyz,
        boxes=list(sample.boxes),
    )


class ToyModel:
    def __init__(self, cfg: ToyModelConfig):
        cfg.validate()
        self.cfg = cfg
        self.store = ParamStore()
        rng = np.random.default_rng(cfg.init_seed)
        fused = cfg.fusion_mode != "none"
        d_p0, d_p1 = cfg.point_width, cfg.point_width_sa
        d_i0, d_i1, d_u = cfg.image_width, cfg.image_width_2, cfg.image_head_width

        def lin(name, d_in, d_out):
            w, b = init_linear(rng, d_in, d_out)
            return self.store.add(f"{name}.w", w), self.store.add(f"{name}.b", b)

        def conv(name, c_in, c_out):
            k, b = init_conv3x3(rng, c_in, c_out)
            return self.store.add(f"{name}.k", k), self.store.add(f"{name}.b", b)

        self.stem = lin("pt.stem", 4, d_p0)
        self.conv1 = conv("img.conv1", 3, d_i0)
        self.block1 = (
            FusionBlock(self.store, "fuse1", d_p0, d_i0, cfg.fusion_mode, rng,
                        attention=cfg.attention) if fused else None
        )
        self.sa = lin("pt.sa", d_p0 + 3, d_p1)
        self.conv2 = conv("img.conv2", d_i0, d_i1)
        self.block2 = (
            FusionBlock(self.store, "fuse2", d_p1, d_i1, cfg.fusion_mode, rng,
                        attention=cfg.attention) if fused else None
        )
        self.fp = lin("pt.fp", d_p1 + d_p0, d_p1)
        self.head = conv("img.head", d_i0 + d_i1, d_u)
        self.li_final = (
            LiFusion(self.store, "fuse_final", d_p1, d_u, rng,
                     attention=cfg.attention) if fused else None
        )
        self.pseg = lin("pt.seg", d_p1, 1)
        self.pbox = lin("pt.box", d_p1, cfg.codec.head_width)
        self.iseg = lin("img.seg", d_u, 1)

    def n_params(self) -> int:
        return self.store.n_params()

    # -- forward -------------------------------------------------------------

    def forward(self, cache: FrameCache, frozen_iou=None) -> StepState:
        cfg = self.cfg
        fused = self.block1 is not None
        t = {}

        z, t["stem"] = linear(cache.pf, *self.stem)
        f_p0, t["stem_act"] = tanh_act(z)
        z, t["conv1"] = conv3x3(cache.img, *self.conv1, stride=2)
        f_i1, t["c1_act"] = tanh_act(z)
        if fused:
            f_ep0, f_ei1, t["fuse1"] = self.block1.forward(f_p0, f_i1, cache.coords_half)
        else:
            f_ep0, f_ei1 = f_p0, f_i1

        grouped = f_ep0[cache.group_idx]  # (m, k, d_p0)
        sa_in = np.concatenate([grouped, cache.rel], axis=2)
        z, t["sa"] = linear(sa_in, *self.sa)
        h_sa, t["sa_act"] = tanh_act(z)
        amax = h_sa.argmax(axis=1)  # (m, d_p1)
        t["sa_amax"] = amax
        f_c0 = np.take_along_axis(h_sa, amax[:, None, :], axis=1)[:, 0, :]

        z, t["conv2"] = conv3x3(f_ei1, *self.conv2, stride=2)
        f_i2, t["c2_act"] = tanh_act(z)
        if fused:
            f_ec, f_ei2, t["fuse2"] = self.block2.forward(f_c0, f_i2, cache.coords_q_centers)
        else:
            f_ec, f_ei2 = f_c0, f_i2

        interp = np.einsum("nk,nkd->nd", cache.nbr_w, f_ec[cache.nbr])
        fp_in = np.concatenate([interp, f_ep0], axis=1)
        z, t["fp"] = linear(fp_in, *self.fp)
        f_fp, t["fp_act"] = tanh_act(z)

        half_hw = f_i1.shape[:2]
        u1 = f_ei1
        u2, t["up2"] = upsample_nearest(f_ei2, 2, out_hw=half_hw)
        dec_in = np.concatenate([u1, u2], axis=2)
        z, t["head"] = conv3x3(dec_in, *self.head, stride=1)
        f_u, t["head_act"] = tanh_act(z)

        if fused:
            f_u_pt, t["fsamp"] = bilinear_sample(f_u, cache.coords_half)
            f_pt, t["fuse_final"] = self.li_final.forward(f_fp, f_u_pt)
        else:
            f_pt = f_fp

        z, t["pseg"] = linear(f_pt, *self.pseg)
        cp1, t["pseg_act"] = sigmoid_act(z)
        c_p = cp1[:, 0]
        box_out, t["box"] = linear(f_pt, *self.pbox)
        z, t["iseg"] = linear(f_u, *self.iseg)
        ci1, t["iseg_act"] = sigmoid_act(z)
        c_i = ci1[:, :, 0]
        ci_pt1, t["cisamp"] = bilinear_sample(ci1, cache.coords_half)
        c_i_pt = ci_pt1[:, 0]
        c_a = 0.5 * (c_p + c_i_pt)

        # -- losses ------------------------------------------------------------
        parts = LossBreakdown()
        parts.cls, g_cp = focal_loss(c_p, cache.point_mask)
        v, g_ims = focal_loss(c_i.ravel(), cache.pix_mask_half.ravel())
        parts.ims = v
        g_ims = g_ims.reshape(c_i.shape + (1,))

        g_cipt = np.zeros_like(c_i_pt)
        if cfg.mc_on:
            parts.mc, gmc_p, gmc_i = mc_loss(
                c_p, c_i_pt, cache.coords_half.valid,
                tau=cfg.tau, lam1=cfg.lam1, lam2=cfg.lam2,
            )
            g_cp = g_cp + gmc_p
            g_cipt = g_cipt + gmc_i

        fg = cache.fg_idx
        parts.reg, g_head_fg = bin_reg_loss(
            box_out[fg], cache.bins_x, cache.bins_z, cache.bins_yaw, cache.res, cfg.codec
        )
        g_box = np.zeros_like(box_out)
        g_box[fg] = g_head_fg

        cand = cache.ce_idx
        if frozen_iou is not None:
            iou = np.asarray(frozen_iou, dtype=np.float64)
        else:
            dec = self.decode_boxes(box_out, cache, cand)
            iou = np.array([iou_3d(d, g) for d, g in zip(dec, cache.ce_gt)])
        if cfg.fusion_mode == "none":
            conf = c_p[cand]
        else:
            conf = c_a[cand]
        parts.ce, g_conf = ce_loss(conf, iou)
        g_conf = cfg.beta * g_conf
        if cand.size:
            if cfg.fusion_mode == "none":
                g_cp[cand] += g_conf
            else:
                g_cp[cand] += 0.5 * g_conf
                g_cipt[cand] += 0.5 * g_conf

        return StepState(
            parts=parts,
            total=rpn_total_loss(parts, beta=cfg.beta),
            c_p=c_p,
            c_i=c_i,
            c_a=c_a,
            iou=iou,
            box_out=box_out,
            tapes=t,
            up_grads={"cp": g_cp, "cipt": g_cipt, "ims": g_ims, "box": g_box},
        )

    def decode_boxes(self, box_out, cache: FrameCache, idx) -> list:
        """Decode one box per selected point from the regression head."""
        lx, lz, ly, res = split_head(np.asarray(box_out)[idx], self.cfg.codec)
        k = self.cfg.codec.bins_per_side
        out = []
        for row, pi in enumerate(np.asarray(idx)):
            out.append(
                decode_box(
                    cache.xyz[pi],
                    int(lx[row].argmax()) - k,
                    int(lz[row].argmax()) - k,
                    int(ly[row].argmax()),
                    res[row],
                    self.cfg.codec,
                )
            )
        return out

    # -- backward ------------------------------------------------------------

    def backward(self, state: StepState, cache: FrameCache, scale: float = 1.0) -> None:
        """Accumulate parameter gradients of ``scale * total`` into the store."""
        cfg = self.cfg
        fused = self.block1 is not None
        t = state.tapes
        acc = self.store.accumulate

        g_cp = state.up_grads["cp"][:, None] * scale
        g_cipt = state.up_grads["cipt"][:, None] * scale
        g_ims = state.up_grads["ims"] * scale
        g_box = state.up_grads["box"] * scale

        gz = sigmoid_backward(t["pseg_act"], g_cp)
        g_fpt, gw, gb = linear_backward(t["pseg"], gz)
        acc("pt.seg.w", gw)
        acc("pt.seg.b", gb)
        gx, gw, gb = linear_backward(t["box"], g_box)
        acc("pt.box.w", gw)
        acc("pt.box.b", gb)
        g_fpt = g_fpt + gx

        g_ci1 = g_ims + bilinear_sample_backward(t["cisamp"], g_cipt)
        gz = sigmoid_backward(t["iseg_act"], g_ci1)
        g_fu, gw, gb = linear_backward(t["iseg"], gz)
        acc("img.seg.w", gw)
        acc("img.seg.b", gb)

        if fused:
            g_ffp, g_fupt = self.li_final.backward(t["fuse_final"], g_fpt)
            g_fu = g_fu + bilinear_sample_backward(t["fsamp"], g_fupt)
        else:
            g_ffp = g_fpt

        gz = tanh_backward(t["head_act"], g_fu)
        g_dec, gk, gb = conv3x3_backward(t["head"], gz)
        acc("img.head.k", gk)
        acc("img.head.b", gb)
        d_i0 = self.cfg.image_width
        g_ei1 = g_dec[:, :, :d_i0]
        g_ei2 = upsample_nearest_backward(t["up2"], g_dec[:, :, d_i0:])

        gz = tanh_backward(t["fp_act"], g_ffp)
        g_fpin, gw, gb = linear_backward(t["fp"], gz)
        acc("pt.fp.w", gw)
        acc("pt.fp.b", gb)
        d_p1 = cfg.point_width_sa
        g_interp = g_fpin[:, :d_p1]
        g_ep0 = g_fpin[:, d_p1:].copy()
        g_fec = np.zeros((cfg.n_centers, d_p1))
        np.add.at(g_fec, cache.nbr, cache.nbr_w[:, :, None] * g_interp[:, None, :])

        if fused:
            g_fc0, g_fi2 = self.block2.backward(t["fuse2"], g_fec, g_ei2)
        else:
            g_fc0, g_fi2 = g_fec, g_ei2

        gz = tanh_backward(t["c2_act"], g_fi2)
        gx, gk, gb = conv3x3_backward(t["conv2"], gz)
        acc("img.conv2.k", gk)
        acc("img.conv2.b", gb)
        g_ei1 = g_ei1 + gx

        # route the pooled gradient back to each channel's argmax slot
        amax = t["sa_amax"]
        m, d = g_fc0.shape
        g_hsa = np.zeros((m, cache.group_idx.shape[1], d))
        rows = np.arange(m)[:, None]
        cols = np.arange(d)[None, :]
        g_hsa[rows, amax, cols] = g_fc0
        gz = tanh_backward(t["sa_act"], g_hsa)
        g_sain, gw, gb = linear_backward(t["sa"], gz)
        acc("pt.sa.w", gw)
        acc("pt.sa.b", gb)
        g_grouped = g_sain[:, :, : cfg.point_width]
        g_ep0_sa = np.zeros((len(cache.pf), cfg.point_width))
        np.add.at(g_ep0_sa, cache.group_idx, g_grouped)
        g_ep0 = g_ep0 + g_ep0_sa

        if fused:
            g_p0, g_i1 = self.block1.backward(t["fuse1"], g_ep0, g_ei1)
        else:
            g_p0, g_i1 = g_ep0, g_ei1

        gz = tanh_backward(t["c1_act"], g_i1)
        _, gk, gb = conv3x3_backward(t["conv1"], gz)
        acc("img.conv1.k", gk)
        acc("img.conv1.b", gb)
        gz = tanh_backward(t["stem_act"], g_p0)
        _, gw, gb = linear_backward(t["stem"], gz)
        acc("pt.stem.w", gw)
        acc("pt.stem.b", gb)

    # -- inference -----------------------------------------------------------

    def score_for_proposals(self, state: StepState) -> np.ndarray:
        """Per-point proposal score: the fused average when the image takes
        part in the point pipeline, the raw point confidence otherwise."""
        return state.c_p if self.cfg.fusion_mode == "none" else state.c_a

    def proposals(self, state: StepState, cache: FrameCache):
        """(boxes, scores) for points scoring above the threshold."""
        scores = self.score_for_proposals(state)
        idx = np.flatnonzero(scores > self.cfg.score_thresh)
        return self.decode_boxes(state.box_out, cache, idx), scores[idx]
