"""Training and evaluation loops for the miniature detector.

Plain full-batch-of-frames SGD driver: shuffle frames each epoch, walk them
in consecutive mini-batches, average per-frame gradients, one optimizer step
per batch. Evaluation runs the detector on held-out frames, suppresses
duplicate proposals, and scores average precision against the frame boxes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..boxes3d import Detection, GroundTruth, eval_map_r40, nms
from ..losses import LossBreakdown
from .model import FrameCache, ToyModel, build_frame_cache


@dataclass
class EpochStats:
    """Per-frame means of the loss parts over one epoch."""

    parts: LossBreakdown
    total: float


@dataclass
class EvalStats:
    point_seg_acc: float
    image_seg_acc: float
    conf_gap_mean: float  # mean |C_p - C_i| at points with a valid projection
    conf_gap_var: float
    conf_gap_n: int  # how many point observations the gap stats pool
    ap: dict  # class name -> average precision
    n_detections: int
    detections: list = field(repr=False, default_factory=list)


@dataclass
class TrainReport:
    history: list  # EpochStats per epoch
    final: EvalStats
    n_train_frames: int
    batch_size: int
    seed: int
    lr: float
    weight_decay: float


def build_caches(frames, cfg) -> list:
    return [build_frame_cache(f, cfg, frame_seed=i) for i, f in enumerate(frames)]


def audit_image_isolation(model: ToyModel, cache: FrameCache) -> None:
    """Assert the point losses have no gradient path into the image stream.

    Only meaningful without fusion and without the consistency term; callers
    guard on that. Leaves the gradient buffers zeroed.
    """
    state = model.forward(cache)
    state.up_grads["ims"][...] = 0.0
    state.up_grads["cipt"][...] = 0.0
    model.store.zero_grads()
    model.backward(state, cache)
    bad = [
        n for n in model.store.names()
        if n.startswith("img.") and np.any(model.store.grads[n])
    ]
    model.store.zero_grads()
    if bad:
        raise AssertionError(
            f"image parameters received gradient from point losses: {bad}"
        )


def conf_gap(state, cache: FrameCache) -> np.ndarray:
    """|C_p - C_i| per point, restricted to points that project onto the image."""
    # c_a = (c_p + c_i)/2, so the gap is twice their distance
    return 2.0 * np.abs(state.c_a - state.c_p)[cache.coords_half.valid]


def evaluate(
    model: ToyModel,
    frames,
    iou_thresh: float = 0.5,
    bev: bool = False,
    frame_ids=None,
) -> EvalStats:
    cfg = model.cfg
    if frame_ids is None:
        frame_ids = [f"{i:06d}" for i in range(len(frames))]
    dets: list[Detection] = []
    gts: list[GroundTruth] = []
    pt_hits = pt_n = px_hits = px_n = 0
    gaps = []
    for i, (fid, frame) in enumerate(zip(frame_ids, frames)):
        cache = build_frame_cache(frame, cfg, frame_seed=i)
        state = model.forward(cache)
        boxes, scores = model.proposals(state, cache)
        for k in nms(boxes, scores):
            dets.append(Detection(fid, frame.classes[0], float(scores[k]), boxes[k]))
        for box, cls in zip(frame.boxes, frame.classes):
            gts.append(GroundTruth(fid, cls, box))
        pt_hits += int(np.sum((state.c_p > 0.5) == cache.point_mask))
        pt_n += len(cache.point_mask)
        px_hits += int(np.sum((state.c_i > 0.5) == cache.pix_mask_half))
        px_n += cache.pix_mask_half.size
        gaps.append(conf_gap(state, cache))
    gaps = np.concatenate(gaps) if gaps else np.zeros(0)
    return EvalStats(
        point_seg_acc=pt_hits / max(pt_n, 1),
        image_seg_acc=px_hits / max(px_n, 1),
        conf_gap_mean=float(gaps.mean()) if gaps.size else 0.0,
        conf_gap_var=float(gaps.var()) if gaps.size else 0.0,
        conf_gap_n=int(gaps.size),
        ap=eval_map_r40(dets, gts, iou_thresh, bev=bev),
        n_detections=len(dets),
        detections=dets,
    )


def train(
    model: ToyModel,
    train_frames,
    eval_frames,
    epochs: int,
    lr: float = 0.004,
    weight_decay: float = 0.001,
    batch_size: int = 4,
    seed: int = 0,
    iou_thresh: float = 0.25,
    bev: bool = False,
) -> TrainReport:
    """Fit the model on ``train_frames`` and score it on ``eval_frames``."""
    if epochs < 0:
        raise ValueError(f"epochs must be >= 0, got {epochs}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    cfg = model.cfg
    caches = build_caches(train_frames, cfg)
    if cfg.fusion_mode == "none" and not cfg.mc_on and caches:
        audit_image_isolation(model, caches[0])

    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(caches))
        sums = np.zeros(6)
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            share = 1.0 / len(batch)
            for fi in batch:
                state = model.forward(caches[fi])
                if not np.isfinite(state.total):
                    raise FloatingPointError(
                        f"non-finite loss at epoch {epoch}, frame {fi}: {state.total}"
                    )
                model.backward(state, caches[fi], scale=share)
                p = state.parts
                sums += (p.cls, p.reg, p.ims, p.mc, p.ce, state.total)
            model.store.adam_step(lr=lr, weight_decay=weight_decay)
        means = sums / max(len(order), 1)
        history.append(EpochStats(LossBreakdown(*means[:5]), float(means[5])))

    return TrainReport(
        history=history,
        final=evaluate(model, eval_frames, iou_thresh=iou_thresh, bev=bev),
        n_train_frames=len(train_frames),
        batch_size=batch_size,
        seed=seed,
        lr=lr,
        weight_decay=weight_decay,
    )
