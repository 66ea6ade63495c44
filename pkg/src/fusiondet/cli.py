"""Command-line front end.

Subcommands cover the whole workflow: gradient audits, dataset generation
and corruption, training, standalone evaluation, and one-axis grids. Every
artifact embeds the seeds and the configuration hash that produced it, and
the JSON/CSV writers are deterministic: the same invocation writes the same
bytes.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .checks import all_passed, format_check_results, run_gradient_checks
from .config import apply_overrides, config_hash, load_config, to_dict
from .synth import (
    load_dataset,
    make_dataset,
    perturb_sample,
    sparsify_sample,
    write_dataset,
)
from .toy.ablate import ABLATION_AXES, run_ablation, scaled_perturbation
from .toy.model import ToyModel
from .toy.train import evaluate, train


def _cfg_from(args):
    return apply_overrides(load_config(args.config), args.set)


def _write_json(path, payload) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_detections_csv(path, detections) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_id", "class", "score", "x", "y", "z", "l", "h", "w", "yaw"])
        for d in detections:
            b = d.box
            # repr of the coerced float survives a read-back exactly; numpy
            # scalars would serialize as wrapper text instead of numbers
            w.writerow(
                [d.frame_id, d.cls, repr(float(d.score))]
                + [repr(float(v)) for v in (b.x, b.y, b.z, b.l, b.h, b.w, b.yaw)]
            )


def _final_to_dict(final) -> dict:
    return {
        "point_seg_acc": final.point_seg_acc,
        "image_seg_acc": final.image_seg_acc,
        "conf_gap_mean": final.conf_gap_mean,
        "conf_gap_var": final.conf_gap_var,
        "ap": dict(final.ap),
        "n_detections": final.n_detections,
    }


def _frames_for(cfg, n, base_seed, data_dir):
    if data_dir is not None:
        return load_dataset(data_dir)
    return make_dataset(cfg.scene, n, base_seed=base_seed)


# -- subcommands ---------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    results = run_gradient_checks(
        n_seeds=args.seeds, include_model=not args.skip_model
    )
    print(format_check_results(results))
    return 0 if all_passed(results) else 1


def cmd_gen_data(args) -> int:
    cfg = _cfg_from(args)
    frames = make_dataset(cfg.scene, args.frames, base_seed=args.base_seed)
    write_dataset(args.out, frames)
    _write_json(
        Path(args.out) / "manifest.json",
        {
            "config_sha256": config_hash(cfg),
            "n_frames": args.frames,
            "base_seed": args.base_seed,
        },
    )
    print(f"wrote {args.frames} frames to {args.out}")
    return 0


def cmd_sparsify(args) -> int:
    cfg = _cfg_from(args)
    frames = load_dataset(args.data)
    out = [
        sparsify_sample(f, args.keep_every, cfg.scene.n_points, seed=args.seed + i)
        for i, f in enumerate(frames)
    ]
    write_dataset(args.out, out)
    _write_json(
        Path(args.out) / "manifest.json",
        {
            "config_sha256": config_hash(cfg),
            "n_frames": len(out),
            "keep_every": args.keep_every,
            "seed": args.seed,
        },
    )
    print(f"kept every {args.keep_every}th beam over {len(out)} frames -> {args.out}")
    return 0


def cmd_perturb(args) -> int:
    cfg = _cfg_from(args)
    frames = load_dataset(args.data)
    pcfg = scaled_perturbation(args.strength)
    out = [perturb_sample(f, pcfg, seed=args.seed + i) for i, f in enumerate(frames)]
    write_dataset(args.out, out)
    _write_json(
        Path(args.out) / "manifest.json",
        {
            "config_sha256": config_hash(cfg),
            "n_frames": len(out),
            "strength": args.strength,
            "seed": args.seed,
        },
    )
    print(f"corrupted {len(out)} frames at strength {args.strength} -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _cfg_from(args)
    tc = cfg.train
    train_frames = _frames_for(cfg, tc.n_train, 2 * tc.data_seed, args.data)
    eval_frames = _frames_for(cfg, tc.n_eval, 2 * tc.data_seed + 1, args.eval_data)
    model = ToyModel(cfg.model)
    report = train(
        model, train_frames, eval_frames, tc.epochs,
        lr=tc.lr, weight_decay=tc.weight_decay, batch_size=tc.batch_size,
        seed=tc.seed, iou_thresh=tc.iou_thresh, bev=tc.bev,
    )
    out_dir = Path(args.out_dir)
    payload = {
        "config_sha256": config_hash(cfg),
        "config": to_dict(cfg),
        "seed": tc.seed,
        "n_train_frames": report.n_train_frames,
        "history": [
            {
                "epoch": i,
                "cls": e.parts.cls,
                "reg": e.parts.reg,
                "ims": e.parts.ims,
                "mc": e.parts.mc,
                "ce": e.parts.ce,
                "total": e.total,
            }
            for i, e in enumerate(report.history)
        ],
        "final": _final_to_dict(report.final),
    }
    _write_json(out_dir / "report.json", payload)
    _write_detections_csv(out_dir / "detections.csv", report.final.detections)
    if args.save_params:
        model.store.save(args.save_params)
    last = report.history[-1].total if report.history else float("nan")
    ap = payload["final"]["ap"]
    print(
        f"trained {tc.epochs} epochs on {report.n_train_frames} frames; "
        f"final loss {last:.4f}, ap {ap}"
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _cfg_from(args)
    tc = cfg.train
    frames = _frames_for(cfg, tc.n_eval, 2 * tc.data_seed + 1, args.data)
    model = ToyModel(cfg.model)
    if args.params:
        model.store.restore(args.params)
    stats = evaluate(model, frames, iou_thresh=tc.iou_thresh, bev=tc.bev)
    out_dir = Path(args.out_dir)
    _write_json(
        out_dir / "metrics.json",
        {
            "config_sha256": config_hash(cfg),
            "n_frames": len(frames),
            "final": _final_to_dict(stats),
        },
    )
    _write_detections_csv(out_dir / "detections.csv", stats.detections)
    print(f"evaluated {len(frames)} frames: ap {dict(stats.ap)}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _cfg_from(args)
    import yaml

    grid = [yaml.safe_load(v) for v in args.grid.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    tc = cfg.train
    table = run_ablation(
        args.axis, grid, seeds,
        scene_cfg=cfg.scene, model_cfg=cfg.model,
        n_train=tc.n_train, n_eval=tc.n_eval, epochs=tc.epochs,
        lr=tc.lr, weight_decay=tc.weight_decay, batch_size=tc.batch_size,
        iou_thresh=tc.iou_thresh, bev=tc.bev,
    )
    print(table.format())
    if args.out_dir:
        payload = {"config_sha256": config_hash(cfg), **table.as_dict()}
        _write_json(Path(args.out_dir) / "ablation.json", payload)
    return 0


# -- parser --------------------------------------------------------------------------


def _add_config_args(sp) -> None:
    sp.add_argument("--config", default=None, help="YAML config file")
    sp.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="dotted config override, e.g. model.fusion_mode=li_only",
    )


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="fusiondet",
        description="gated camera-lidar fusion experiments on synthetic scenes",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gradcheck", help="finite-difference audit of every layer")
    sp.add_argument("--seeds", type=int, default=10)
    sp.add_argument("--skip-model", action="store_true")
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("gen-data", help="write a synthetic frame directory")
    _add_config_args(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--frames", type=int, default=20)
    sp.add_argument("--base-seed", type=int, default=0)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("sparsify", help="keep every k-th beam of a frame directory")
    _add_config_args(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--keep-every", type=int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_sparsify)

    sp = sub.add_parser("perturb", help="corrupt a frame directory for robustness tests")
    _add_config_args(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--strength", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_perturb)

    sp = sub.add_parser("train", help="train the detector and write a report")
    _add_config_args(sp)
    sp.add_argument("--data", default=None, help="frame directory (default: generate)")
    sp.add_argument("--eval-data", default=None)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--save-params", default=None, help="checkpoint path (.npz)")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_args(sp)
    sp.add_argument("--params", default=None, help="checkpoint from train --save-params")
    sp.add_argument("--data", default=None)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ablate", help="one-axis grid of training runs")
    _add_config_args(sp)
    sp.add_argument("--axis", required=True, choices=ABLATION_AXES)
    sp.add_argument("--grid", required=True, help="comma-separated values")
    sp.add_argument("--seeds", required=True, help="comma-separated integers")
    sp.add_argument("--out-dir", default=None)
    sp.set_defaults(fn=cmd_ablate)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
