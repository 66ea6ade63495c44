"""One-axis grid experiments with seed-matched datasets.

Every cell on the axis sees the same per-seed train/eval split, so cell
differences come from the configuration change alone plus shared sampling
noise. A crashing cell is recorded and the sweep continues.
"""

from __future__ import annotations

import traceback
from dataclasses import dataclass, field, replace

import numpy as np

from ..pointops import PerturbationConfig
from ..synth import SceneConfig, make_dataset, perturb_sample, sparsify_sample
from .model import ToyModel, ToyModelConfig
from .train import train

ABLATION_AXES = ("fusion_mode", "mc_loss", "beam_density", "perturbation")

METRICS = (
    "ap",
    "point_seg_acc",
    "image_seg_acc",
    "conf_gap_mean",
    "conf_gap_var",
    "final_total",
)


def scaled_perturbation(strength: float) -> PerturbationConfig:
    """Corruption dialed between identity (0) and the stock settings (1)."""
    if strength < 0:
        raise ValueError(f"perturbation strength must be >= 0, got {strength}")
    base = PerturbationConfig()
    return PerturbationConfig(
        gain_lo=1.0 + (base.gain_lo - 1.0) * strength,
        gain_hi=1.0 + (base.gain_hi - 1.0) * strength,
        offset=base.offset * strength,
        noise_points=int(round(base.noise_points * strength)),
        noise_radius=base.noise_radius,
    )


@dataclass
class CellResult:
    label: str
    value: object
    metrics: dict = field(default_factory=dict)  # metric name -> per-seed list
    error: str | None = None

    def mean(self, key: str) -> float:
        return float(np.mean(self.metrics[key]))

    def std(self, key: str) -> float:
        return float(np.std(self.metrics[key]))


@dataclass
class ComparisonTable:
    axis: str
    cells: list
    seeds: list

    def cell(self, label: str) -> CellResult:
        for c in self.cells:
            if c.label == label:
                return c
        raise KeyError(f"no cell labelled {label!r} on axis {self.axis}")

    def format(self) -> str:
        head = [self.axis] + list(METRICS)
        rows = [head]
        for c in self.cells:
            if c.error is not None:
                rows.append([c.label, "FAILED: " + c.error.splitlines()[0]])
                continue
            rows.append(
                [c.label] + [f"{c.mean(m):.4f}±{c.std(m):.4f}" for m in METRICS]
            )
        widths = [
            max(len(r[i]) for r in rows if i < len(r))
            for i in range(len(head))
        ]
        lines = []
        for r in rows:
            lines.append("  ".join(v.ljust(widths[i]) for i, v in enumerate(r)).rstrip())
        return "\n".join(lines)

    def as_dict(self) -> dict:
        return {
            "axis": self.axis,
            "seeds": list(self.seeds),
            "cells": [
                {
                    "label": c.label,
                    "value": c.value,
                    "error": c.error,
                    "metrics": {k: list(map(float, v)) for k, v in c.metrics.items()},
                }
                for c in self.cells
            ],
        }


def _metrics_from(report) -> dict:
    final = report.final
    return {
        "ap": float(np.mean(list(final.ap.values()))) if final.ap else 0.0,
        "point_seg_acc": final.point_seg_acc,
        "image_seg_acc": final.image_seg_acc,
        "conf_gap_mean": final.conf_gap_mean,
        "conf_gap_var": final.conf_gap_var,
        "final_total": report.history[-1].total if report.history else float("nan"),
    }


def run_ablation(
    axis: str,
    grid,
    seeds,
    scene_cfg: SceneConfig | None = None,
    model_cfg: ToyModelConfig | None = None,
    n_train: int = 200,
    n_eval: int = 50,
    epochs: int = 30,
    lr: float = 0.004,
    weight_decay: float = 0.001,
    batch_size: int = 4,
    iou_thresh: float = 0.25,
    bev: bool = False,
) -> ComparisonTable:
    """Train one model per (grid value, seed) and tabulate the eval metrics."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown axis {axis!r}; pick one of {ABLATION_AXES}")
    if not grid:
        raise ValueError("empty grid")
    if not seeds:
        raise ValueError("no seeds")
    scene_cfg = scene_cfg or SceneConfig()
    model_cfg = model_cfg or ToyModelConfig()

    datasets = {
        s: (
            make_dataset(scene_cfg, n_train, base_seed=2 * s),
            make_dataset(scene_cfg, n_eval, base_seed=2 * s + 1),
        )
        for s in seeds
    }

    cells = []
    for value in grid:
        cell = CellResult(label=str(value), value=value, metrics={m: [] for m in METRICS})
        cells.append(cell)
        try:
            for s in seeds:
                train_frames, eval_frames = datasets[s]
                cfg = replace(model_cfg, init_seed=s)
                if axis == "fusion_mode":
                    cfg = replace(cfg, fusion_mode=str(value))
                elif axis == "mc_loss":
                    cfg = replace(cfg, mc_on=bool(value))
                elif axis == "beam_density":
                    ke = int(value)
                    train_frames = [
                        sparsify_sample(f, ke, scene_cfg.n_points, seed=i)
                        for i, f in enumerate(train_frames)
                    ]
                    eval_frames = [
                        sparsify_sample(f, ke, scene_cfg.n_points, seed=i)
                        for i, f in enumerate(eval_frames)
                    ]
                elif axis == "perturbation":
                    pcfg = scaled_perturbation(float(value))
                    eval_frames = [
                        perturb_sample(f, pcfg, seed=i) for i, f in enumerate(eval_frames)
                    ]
                model = ToyModel(cfg)
                report = train(
                    model, train_frames, eval_frames, epochs,
                    lr=lr, weight_decay=weight_decay, batch_size=batch_size,
                    seed=s, iou_thresh=iou_thresh, bev=bev,
                )
                for k, v in _metrics_from(report).items():
                    cell.metrics[k].append(v)
        except Exception:
            cell.error = traceback.format_exc(limit=3)
            cell.metrics = {}
    return ComparisonTable(axis=axis, cells=cells, seeds=list(seeds))
