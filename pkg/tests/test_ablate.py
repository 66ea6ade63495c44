"""Grid-experiment driver: wiring, determinism, failure isolation."""

import numpy as np
import pytest

from fusiondet.pointops import PerturbationConfig
from fusiondet.toy.ablate import (
    ABLATION_AXES,
    ComparisonTable,
    run_ablation,
    scaled_perturbation,
)

TINY = dict(n_train=8, n_eval=3, epochs=1)


def test_axis_and_grid_validation():
    with pytest.raises(ValueError, match="unknown axis"):
        run_ablation("coffee", [1], [0])
    with pytest.raises(ValueError, match="empty grid"):
        run_ablation("mc_loss", [], [0])
    with pytest.raises(ValueError, match="no seeds"):
        run_ablation("mc_loss", [True], [])


def test_scaled_perturbation_endpoints():
    z = scaled_perturbation(0.0)
    assert (z.gain_lo, z.gain_hi, z.offset, z.noise_points) == (1.0, 1.0, 0.0, 0)
    one = scaled_perturbation(1.0)
    stock = PerturbationConfig()
    assert (one.gain_lo, one.gain_hi) == (stock.gain_lo, stock.gain_hi)
    assert one.offset == stock.offset and one.noise_points == stock.noise_points
    with pytest.raises(ValueError, match="strength"):
        scaled_perturbation(-0.5)


def test_fusion_axis_produces_one_cell_per_value():
    tab = run_ablation("fusion_mode", ["none", "li_only"], seeds=[0, 1], **TINY)
    assert isinstance(tab, ComparisonTable)
    assert [c.label for c in tab.cells] == ["none", "li_only"]
    for c in tab.cells:
        assert c.error is None
        for values in c.metrics.values():
            assert len(values) == 2
    # formatted table mentions every cell
    text = tab.format()
    assert "none" in text and "li_only" in text and "ap" in text
    with pytest.raises(KeyError):
        tab.cell("cascade")


def test_failed_cell_is_marked_and_the_sweep_continues():
    tab = run_ablation("fusion_mode", ["telepathy", "none"], seeds=[0], **TINY)
    bad, good = tab.cells
    assert bad.error is not None and "telepathy" in bad.error
    assert good.error is None
    assert "FAILED" in tab.format()


def test_cells_share_per_seed_datasets():
    # identical configs in two different sweeps see identical data: the
    # mc_loss=True cell must reproduce the perturbation strength-0 cell
    # (clean eval), both being the stock model on the stock frames
    a = run_ablation("mc_loss", [True], seeds=[3], **TINY)
    b = run_ablation("perturbation", [0.0], seeds=[3], **TINY)
    ma = a.cells[0].metrics
    mb = b.cells[0].metrics
    for key in ma:
        assert ma[key] == mb[key], key


def test_beam_density_axis_runs_and_differs_from_dense():
    tab = run_ablation("beam_density", [1, 8], seeds=[0], **TINY)
    dense, sparse = tab.cells
    assert dense.error is None and sparse.error is None
    assert dense.metrics["final_total"] != sparse.metrics["final_total"]


def test_as_dict_round_trips_through_json():
    import json

    tab = run_ablation("mc_loss", [True, False], seeds=[0], **TINY)
    blob = json.dumps(tab.as_dict(), sort_keys=True)
    back = json.loads(blob)
    assert back["axis"] == "mc_loss"
    assert len(back["cells"]) == 2
    assert set(ABLATION_AXES) == {"fusion_mode", "mc_loss", "beam_density", "perturbation"}
