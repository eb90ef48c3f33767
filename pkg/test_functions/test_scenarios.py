import numpy as np
import pytest

from conftest import load_config
from xvocab_sandbox.agents.utils import slice_acceptance
from xvocab_sandbox.harness import ablate_variants, run_scenario, run_seeds, sweep

pytestmark = pytest.mark.slow

SEEDS = [0, 1, 2]


def _by_value(table, column="acceptance_rate"):
    return {row["value"]: row[column] for row in table.to_dict("records")}


def test_each_component_raises_acceptance(tmp_path):
    acc = _by_value(ablate_variants(load_config("default"), tmp_path / "variants", seeds=SEEDS))
    assert acc["spd_dm"] < acc["spd_dm_pp"] < acc["l_dm"] < acc["l_dm_ngram"]
    assert acc["l_dm_ngram"] >= 1.15 * acc["l_dm"]


def test_quarter_cache_keeps_most_of_the_gain(tmp_path):
    table = sweep(load_config("default"), "cache_capacity", [0.25, 0.5, "full", "off"], tmp_path / "capacity",
                  seeds=SEEDS)
    acc = _by_value(table)
    assert acc[0.25] >= 0.95 * acc["full"]
    assert all(acc["off"] < acc[v] for v in (0.25, 0.5, "full"))


def test_online_distillation_lifts_late_acceptance(tmp_path):
    report = run_scenario(load_config("default"), tmp_path / "run", seed=0)
    assert len(report.rows) == 500
    assert slice_acceptance(report.rows, 450) - slice_acceptance(report.rows, 0, 50) >= 0.05


def test_joint_head_training_does_not_hurt_acceptance(tmp_path):
    config = load_config("adaptive")
    joint = run_seeds(config, tmp_path / "joint", seeds=SEEDS)["mean"]
    distill = run_seeds(config.with_override("adapt.mode", "distill_only"), tmp_path / "distill",
                        seeds=SEEDS)["mean"]
    assert joint["acceptance_rate"] >= distill["acceptance_rate"]

    report = run_scenario(config.with_override("adapt.mode", "interleaved"), tmp_path / "interleaved", seed=0)
    assert report.head_losses and np.all(np.isfinite(report.head_losses))


def test_dataset_switch_dips_then_recovers(tmp_path):
    report = run_scenario(load_config("drift"), tmp_path / "drift", seed=0)
    switch = next(s for s in report.switches if s["kind"] == "dataset")
    assert switch["step"] == 250
    assert switch["pre"] - switch["after"] >= 0.05
    assert switch["recovered"] >= 0.90 * switch["pre"]
