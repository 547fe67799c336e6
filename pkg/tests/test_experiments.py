import math

import pytest

from core.config import resolve
from core.errors import ConfigError
from core.experiments import Study, compare_pipelines, geometry_study, mask_ratio_sweep, run_study


@pytest.fixture
def small_run():
    return resolve("smoke", overrides={"updates": 8, "warmup": 2, "t_eb": 3, "streak": 2,
                                       "n_train": 32, "n_eval": 16})


def test_compare_pipelines_report(small_run):
    ticks = []
    report = compare_pipelines(small_run, seeds=[0], rho=0.7, progress_cb=ticks.append)
    assert ticks == [100]
    assert report["study"] == "pipeline" and report["seeds"] == [0]
    row = report["runs"][0]
    for key in ("lm_loss_nopmp", "lm_loss_pmp", "gain_unauth_nopmp", "gain_unauth_pmp",
                "gain_auth_pmp", "gain_unauth_random"):
        assert math.isfinite(row[key])
    assert set(report["checks"]) == {"pmp_resists_unauthorized", "capability_preserved",
                                     "authorized_at_least_unauthorized", "earlybird_not_above_random"}
    assert report["mean"]["gain_unauth_pmp"] == row["gain_unauth_pmp"]


def test_pretrained_runs_are_cached(small_run):
    study = Study(small_run)
    first = study.pretrained(0, "earlybird", 0.7)
    assert study.pretrained(0, "earlybird", 0.7) is first
    assert first.mask is not None and study.pretrained(0, "standard").mask is None
    with pytest.raises(ConfigError):
        study.pretrained(0, "magic")


def test_mask_ratio_sweep_keys(small_run):
    report = mask_ratio_sweep(small_run, seeds=[0], ratios=(0.5, 1.0))
    assert set(report["gains"]) == {"0.5", "1.0"}
    assert "gain_non_decreasing_in_rho" in report["checks"]


def test_geometry_study_report(small_run):
    report = geometry_study(small_run, seeds=[0], rho=0.7, n_directions=2)
    row = report["runs"][0]
    assert row["origin_exact"] is True
    assert 0.0 <= row["overlap_pmp"] <= 1.0 and 0.0 <= row["overlap_fresh"] <= 1.0
    assert math.isfinite(row["increase_masked"]) and math.isfinite(row["increase_full"])
    assert report["checks"]["curves_meet_at_origin"] is True
    assert set(report["checks"]) == {"full_directions_steeper", "curves_meet_at_origin",
                                     "overlap_below_fresh", "overlap_substantial"}


def test_unknown_study(small_run):
    with pytest.raises(ConfigError):
        run_study("everything", small_run, seeds=[0])
