import numpy as np
import pytest

from conftest import SEEDS, random_router_model
from tokenskip.calibrator import CalibrationReport, SearchConfig, calibrate_threshold
from tokenskip.model import ModelConfig
from tokenskip.numcore import RngState
from tokenskip.quantizer import QuantConfig, quantize_model

CFG = ModelConfig(num_layers=4, embed_dim=6, block_hidden=8, router_hidden=4, num_classes=3)


@pytest.fixture(scope="module")
def calib_data():
    rng = RngState(11)
    return rng.normal((300, 6)), rng.integers(0, 3, 300)


def test_grids():
    cfg = SearchConfig()
    coarse = cfg.coarse_grid()
    assert len(coarse) == 10 and coarse[0] == 0.05 and coarse[-1] == 0.5
    assert cfg.fine_grid(0.05) == [round(0.01 * i, 2) for i in range(1, 11)]
    assert cfg.fine_grid(0.5) == [round(0.45 + 0.01 * i, 2) for i in range(6)]
    assert len(cfg.fine_grid(0.25)) == 11
    with pytest.raises(ValueError):
        SearchConfig(fine_step=0.1, coarse_step=0.05)


def test_constant_landscape_picks_half(calib_data):
    model = random_router_model(CFG, 0)
    model.params["head/w"][:] = 0.0
    report = calibrate_threshold(model, *calib_data)
    assert len({c.accuracy for c in report.candidates}) == 1
    assert report.selected_theta == 0.5


def test_report_contract(calib_data):
    model = random_router_model(CFG, 3)
    report = calibrate_threshold(model, *calib_data)
    coarse, fine = report.phase("coarse"), report.phase("fine")
    assert len(coarse) == 10 and 1 <= len(fine) <= 11
    assert all(0 < c.theta <= 0.5 for c in report.candidates)
    half = next(c for c in coarse if c.theta == 0.5)
    assert report.selected().accuracy >= half.accuracy
    assert report.selected_theta in {c.theta for c in report.candidates}
    by_theta = sorted({c.theta: c.exec_ratio for c in report.candidates}.items())
    ratios = [r for _, r in by_theta]
    assert all(a >= b for a, b in zip(ratios, ratios[1:]))
    again = calibrate_threshold(model, *calib_data)
    assert again.to_dict() == report.to_dict()
    back = CalibrationReport.from_dict(report.to_dict())
    assert back.to_dict() == report.to_dict()


def test_tie_break_prefers_larger_theta(calib_data):
    model = random_router_model(CFG, 5)
    report = calibrate_threshold(model, *calib_data)
    best = max(c.accuracy for c in report.candidates)
    assert report.selected_theta == max(c.theta for c in report.candidates if c.accuracy == best)


def test_empty_calibration_set():
    with pytest.raises(ValueError, match="empty"):
        calibrate_threshold(random_router_model(CFG, 0), np.zeros((0, 6)), np.zeros(0, dtype=int))


def test_three_bit_entropy_model_lowers_theta(default_runs):
    hits = 0
    for seed in SEEDS:
        model = default_runs[seed][0.01][0]
        xc, yc = default_runs[seed]["dataset"].split("calib")
        report = calibrate_threshold(quantize_model(model, QuantConfig(bits=3))[0], xc, yc)
        half = next(c for c in report.phase("coarse") if c.theta == 0.5)
        hits += report.selected_theta < 0.5 and report.selected().exec_ratio > half.exec_ratio
    assert hits >= 2
