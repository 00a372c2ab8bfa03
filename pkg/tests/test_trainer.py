from dataclasses import replace

import numpy as np
import pytest

from tokenskip.model import ModelConfig, forward_infer, init_model, param_hash
from tokenskip.numcore import RngState
from tokenskip.pipeline import DEFAULT_TRAIN, build_dataset, train_run
from tokenskip.taskgen import TaskConfig, generate_dataset
from tokenskip.trainer import (AdamState, TrainConfig, TrainingDiverged, TrainingLog, accuracy,
                               clip_global_norm, optimizer_step, train)

SMALL_TASK = TaskConfig(num_samples=400, tokens_per_sample=2, calib_samples=40, seed=2)
SMALL_MODEL = ModelConfig(num_layers=4, embed_dim=16, block_hidden=8, router_hidden=4)


@pytest.fixture(scope="module")
def small_data():
    return generate_dataset(SMALL_TASK)


def _adam_run(p0, grad_fn, steps, lr):
    params = {"p": np.array([p0])}
    state = AdamState.zeros_like(params)
    for _ in range(steps):
        params, state = optimizer_step(params, {"p": grad_fn(params["p"])}, state, lr)
    return float(params["p"][0])


def test_zero_gradient_leaves_params():
    params = {"a": np.arange(4.0), "b": np.ones((2, 2), dtype=np.float32)}
    state = AdamState.zeros_like(params)
    new, state = optimizer_step(params, {k: np.zeros_like(v) for k, v in params.items()}, state, 0.1)
    for k in params:
        np.testing.assert_array_equal(new[k], params[k])
        assert new[k].dtype == params[k].dtype
    assert state.t == 1


@pytest.mark.parametrize("g", [0.3, -2.0])
def test_constant_gradient_descends(g):
    p = _adam_run(0.0, lambda p: np.array([g]), 50, 0.01)
    assert np.sign(p) == -np.sign(g)
    np.testing.assert_allclose(abs(p), 0.5, rtol=1e-6)


def test_quadratic_bowl():
    assert abs(_adam_run(1.0, lambda p: 2 * p, 200, 0.1)) < 1e-2


def test_optimizer_errors():
    params = {"a": np.zeros(3)}
    with pytest.raises(ValueError, match="a"):
        optimizer_step(params, {"a": np.zeros(2)}, AdamState.zeros_like(params), 0.1)
    with pytest.raises(FloatingPointError, match="a"):
        optimizer_step(params, {"a": np.array([0, np.nan, 0])}, AdamState.zeros_like(params), 0.1)


def test_clip_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_global_norm(grads, 1.0) == 5.0
    np.testing.assert_allclose([grads["a"][0], grads["b"][0]], [0.6, 0.8])
    small = {"a": np.array([0.1])}
    clip_global_norm(small, 1.0)
    assert small["a"][0] == 0.1


def test_zero_epochs_is_identity(small_data):
    model = init_model(SMALL_MODEL, RngState(0))
    out, log = train(model, small_data, TrainConfig(epochs=0))
    assert param_hash(out) == param_hash(model) and out is not model
    assert log.steps == [] and log.epochs == []


def test_training_is_reproducible(small_data):
    cfg = TrainConfig(epochs=2, seed=4)
    model = init_model(SMALL_MODEL, RngState(4))
    a, log_a = train(model, small_data, cfg)
    b, log_b = train(model, small_data, cfg)
    assert param_hash(a) == param_hash(b)
    strip = lambda recs: [{k: v for k, v in r.items() if k != "timestamp_elapsed_s"} for r in recs]  # noqa: E731
    assert strip(log_a.steps) == strip(log_b.steps)
    c, _ = train(model, small_data, replace(cfg, seed=5))
    assert param_hash(a) != param_hash(c)


def test_log_records(small_data):
    cfg = TrainConfig(epochs=2, seed=1, batch_size=16)
    model, log = train(init_model(SMALL_MODEL, RngState(1)), small_data, cfg)
    n_train = len(small_data.splits["train"])
    steps_per_epoch = -(-n_train // 16)
    assert [r["step"] for r in log.steps] == list(range(2 * steps_per_epoch))
    rec = log.steps[0]
    for key in ("ce", "rate", "entropy", "total", "r_avg", "exec_ratio", "layer_exec_ratio",
                "flip_ratio", "grad_norm", "timestamp_elapsed_s"):
        assert key in rec
    assert len(rec["layer_exec_ratio"]) == SMALL_MODEL.num_layers
    assert rec["exec_ratio"] == rec["r_avg"]
    assert [e["epoch"] for e in log.epochs] == [0, 1]
    assert log.epochs[-1]["test_accuracy"] == accuracy(model, *small_data.split("test"))
    back = TrainingLog.from_jsonl(log.to_jsonl())
    assert back.steps == log.steps and back.epochs == log.epochs


def test_depth_check(small_data):
    shallow = init_model(replace(SMALL_MODEL, num_layers=3), RngState(0))
    with pytest.raises(ValueError, match="depth"):
        train(shallow, small_data, TrainConfig(epochs=1))
    train(shallow, small_data, TrainConfig(epochs=1), check_depth=False)


def test_divergence_reports_last_good(small_data):
    bad = replace(small_data, inputs=small_data.inputs.copy())
    bad.inputs[:] = np.nan
    model = init_model(SMALL_MODEL, RngState(0))
    with pytest.raises(TrainingDiverged) as info:
        train(model, bad, TrainConfig(epochs=1))
    assert info.value.step == 0
    assert param_hash(info.value.last_good) == param_hash(model)


def test_default_config_fields():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.tau, cfg.grad_clip) == (10, 32, 1.0, 1.0)
    with pytest.raises(ValueError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    assert TrainConfig.from_dict({"format_version": 1, "model": {}, "seed": 3}).seed == 3


def test_strong_rate_weight_hits_target():
    ds = build_dataset(0)
    model, _ = train_run(ds, 0, 0.0, train_cfg=replace(DEFAULT_TRAIN, lambda1=5.0))
    _, trace = forward_infer(model, ds.split("test")[0], 0.5)
    assert abs(trace.executed.mean() - 0.5) < 0.05


def test_no_dead_layers_with_entropy(default_runs):
    for seed, runs in default_runs.items():
        _, log, _ = runs[0.01]
        for e in log.epochs:
            assert min(e["layer_exec_ratio"]) > 0.01, (seed, e["epoch"])


def test_rate_band_invariant(default_runs):
    # final training-time hard ratio within [R_target - 0.1, R_target + 0.15]
    for runs in default_runs.values():
        for lam2 in (0.0, 0.01):
            _, log, _ = runs[lam2]
            assert 0.4 <= float(np.mean(log.epochs[-1]["layer_exec_ratio"])) <= 0.65
