"""Fine-tuning loop with Adam, global-norm clipping and per-step routing logs."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .losses import objective
from .model import Model, backward, forward_infer, forward_train
from .numcore import RngState
from .taskgen import Dataset

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 5e-3
    lambda1: float = 0.1
    lambda2: float = 0.01
    r_target: float = 0.5
    tau: float = 1.0
    seed: int = 0
    log_every: int = 1
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.log_every < 1:
            raise ValueError("epochs must be >= 0, batch_size and log_every >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be non-negative")
        if not 0.0 < self.r_target < 1.0:
            raise ValueError("r_target must lie in (0, 1)")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = {k: v for k, v in d.items() if k not in ("format_version", "model")}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainingLog:
    steps: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"kind": "step", **r}, sort_keys=True) for r in self.steps]
        lines += [json.dumps({"kind": "epoch", **r}, sort_keys=True) for r in self.epochs]
        return "".join(line + "\n" for line in lines)

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainingLog":
        log = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.pop("kind")
            (log.steps if kind == "step" else log.epochs).append(rec)
        return log


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; carries the last finite model."""

    def __init__(self, step: int, last_good: Model, message: str):
        super().__init__(message)
        self.step = step
        self.last_good = last_good


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros(v.shape) for k, v in params.items()},
                   {k: np.zeros(v.shape) for k, v in params.items()})


def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   state: AdamState, lr: float) -> tuple[dict[str, np.ndarray], AdamState]:
    """One Adam update (beta1=0.9, beta2=0.999, eps=1e-8). Params keep their dtype."""
    for k, g in grads.items():
        if params[k].shape != g.shape:
            raise ValueError(f"gradient shape mismatch for {k}: {g.shape} vs {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {k}")
    state.t += 1
    c1 = 1.0 - ADAM_BETA1**state.t
    c2 = 1.0 - ADAM_BETA2**state.t
    out = {}
    for k, p in params.items():
        g = grads[k]
        state.m[k] = ADAM_BETA1 * state.m[k] + (1.0 - ADAM_BETA1) * g
        state.v[k] = ADAM_BETA2 * state.v[k] + (1.0 - ADAM_BETA2) * g * g
        upd = lr * (state.m[k] / c1) / (np.sqrt(state.v[k] / c2) + ADAM_EPS)
        out[k] = (p.astype(np.float64) - upd).astype(p.dtype)
    return out, state


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def accuracy(model: Model, x, y, theta: float = 0.5) -> float:
    logits, _ = forward_infer(model, x, theta)
    return float(np.mean(np.argmax(logits, axis=1) == y))


def train(model: Model, dataset: Dataset, cfg: TrainConfig,
          check_depth: bool = True) -> tuple[Model, TrainingLog]:
    """Train a copy of ``model``; returns the trained copy and its log.

    ``check_depth=False`` allows a model shallower than the task's deepest
    level (used only to show such a model underfits).
    """
    if model.config.in_dim != dataset.inputs.shape[1]:
        raise ValueError("model input_dim does not match dataset embed_dim")
    deepest = max(dataset.config.depth_levels)
    if check_depth and deepest > model.config.num_layers:
        raise ValueError(f"dataset needs depth {deepest} but the model has "
                         f"{model.config.num_layers} layers")
    model = model.copy()
    log = TrainingLog()
    if cfg.epochs == 0:
        return model, log

    shuffle_rng, noise_rng = RngState(cfg.seed).spawn(2)
    train_samples = dataset.splits["train"]
    x_test, y_test = dataset.split("test")
    tps = dataset.config.tokens_per_sample
    N = model.config.num_layers
    state = AdamState.zeros_like(model.params)
    step = 0
    t0 = time.perf_counter()

    for epoch in range(cfg.epochs):
        order = train_samples[shuffle_rng.permutation(train_samples.size)]
        exec_sum = np.zeros(N)
        flip_sum = np.zeros(N)
        n_tok = 0
        for start in range(0, order.size, cfg.batch_size):
            samples = order[start:start + cfg.batch_size]
            idx = (samples[:, None] * tps + np.arange(tps)[None, :]).ravel()
            x, y = dataset.inputs[idx], dataset.labels[idx]
            logits, trace = forward_train(model, x, cfg.tau, rng=noise_rng)
            parts, up = objective(logits, y, trace, cfg.lambda1, cfg.lambda2, cfg.r_target)
            if not np.isfinite(parts.total):
                raise TrainingDiverged(step, model, f"non-finite loss at step {step}")
            grads = backward(model, trace, up)
            grad_norm = clip_global_norm(grads, cfg.grad_clip)
            try:
                params, state = optimizer_step(model.params, grads, state, cfg.learning_rate)
            except FloatingPointError as exc:
                raise TrainingDiverged(step, model, f"step {step}: {exc}") from exc
            model = Model(model.config, params)

            executed = trace.executed
            flipped = executed != (trace.gaps >= 0)
            exec_sum += executed.sum(0)
            flip_sum += flipped.sum(0)
            n_tok += executed.shape[0]
            if step % cfg.log_every == 0:
                rec = {"step": step, "epoch": epoch, **parts.to_dict(),
                       "exec_ratio": float(executed.mean()),
                       "layer_exec_ratio": [float(v) for v in executed.mean(0)],
                       "flip_ratio": float(flipped.mean()),
                       "grad_norm": grad_norm,
                       "timestamp_elapsed_s": time.perf_counter() - t0}
                log.steps.append(rec)
            step += 1

        _, probe = forward_infer(model, dataset.inputs[dataset.token_index("train")[:200]], 0.5)
        log.epochs.append({
            "epoch": epoch,
            "test_accuracy": accuracy(model, x_test, y_test, 0.5),
            "layer_exec_ratio": [float(v) for v in exec_sum / n_tok],
            "layer_flip_ratio": [float(v) for v in flip_sum / n_tok],
            "flip_ratio": float(flip_sum.sum() / (n_tok * N)),
            "median_abs_gap": float(np.median(np.abs(probe.gaps))),
        })
    return model, log
