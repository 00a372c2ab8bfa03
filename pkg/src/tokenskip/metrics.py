"""Routing diagnostics: execution ratios, noise-induced decision flipping,
logit-gap histograms, path change between model variants and FLOPs counts."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .model import ExecutionTrace, Model, ModelConfig, forward_infer
from .numcore import RngState, sample_gumbel

_FLIP_CHUNK = 1 << 20


def _as_traces(traces) -> list[ExecutionTrace]:
    if isinstance(traces, ExecutionTrace):
        traces = [traces]
    traces = list(traces)
    if not traces or sum(t.num_tokens for t in traces) == 0:
        raise ValueError("no traces to aggregate")
    return traces


def _executed(traces) -> np.ndarray:
    return np.concatenate([t.executed for t in _as_traces(traces)], axis=0)


def execution_ratio(traces) -> tuple[np.ndarray, float]:
    """Per-layer fraction of executed tokens and their mean."""
    per_layer = _executed(traces).mean(axis=0)
    return per_layer, float(per_layer.mean())


def flip_probability(gaps, rng: RngState, n_draws: int) -> np.ndarray:
    """Empirical probability that Gumbel noise flips ``argmax`` for each gap.

    ``gaps`` are execute-minus-bypass logit differences; the noisy decision
    executes iff ``gap + pi_0 - pi_1 >= 0``.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    gaps = np.asarray(gaps, dtype=np.float64).ravel()
    clean = gaps >= 0
    flips = np.zeros(gaps.size)
    rows = max(1, _FLIP_CHUNK // n_draws)
    for s in range(0, gaps.size, rows):
        g = gaps[s:s + rows]
        pi = sample_gumbel(rng, (g.size, n_draws, 2))
        noisy = (g[:, None] + pi[..., 0] - pi[..., 1]) >= 0
        flips[s:s + rows] = (noisy != clean[s:s + rows, None]).mean(axis=1)
    return flips


def flipping_ratio(model: Model, inputs, rng: RngState, n_draws: int = 16) -> np.ndarray:
    """Per-layer flip rate, with router inputs from the noiseless theta=0.5 pass."""
    _, trace = forward_infer(model, inputs, 0.5)
    gaps = trace.gaps
    flips = flip_probability(gaps, rng, n_draws).reshape(gaps.shape)
    return flips.mean(axis=0)


def logit_histogram(traces, bins=20, value_range: tuple[float, float] | None = None) -> dict:
    """Histogram of execute-minus-bypass gaps, pooled and per layer (shared edges)."""
    if isinstance(bins, int) and bins < 1:
        raise ValueError("bins must be >= 1")
    gaps = np.concatenate([t.gaps for t in _as_traces(traces)], axis=0)
    counts, edges = np.histogram(gaps.ravel(), bins=bins, range=value_range)
    per_layer = [np.histogram(gaps[:, l], bins=edges)[0] for l in range(gaps.shape[1])]
    return {"edges": [float(e) for e in edges], "pooled": [int(c) for c in counts],
            "per_layer": [[int(c) for c in row] for row in per_layer]}


def path_change_rate(traces_a, traces_b, per_decision: bool = False) -> float:
    """Fraction of tokens whose decision vector differs at any layer.

    ``per_decision=True`` returns the Hamming rate over (token, layer) pairs.
    """
    a, b = _executed(traces_a), _executed(traces_b)
    if a.shape != b.shape:
        raise ValueError(f"trace shapes differ: {a.shape} vs {b.shape}")
    diff = a != b
    return float(diff.mean()) if per_decision else float(diff.any(axis=1).mean())


@dataclass(frozen=True)
class CostModel:
    """Multiply-accumulate counts per token for each affine map."""

    embed: int
    head: int
    block: int
    router: int

    @classmethod
    def of(cls, cfg: ModelConfig) -> "CostModel":
        d = cfg.embed_dim
        return cls(embed=cfg.in_dim * d, head=d * cfg.num_classes,
                   block=2 * d * cfg.block_hidden,
                   router=d * cfg.router_hidden + cfg.router_hidden * 2)


def flops_estimate(cfg: ModelConfig, ratios: Sequence[float], tokens: int = 1) -> tuple[int | float, int | float]:
    """``(flops_full, flops_adaptive)`` as MAC counts over ``tokens`` tokens.

    Routers are charged for every token; each block is charged by its
    execution ratio.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (cfg.num_layers,):
        raise ValueError(f"need {cfg.num_layers} per-layer ratios, got shape {ratios.shape}")
    c = CostModel.of(cfg)
    fixed = c.embed + c.head + cfg.num_layers * c.router
    full = (fixed + cfg.num_layers * c.block) * tokens
    adaptive = (fixed + c.block * float(ratios.sum())) * tokens
    return full, adaptive


def router_overhead_fraction(cfg: ModelConfig) -> float:
    """Share of full-model MACs that are spent whatever the routing decisions."""
    c = CostModel.of(cfg)
    fixed = c.embed + c.head + cfg.num_layers * c.router
    return fixed / (fixed + cfg.num_layers * c.block)


def model_size_bits(cfg: ModelConfig, block_bits: Iterable[int] | int = 32, other_bits: int = 32) -> int:
    """Analytic weight storage in bits (scales and zero-points not counted)."""
    N = cfg.num_layers
    block_bits = [block_bits] * N if isinstance(block_bits, int) else list(block_bits)
    d, hb = cfg.embed_dim, cfg.block_hidden
    block_w = 2 * d * hb
    other = cfg.num_params() - N * block_w
    return int(sum(b * block_w for b in block_bits) + other_bits * other)


@dataclass
class MetricsReport:
    accuracy: float
    theta: float
    per_layer_exec_ratio: list[float]
    avg_exec_ratio: float
    flipping_ratio: list[float]
    logit_gap_histogram: dict
    flops_full: float
    flops_adaptive: float
    tokens: int
    path_change_rate: float | None = None
    path_change_hamming: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["format_version"] = 1
        return d


def evaluate(model: Model, x, y, theta: float, rng: RngState, n_draws: int = 16,
             bins: int = 20, rule: str = "threshold", reference: ExecutionTrace | None = None) -> tuple[MetricsReport, ExecutionTrace]:
    logits, trace = forward_infer(model, x, theta, rule=rule)
    per_layer, avg = execution_ratio(trace)
    full, adaptive = flops_estimate(model.config, per_layer, tokens=len(y))
    report = MetricsReport(
        accuracy=float(np.mean(np.argmax(logits, axis=1) == y)),
        theta=float(theta),
        per_layer_exec_ratio=[float(v) for v in per_layer],
        avg_exec_ratio=avg,
        flipping_ratio=[float(v) for v in flipping_ratio(model, x, rng, n_draws)],
        logit_gap_histogram=logit_histogram(trace, bins),
        flops_full=float(full),
        flops_adaptive=float(adaptive),
        tokens=int(len(y)),
    )
    if reference is not None:
        report.path_change_rate = path_change_rate(reference, trace)
        report.path_change_hamming = path_change_rate(reference, trace, per_decision=True)
    return report, trace
