"""Training objective: cross-entropy, execution-rate penalty and router entropy.

``total = ce + lambda1 * |R_avg - R_target| - lambda2 * entropy``. With
``lambda2 = 0`` this is the plain rate-regularized objective.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .model import ExecutionTrace, Upstream


@dataclass
class LossBreakdown:
    ce: float
    rate: float
    entropy: float
    total: float
    lambda1: float
    lambda2: float
    r_avg: float
    r_target: float

    def to_dict(self) -> dict:
        return asdict(self)


def _check_labels(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (logits.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match {logits.shape[0]} tokens")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"label index out of range [0, {logits.shape[1]})")
    return labels.astype(np.int64)


def cross_entropy(logits, labels, with_grad: bool = False):
    """Mean negative log-likelihood; optionally also its gradient w.r.t. logits."""
    z = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(z, labels)
    T = z.shape[0]
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z - lse[:, None]
    loss = float(-logp[np.arange(T), labels].mean())
    if not with_grad:
        return loss
    grad = np.exp(logp)
    grad[np.arange(T), labels] -= 1.0
    return loss, grad / T


def rate_loss(trace: ExecutionTrace, r_target: float, with_grad: bool = False):
    """``|R_avg - R_target|`` over straight-through gate values.

    Returns ``(loss, r_avg)`` or ``(loss, r_avg, d_gate)``. The subgradient at
    ``R_avg == R_target`` is zero.
    """
    gate = trace.gate
    if gate.size == 0:
        raise ValueError("empty trace")
    r_avg = float(gate.mean())
    diff = r_avg - r_target
    loss = abs(diff)
    if not with_grad:
        return loss, r_avg
    d_gate = np.full(gate.shape, np.sign(diff) / gate.size)
    return loss, r_avg, d_gate


def entropy_loss(trace: ExecutionTrace, with_grad: bool = False):
    """Mean binary entropy of the soft decisions, averaged over layers and tokens."""
    s = trace.soft
    if s is None:
        raise ValueError("entropy loss requires soft decisions (training trace)")
    logs = np.log(np.where(s > 0, s, 1.0))
    count = s.shape[0] * s.shape[1]
    value = float(-(s * logs).sum() / count)
    if not with_grad:
        return value
    # d(-H)/ds; the +1 term cancels in the softmax Jacobian but is kept for clarity
    d_soft = (np.log(np.maximum(s, 1e-300)) + 1.0) / count
    return value, d_soft


def total_loss(ce: float, rate: float, entropy: float, lambda1: float, lambda2: float,
               r_avg: float = float("nan"), r_target: float = 0.5) -> LossBreakdown:
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss weights must be non-negative")
    total = ce + lambda1 * rate - lambda2 * entropy
    return LossBreakdown(ce=ce, rate=rate, entropy=entropy, total=total, lambda1=lambda1,
                         lambda2=lambda2, r_avg=r_avg, r_target=r_target)


def objective(class_logits, labels, trace: ExecutionTrace, lambda1: float, lambda2: float,
              r_target: float) -> tuple[LossBreakdown, Upstream]:
    """Full objective plus the upstream gradients consumed by ``model.backward``."""
    ce, d_logits = cross_entropy(class_logits, labels, with_grad=True)
    rate, r_avg, d_gate = rate_loss(trace, r_target, with_grad=True)
    ent, d_neg_ent = entropy_loss(trace, with_grad=True)
    parts = total_loss(ce, rate, ent, lambda1, lambda2, r_avg, r_target)
    up = Upstream(d_logits=d_logits, d_gate=lambda1 * d_gate, d_soft=lambda2 * d_neg_ent)
    return parts, up
