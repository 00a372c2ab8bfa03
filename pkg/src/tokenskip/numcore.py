"""Seeded sampling, temperature softmax and a finite-difference gradient oracle.

All randomness in the package flows through :class:`RngState`, a thin wrapper
around numpy's PCG64 bit generator. Child streams come from
``SeedSequence.spawn`` so they never alias the parent.
"""

from __future__ import annotations

import numpy as np

# Uniform draws are clamped to [EPS, 1 - EPS] before the double log.
GUMBEL_EPS = 2.0**-32


class RngState:
    """Reproducible random stream (PCG64) with non-aliasing child streams."""

    def __init__(self, seed: int, _seq: np.random.SeedSequence | None = None):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._seq = _seq if _seq is not None else np.random.SeedSequence(self.seed)
        self.generator = np.random.Generator(np.random.PCG64(self._seq))

    def spawn(self, n: int = 1) -> list["RngState"]:
        return [RngState(self.seed, _seq=child) for child in self._seq.spawn(n)]

    def child(self) -> "RngState":
        return self.spawn(1)[0]

    def uniform(self, size) -> np.ndarray:
        return self.generator.random(size)

    def normal(self, size, scale: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, scale, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


def gumbel_from_uniform(u) -> np.ndarray:
    """Map uniforms in (0, 1) to Gumbel(0, 1) via ``-log(-log(u))``."""
    u = np.clip(np.asarray(u, dtype=np.float64), GUMBEL_EPS, 1.0 - GUMBEL_EPS)
    return -np.log(-np.log(u))


def sample_gumbel(rng: RngState, n) -> np.ndarray:
    """Draw ``n`` (an int or a shape tuple) standard Gumbel samples as float64."""
    if isinstance(n, (int, np.integer)) and n < 1:
        raise ValueError("n must be >= 1")
    return gumbel_from_uniform(rng.uniform(n))


def softmax(v, tau: float = 1.0, axis: int = -1) -> np.ndarray:
    """Temperature softmax along ``axis`` with max subtraction."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.asarray(v, dtype=np.float64) / tau
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_odds(theta: float) -> float:
    """Logit of a probability, used to turn ``p_exec >= theta`` into a gap test."""
    if theta == 0.5:
        return 0.0
    return float(np.log(theta) - np.log1p(-theta))


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-np.logaddexp(0.0, -x))


def finite_diff_grad(f, params, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``params``.

    Raises ``FloatingPointError`` naming the coordinate if ``f`` is not finite
    at either probe point.
    """
    p = np.array(params, dtype=np.float64, copy=True)
    flat = p.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(p))
        flat[i] = orig - h
        fm = float(f(p))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(p.shape)
