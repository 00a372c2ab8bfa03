"""Post-training weight perturbations: groupwise round-to-nearest quantization
and unstructured magnitude pruning.

Quantized models are materialized with dequantized float weights (fake
quantization). Routers, embedding and head stay full precision.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Model, layer_key

NO_OP_BITS = 16
DEFAULT_SCOPE = ("block_w1", "block_w2")


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 4
    group_size: int = 128
    per_layer_bits: tuple[int, ...] | None = None
    scope: tuple[str, ...] = DEFAULT_SCOPE

    def __post_init__(self):
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")
        for b in (self.bits,) + tuple(self.per_layer_bits or ()):
            if b < 2:
                raise ValueError(f"bits must be >= 2, got {b}")
        if self.per_layer_bits is not None:
            object.__setattr__(self, "per_layer_bits", tuple(int(b) for b in self.per_layer_bits))

    def bits_for_layer(self, l: int) -> int:
        return self.per_layer_bits[l] if self.per_layer_bits is not None else self.bits


def interleaved_schedule(num_layers: int, even_bits: int = 4, odd_bits: int = 2) -> tuple[int, ...]:
    return tuple(even_bits if l % 2 == 0 else odd_bits for l in range(num_layers))


@dataclass
class QuantizedTensor:
    """Codes, scales and zero-points for ``(rows, in_dim)`` -> groups along ``in_dim``.

    Stored tensors are transposed to put the input dimension last; ``shape``
    is the original shape and ``transposed`` records whether ``.T`` was taken.
    """

    codes: np.ndarray       # (rows, padded_in) uint8
    scales: np.ndarray      # (rows, n_groups) float64
    zeros: np.ndarray       # (rows, n_groups) int64
    bits: int
    group_size: int
    shape: tuple[int, ...]
    in_dim: int
    transposed: bool

    @property
    def num_groups(self) -> int:
        return int(self.scales.size)


def _grouped(rows2d: np.ndarray, group_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Pad along the last axis to a multiple of ``group_size``; return groups and mask."""
    r, n = rows2d.shape
    g = -(-n // group_size)
    pad = g * group_size - n
    vals = np.pad(rows2d, ((0, 0), (0, pad)))
    mask = np.pad(np.ones((r, n), dtype=bool), ((0, 0), (0, pad)))
    return vals.reshape(r, g, group_size), mask.reshape(r, g, group_size)


def quantize_groups(groups: np.ndarray, mask: np.ndarray, bits: int):
    """Asymmetric min-max quantization of ``(..., group)`` arrays (masked entries ignored)."""
    qmax = 2**bits - 1
    big = np.finfo(np.float64).max
    lo = np.where(mask, groups, big).min(axis=-1)
    hi = np.where(mask, groups, -big).max(axis=-1)
    # constant groups get scale |min| (1 for all-zero) so they round-trip exactly
    flat_scale = np.where(lo != 0, np.abs(lo), 1.0)
    scale = np.where(hi > lo, (hi - lo) / qmax, flat_scale)
    zero = np.round(-lo / scale)
    codes = np.clip(np.round(groups / scale[..., None]) + zero[..., None], 0, qmax)
    codes = np.where(mask, codes, 0)
    return codes.astype(np.int64), scale, zero.astype(np.int64)


def quantize_tensor(w: np.ndarray, bits: int, group_size: int = 128) -> QuantizedTensor:
    """Quantize a 1-D or 2-D weight; 2-D weights are ``(in_dim, out_dim)``.

    Groups are contiguous runs of ``group_size`` weights along the input
    dimension; the last group of each row may be short.
    """
    if bits < 2:
        raise ValueError("bits must be >= 2")
    w = np.asarray(w)
    if not np.all(np.isfinite(w)):
        raise FloatingPointError("cannot quantize non-finite weights")
    shape = w.shape
    if w.ndim == 1:
        rows, transposed = w.astype(np.float64)[None, :], False
    elif w.ndim == 2:
        rows, transposed = w.astype(np.float64).T, True
    else:
        raise ValueError("only 1-D and 2-D tensors are supported")
    groups, mask = _grouped(rows, group_size)
    codes, scale, zero = quantize_groups(groups, mask, bits)
    dtype = np.uint8 if bits <= 8 else np.uint16
    return QuantizedTensor(codes=codes.reshape(rows.shape[0], -1).astype(dtype), scales=scale,
                           zeros=zero, bits=bits, group_size=group_size, shape=shape,
                           in_dim=rows.shape[1], transposed=transposed)


def dequantize(qt: QuantizedTensor, dtype=np.float32) -> np.ndarray:
    r = qt.codes.shape[0]
    codes = qt.codes.astype(np.float64).reshape(r, qt.scales.shape[1], qt.group_size)
    vals = qt.scales[..., None] * (codes - qt.zeros[..., None])
    rows = vals.reshape(r, -1)[:, :qt.in_dim]
    out = rows.T if qt.transposed else rows[0]
    return np.ascontiguousarray(out.reshape(qt.shape), dtype=dtype)


def quantize_model(model: Model, qcfg: QuantConfig) -> tuple[Model, dict]:
    """Replace in-scope block weights by their quantize/dequantize round trip.

    Returns the perturbed copy and a manifest ``{tensor: {bits, group_size,
    num_groups, max_abs_error, mse}}``. Layers scheduled at ``NO_OP_BITS`` or
    above are left untouched.
    """
    N = model.config.num_layers
    if qcfg.per_layer_bits is not None and len(qcfg.per_layer_bits) != N:
        raise ValueError(f"per_layer_bits has {len(qcfg.per_layer_bits)} entries, model has {N} layers")
    out = model.copy()
    manifest: dict[str, dict] = {}
    for l in range(N):
        bits = qcfg.bits_for_layer(l)
        if bits >= NO_OP_BITS:
            continue
        for name in qcfg.scope:
            key = layer_key(l, name)
            if key not in out.params:
                raise KeyError(f"scope tensor {key} not in model")
            w = out.params[key]
            qt = quantize_tensor(w, bits, qcfg.group_size)
            w_hat = dequantize(qt, w.dtype)
            err = w.astype(np.float64) - w_hat.astype(np.float64)
            out.params[key] = w_hat
            manifest[key] = {"bits": bits, "group_size": qcfg.group_size,
                             "num_groups": qt.num_groups,
                             "max_abs_error": float(np.max(np.abs(err))),
                             "mse": float(np.mean(err * err))}
    return out, manifest


def prune_tensor(w: np.ndarray, sparsity: float) -> np.ndarray:
    """Zero the ``floor(sparsity * n)`` smallest-magnitude entries (ties by index)."""
    if not 0.0 <= sparsity < 1.0:
        raise ValueError("sparsity must lie in [0, 1)")
    flat = np.asarray(w).ravel().copy()
    k = int(np.floor(sparsity * flat.size))
    if k:
        order = np.argsort(np.abs(flat), kind="stable")
        flat[order[:k]] = 0
    return flat.reshape(np.shape(w))


def magnitude_prune(model: Model, sparsity: float, scope: tuple[str, ...] = DEFAULT_SCOPE) -> Model:
    out = model.copy()
    for l in range(model.config.num_layers):
        for name in scope:
            key = layer_key(l, name)
            out.params[key] = prune_tensor(out.params[key], sparsity)
    return out
