"""Residual MLP stack with a two-logit router per layer.

Each layer ``l`` holds a block ``f_l(x) = W2 act(W1 x + b1) + b2`` and a router
``g_l(x) = V2 act(V1 x + c1) + c2`` producing ``[execute, bypass]`` logits. The
layer update is ``x <- x + b * f_l(x)`` where ``b`` is the execute component of
the routing decision.

Three forward paths are provided:

* :func:`forward_full`  -- every layer executes (the dense reference).
* :func:`forward_infer` -- threshold rule on the execute probability; at
  ``theta = 0.5`` this is exactly the argmax rule.
* :func:`forward_train` -- hard Gumbel decisions forward, soft Gumbel-softmax
  gradient backward (straight-through).

:func:`backward` returns exact gradients for a trace made by
:func:`forward_train`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .numcore import RngState, log_odds, sample_gumbel, softmax

CHECKPOINT_FORMAT_VERSION = 1
EXECUTE_BIAS = 1.0

BLOCK_TENSORS = ("block_w1", "block_b1", "block_w2", "block_b2")
ROUTER_TENSORS = ("router_w1", "router_b1", "router_w2", "router_b2")


def _tanh(z):
    return np.tanh(z)


def _tanh_grad(z, a):
    return 1.0 - a * a


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z, a):
    return (z > 0).astype(z.dtype)


def _silu(z):
    return z / (1.0 + np.exp(-z))


def _silu_grad(z, a):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


ACTIVATIONS = {
    "tanh": (_tanh, _tanh_grad),
    "relu": (_relu, _relu_grad),
    "silu": (_silu, _silu_grad),
}


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 6
    embed_dim: int = 16
    block_hidden: int = 64
    router_hidden: int = 8
    num_classes: int = 4
    activation: str = "tanh"
    input_dim: int | None = None

    def __post_init__(self):
        for name in ("num_layers", "embed_dim", "block_hidden", "router_hidden", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.input_dim is not None and self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")

    @property
    def in_dim(self) -> int:
        return self.embed_dim if self.input_dim is None else self.input_dim

    def num_params(self) -> int:
        """Closed-form parameter count."""
        d, hb, hr = self.embed_dim, self.block_hidden, self.router_hidden
        per_layer = (d * hb + hb + hb * d + d) + (d * hr + hr + hr * 2 + 2)
        return self.in_dim * d + d + self.num_layers * per_layer + d * self.num_classes + self.num_classes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = {k: v for k, v in d.items() if k != "format_version"}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


def layer_key(l: int, name: str) -> str:
    return f"layer{l:02d}/{name}"


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "Model":
        return Model(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    @property
    def dtype(self):
        return self.params["head/w"].dtype

    def layer(self, l: int, name: str) -> np.ndarray:
        return self.params[layer_key(l, name)]

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def block_keys(self) -> list[str]:
        return [layer_key(l, n) for l in range(self.config.num_layers) for n in ("block_w1", "block_w2")]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in sorted(self.params)])

    def with_flat(self, flat: np.ndarray) -> "Model":
        out, i = {}, 0
        for k in sorted(self.params):
            v = self.params[k]
            out[k] = np.asarray(flat[i:i + v.size], dtype=v.dtype).reshape(v.shape)
            i += v.size
        return Model(self.config, out)


def init_model(cfg: ModelConfig, rng: RngState, dtype=np.float32) -> Model:
    """Gaussian fan-in init; router output weights zero and execute bias +1.

    The zeroed router output layer makes the initial execute-minus-bypass gap
    exactly ``EXECUTE_BIAS`` for every input, so a fresh model executes every
    layer at any threshold up to ``sigmoid(1)``.
    """
    d, hb, hr = cfg.embed_dim, cfg.block_hidden, cfg.router_hidden
    p: dict[str, np.ndarray] = {}
    p["embed/w"] = rng.normal((cfg.in_dim, d), 1.0 / np.sqrt(cfg.in_dim))
    p["embed/b"] = np.zeros(d)
    for l in range(cfg.num_layers):
        p[layer_key(l, "block_w1")] = rng.normal((d, hb), 1.0 / np.sqrt(d))
        p[layer_key(l, "block_b1")] = np.zeros(hb)
        p[layer_key(l, "block_w2")] = rng.normal((hb, d), 0.5 / np.sqrt(hb))
        p[layer_key(l, "block_b2")] = np.zeros(d)
        p[layer_key(l, "router_w1")] = rng.normal((d, hr), 1.0 / np.sqrt(d))
        p[layer_key(l, "router_b1")] = np.zeros(hr)
        p[layer_key(l, "router_w2")] = np.zeros((hr, 2))
        p[layer_key(l, "router_b2")] = np.array([EXECUTE_BIAS, 0.0])
    p["head/w"] = rng.normal((d, cfg.num_classes), 1.0 / np.sqrt(d))
    p["head/b"] = np.zeros(cfg.num_classes)
    return Model(cfg, {k: np.ascontiguousarray(v, dtype=dtype) for k, v in p.items()})


@dataclass
class ExecutionTrace:
    """Routing record of one forward pass, arrays shaped ``(tokens, layers, ...)``.

    ``hard`` is the one-hot decision (column 0 = execute). ``gate`` is the
    value multiplying each block output in the forward pass. Training traces
    additionally carry ``soft``, ``noise`` and ``tau``.
    """

    logits: np.ndarray
    probs: np.ndarray
    hard: np.ndarray
    gate: np.ndarray
    soft: np.ndarray | None = None
    noise: np.ndarray | None = None
    tau: float | None = None
    _cache: list = field(default_factory=list, repr=False)

    @property
    def num_tokens(self) -> int:
        return self.logits.shape[0]

    @property
    def num_layers(self) -> int:
        return self.logits.shape[1]

    @property
    def executed(self) -> np.ndarray:
        """Boolean ``(tokens, layers)`` mask of executed layers."""
        return self.hard[:, :, 0] == 1

    @property
    def gaps(self) -> np.ndarray:
        """Execute-minus-bypass router logit gap per decision."""
        return self.logits[:, :, 0] - self.logits[:, :, 1]


def _affine(x, w, b):
    return x @ w + b


def _router(model: Model, l: int, x, act):
    r1 = _affine(x, model.layer(l, "router_w1"), model.layer(l, "router_b1"))
    ar1 = act(r1)
    g = _affine(ar1, model.layer(l, "router_w2"), model.layer(l, "router_b2"))
    return r1, ar1, g


def _block(model: Model, l: int, x, act):
    h1 = _affine(x, model.layer(l, "block_w1"), model.layer(l, "block_b1"))
    a1 = act(h1)
    f = _affine(a1, model.layer(l, "block_w2"), model.layer(l, "block_b2"))
    return h1, a1, f


def _as_input(model: Model, x) -> np.ndarray:
    x = np.asarray(x, dtype=model.dtype)
    if x.ndim != 2 or x.shape[1] != model.config.in_dim:
        raise ValueError(f"expected token batch of shape (T, {model.config.in_dim}), got {x.shape}")
    return x


def _one_hot_execute(execute: np.ndarray) -> np.ndarray:
    hard = np.zeros(execute.shape + (2,), dtype=np.int8)
    hard[..., 0] = execute
    hard[..., 1] = ~execute
    return hard


def _run(model: Model, x, decide, keep_cache: bool):
    """Shared layer loop. ``decide(l, g) -> (gate, extras)`` picks the gate."""
    cfg = model.config
    act, _ = ACTIVATIONS[cfg.activation]
    x = _as_input(model, x)
    T, N = x.shape[0], cfg.num_layers
    h = _affine(x, model.params["embed/w"], model.params["embed/b"])
    logits = np.empty((T, N, 2), dtype=np.float64)
    gates = np.empty((T, N), dtype=np.float64)
    cache = [x]
    for l in range(N):
        r1, ar1, g = _router(model, l, h, act)
        logits[:, l] = g
        gate = decide(l, g)
        gates[:, l] = gate
        executing = gate != 0
        if np.any(executing):
            h1, a1, f = _block(model, l, h, act)
            h_next = h + gate[:, None].astype(h.dtype) * f
        else:
            h1 = a1 = f = None
            h_next = h
        if keep_cache:
            cache.append((h, r1, ar1, h1, a1, f))
        h = h_next
    out = _affine(h, model.params["head/w"], model.params["head/b"])
    if keep_cache:
        cache.append(h)
    return out, logits, gates, cache


def forward_full(model: Model, x) -> np.ndarray:
    """Class logits with every layer executed."""
    out, _, _, _ = _run(model, x, lambda l, g: np.ones(g.shape[0]), False)
    return out


def forward_infer(model: Model, x, theta: float = 0.5, rule: str = "threshold"):
    """Inference routing.

    ``rule="threshold"`` executes layer ``l`` iff ``softmax(g_l)[0] >= theta``,
    evaluated as the equivalent log-odds test ``g0 - g1 >= logit(theta)`` so
    the ``theta = 0.5`` case is bit-exact with ``rule="argmax"``.
    """
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must lie in (0, 1), got {theta}")
    if rule == "threshold":
        cut = log_odds(theta)

        def decide(l, g):
            gap = g[:, 0].astype(np.float64) - g[:, 1].astype(np.float64)
            return (gap >= cut).astype(np.float64)
    elif rule == "argmax":
        def decide(l, g):
            return (np.argmax(g, axis=1) == 0).astype(np.float64)
    else:
        raise ValueError(f"unknown rule {rule!r}")
    out, logits, gates, _ = _run(model, x, decide, False)
    execute = gates == 1.0
    hard = _one_hot_execute(execute)
    return out, ExecutionTrace(logits=logits, probs=softmax(logits), hard=hard, gate=gates)


def forward_train(model: Model, x, tau: float = 1.0, rng: RngState | None = None,
                  noise: np.ndarray | None = None, gate_offset: np.ndarray | None = None):
    """Hard Gumbel forward with a soft straight-through gradient path.

    ``noise`` (shape ``(T, N, 2)``) freezes the Gumbel draws; otherwise they are
    drawn from ``rng``. ``gate_offset`` replaces the straight-through offset
    ``hard - soft`` with a frozen array, which turns the forward into a smooth
    function of the parameters whose gradient equals the straight-through
    gradient at the point the offset was taken from (finite-difference use).
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    x = _as_input(model, x)
    T, N = x.shape[0], model.config.num_layers
    if noise is None:
        if rng is None:
            raise ValueError("either rng or noise is required")
        noise = sample_gumbel(rng, (T, N, 2))
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (T, N, 2):
        raise ValueError(f"noise must have shape {(T, N, 2)}, got {noise.shape}")
    soft = np.empty((T, N, 2))
    hard_exec = np.empty((T, N), dtype=bool)

    def decide(l, g):
        z = g.astype(np.float64) + noise[:, l]
        hard_exec[:, l] = np.argmax(z, axis=1) == 0
        soft[:, l] = softmax(z, tau)
        if gate_offset is None:
            return hard_exec[:, l].astype(np.float64)
        return soft[:, l, 0] + gate_offset[:, l]

    out, logits, gates, cache = _run(model, x, decide, True)
    trace = ExecutionTrace(logits=logits, probs=softmax(logits), hard=_one_hot_execute(hard_exec),
                           gate=gates, soft=soft, noise=noise, tau=float(tau), _cache=cache)
    return out, trace


def forward_dense(model: Model, x):
    """Every layer executes; the trace is shaped like a training trace so that
    :func:`backward` applies (router gradients are exactly zero)."""
    x = _as_input(model, x)
    out, logits, gates, cache = _run(model, x, lambda l, g: np.ones(g.shape[0]), True)
    T, N = gates.shape
    soft = np.zeros((T, N, 2))
    soft[..., 0] = 1.0
    trace = ExecutionTrace(logits=logits, probs=softmax(logits),
                           hard=_one_hot_execute(np.ones((T, N), dtype=bool)), gate=gates,
                           soft=soft, noise=np.zeros((T, N, 2)), tau=1.0, _cache=cache)
    return out, trace


@dataclass
class Upstream:
    """Loss gradients entering the network.

    ``d_logits``: w.r.t. class logits ``(T, C)``. ``d_gate``: w.r.t. the
    straight-through execute value ``(T, N)`` from terms other than the
    residual path (rate loss). ``d_soft``: w.r.t. soft decisions ``(T, N, 2)``
    (entropy loss).
    """

    d_logits: np.ndarray
    d_gate: np.ndarray | None = None
    d_soft: np.ndarray | None = None


def backward(model: Model, trace: ExecutionTrace, upstream: Upstream) -> dict[str, np.ndarray]:
    """Exact straight-through gradients for every parameter (float64)."""
    if trace.soft is None or not trace._cache:
        raise ValueError("backward needs a trace produced by forward_train")
    cfg = model.config
    T, N = trace.num_tokens, cfg.num_layers
    if trace.logits.shape != (T, N, 2) or upstream.d_logits.shape != (T, cfg.num_classes):
        raise ValueError("upstream gradient shape does not match trace")
    _, act_grad = ACTIVATIONS[cfg.activation]
    P = {k: v.astype(np.float64) for k, v in model.params.items()}
    grads = {k: np.zeros_like(v) for k, v in P.items()}
    cache = trace._cache
    x_in = cache[0].astype(np.float64)
    h_final = cache[-1].astype(np.float64)

    d_out = np.asarray(upstream.d_logits, dtype=np.float64)
    grads["head/w"] = h_final.T @ d_out
    grads["head/b"] = d_out.sum(0)
    dh = d_out @ P["head/w"].T
    d_gate_extra = upstream.d_gate
    d_soft_extra = upstream.d_soft
    tau = trace.tau

    for l in range(N - 1, -1, -1):
        h, r1, ar1, h1, a1, f = (None if c is None else np.asarray(c, dtype=np.float64)
                                 for c in cache[l + 1])
        gate = trace.gate[:, l]
        wk = lambda n: layer_key(l, n)  # noqa: E731
        dh_prev = dh.copy()
        if f is not None:
            d_gate = np.einsum("td,td->t", dh, f)
            df = dh * gate[:, None]
            grads[wk("block_w2")] = a1.T @ df
            grads[wk("block_b2")] = df.sum(0)
            da1 = df @ P[wk("block_w2")].T
            dh1 = da1 * act_grad(h1, a1)
            grads[wk("block_w1")] = h.T @ dh1
            grads[wk("block_b1")] = dh1.sum(0)
            dh_prev += dh1 @ P[wk("block_w1")].T
        else:
            # every token bypassed and the gate value is exactly zero; f_l was not
            # evaluated, but the soft path still needs f_l for the router gradient
            act_fn = ACTIVATIONS[cfg.activation][0]
            f = act_fn(h @ P[wk("block_w1")] + P[wk("block_b1")]) @ P[wk("block_w2")] + P[wk("block_b2")]
            d_gate = np.einsum("td,td->t", dh, f)
        if d_gate_extra is not None:
            d_gate = d_gate + d_gate_extra[:, l]
        # straight-through: gate gradient flows through the soft execute prob
        d_soft = np.zeros((T, 2))
        d_soft[:, 0] = d_gate
        if d_soft_extra is not None:
            d_soft = d_soft + d_soft_extra[:, l]
        s = trace.soft[:, l]
        dz = s * (d_soft - np.sum(s * d_soft, axis=1, keepdims=True))
        dg = dz / tau
        grads[wk("router_w2")] = ar1.T @ dg
        grads[wk("router_b2")] = dg.sum(0)
        dar1 = dg @ P[wk("router_w2")].T
        dr1 = dar1 * act_grad(r1, ar1)
        grads[wk("router_w1")] = h.T @ dr1
        grads[wk("router_b1")] = dr1.sum(0)
        dh_prev += dr1 @ P[wk("router_w1")].T
        dh = dh_prev

    grads["embed/w"] = x_in.T @ dh
    grads["embed/b"] = dh.sum(0)
    return grads


# -- checkpoint I/O -----------------------------------------------------------

def model_to_dict(model: Model, extra: dict | None = None) -> dict:
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.config.to_dict(),
        "params": {k: [float(v) for v in model.params[k].astype(np.float32).ravel()]
                   for k in sorted(model.params)},
    }
    if extra:
        doc.update(extra)
    return doc


def model_from_dict(doc: dict) -> Model:
    if doc.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
    cfg = ModelConfig.from_dict(doc["config"])
    shapes = _param_shapes(cfg)
    missing = set(shapes) - set(doc["params"])
    if missing:
        raise ValueError(f"checkpoint is missing tensors: {sorted(missing)}")
    params = {}
    for k, shape in shapes.items():
        arr = np.asarray(doc["params"][k], dtype=np.float32)
        if arr.size != int(np.prod(shape)):
            raise ValueError(f"tensor {k} has {arr.size} values, expected shape {shape}")
        params[k] = arr.reshape(shape)
    return Model(cfg, params)


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, hb, hr = cfg.embed_dim, cfg.block_hidden, cfg.router_hidden
    shapes = {"embed/w": (cfg.in_dim, d), "embed/b": (d,),
              "head/w": (d, cfg.num_classes), "head/b": (cfg.num_classes,)}
    for l in range(cfg.num_layers):
        shapes.update({
            layer_key(l, "block_w1"): (d, hb), layer_key(l, "block_b1"): (hb,),
            layer_key(l, "block_w2"): (hb, d), layer_key(l, "block_b2"): (d,),
            layer_key(l, "router_w1"): (d, hr), layer_key(l, "router_b1"): (hr,),
            layer_key(l, "router_w2"): (hr, 2), layer_key(l, "router_b2"): (2,),
        })
    return shapes


def dumps_checkpoint(model: Model, extra: dict | None = None) -> str:
    return json.dumps(model_to_dict(model, extra), sort_keys=True, separators=(",", ":"))


def param_hash(model: Model) -> str:
    h = hashlib.sha256()
    for k in sorted(model.params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(model.params[k]).tobytes())
    return h.hexdigest()
