"""Synthetic depth-gated classification task.

A token's latent ``z`` is Gaussian and its class is the argmax of ``z`` along
``num_classes`` orthonormal directions. The observed input is ``h^k(z)`` plus
noise, where ``h(x) = phi(Q x)`` for a frozen random rotation ``Q`` and the
smooth monotone map ``phi(y) = y + warp * sin(y)``. Tokens with a larger depth
tag ``k`` need more layers to undo the warping, which is what gives routing
something to learn.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .numcore import RngState

DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TaskConfig:
    embed_dim: int = 16
    num_classes: int = 4
    depth_levels: tuple[int, ...] = (0, 4)
    tokens_per_sample: int = 8
    num_samples: int = 5000
    noise_std: float = 0.05
    warp: float = 0.9
    warp_freq: float = 2.0
    margin: float = 0.5
    seed: int = 0
    train_frac: float = 0.7
    calib_samples: int = 300

    def __post_init__(self):
        object.__setattr__(self, "depth_levels", tuple(int(k) for k in self.depth_levels))
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        for name in ("embed_dim", "tokens_per_sample", "num_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.depth_levels or min(self.depth_levels) < 0:
            raise ValueError("depth_levels must be a non-empty list of non-negative counts")
        if self.num_classes > self.embed_dim:
            raise ValueError("num_classes must not exceed embed_dim")
        if not 0.0 <= self.warp < 1.0:
            raise ValueError("warp must lie in [0, 1) to keep the hidden map invertible")
        if not self.warp_freq > 0 or self.margin < 0:
            raise ValueError("warp_freq must be positive and margin non-negative")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if not 0.0 < self.train_frac < 1.0:
            raise ValueError("train_frac must lie in (0, 1)")
        n_train = int(round(self.train_frac * self.num_samples))
        if n_train + self.calib_samples > self.num_samples:
            raise ValueError("train split plus calibration samples exceed num_samples")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depth_levels"] = list(self.depth_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskConfig":
        d = {k: v for k, v in d.items() if k != "format_version"}
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown task config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Dataset:
    config: TaskConfig
    inputs: np.ndarray          # (tokens, embed_dim) float32
    labels: np.ndarray          # (tokens,) int64
    required_depth: np.ndarray  # (tokens,) int64
    splits: dict[str, np.ndarray] = field(default_factory=dict)  # sample indices

    def token_index(self, split: str) -> np.ndarray:
        """Token rows belonging to the samples of ``split``."""
        tps = self.config.tokens_per_sample
        samples = self.splits[split]
        return (samples[:, None] * tps + np.arange(tps)[None, :]).ravel()

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.token_index(name)
        return self.inputs[idx], self.labels[idx]

    def to_dict(self) -> dict:
        return {
            "format_version": DATASET_FORMAT_VERSION,
            "config": self.config.to_dict(),
            "inputs": [[float(v) for v in row] for row in self.inputs],
            "labels": [int(v) for v in self.labels],
            "required_depth": [int(v) for v in self.required_depth],
            "splits": {k: [int(i) for i in v] for k, v in self.splits.items()},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, doc: dict) -> "Dataset":
        if doc.get("format_version") != DATASET_FORMAT_VERSION:
            raise ValueError(f"unsupported dataset format_version {doc.get('format_version')!r}")
        cfg = TaskConfig.from_dict(doc["config"])
        inputs = np.asarray(doc["inputs"], dtype=np.float32)
        labels = np.asarray(doc["labels"], dtype=np.int64)
        depth = np.asarray(doc["required_depth"], dtype=np.int64)
        if inputs.ndim != 2 or inputs.shape[0] != labels.size or labels.size != depth.size:
            raise ValueError("dataset arrays have inconsistent lengths")
        splits = {k: np.asarray(v, dtype=np.int64) for k, v in doc["splits"].items()}
        for name in ("train", "calib", "test"):
            if name not in splits:
                raise ValueError(f"dataset is missing split {name!r}")
        return cls(cfg, inputs, labels, depth, splits)


class HiddenMap:
    """The frozen warp ``h(x) = phi(Q x)`` and its inverse."""

    def __init__(self, dim: int, warp: float, freq: float, rng: RngState):
        self.warp = warp
        self.freq = freq
        a = rng.normal((dim, dim))
        q, r = np.linalg.qr(a)
        self.rotation = q * np.sign(np.diag(r))[None, :]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        y = x @ self.rotation.T
        return y + self.warp * np.sin(self.freq * y) / self.freq

    def inverse(self, x: np.ndarray) -> np.ndarray:
        # phi(y / w) * w = (w y) + warp sin(w y) reduces to the unit-frequency case
        y = _phi_inverse(x * self.freq, self.warp) / self.freq
        return y @ self.rotation


def _phi_inverse(t: np.ndarray, warp: float, iters: int = 60) -> np.ndarray:
    # phi(y) - t is increasing with phi(y) in [y - warp, y + warp]; bracket then Newton
    lo, hi = t - warp, t + warp
    y = t.copy()
    for _ in range(iters):
        r = y + warp * np.sin(y) - t
        lo = np.where(r < 0, y, lo)
        hi = np.where(r > 0, y, hi)
        step = y - r / (1.0 + warp * np.cos(y))
        inside = (step > lo) & (step < hi)
        y = np.where(inside, step, 0.5 * (lo + hi))
    return y


class Task:
    """Generator state: class directions and warp, both frozen by the seed."""

    def __init__(self, cfg: TaskConfig):
        self.config = cfg
        root = RngState(cfg.seed)
        self._map_rng, self._dir_rng, self._sample_rng = root.spawn(3)
        self.hidden = HiddenMap(cfg.embed_dim, cfg.warp, cfg.warp_freq, self._map_rng)
        q, _ = np.linalg.qr(self._dir_rng.normal((cfg.embed_dim, cfg.num_classes)))
        self.directions = q  # orthonormal columns

    def classify_latent(self, z: np.ndarray) -> np.ndarray:
        return np.argmax(z @ self.directions, axis=1)

    def decode(self, inputs: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Reference decoder: undo ``depth`` warps then classify."""
        z = np.asarray(inputs, dtype=np.float64).copy()
        for k in range(int(depth.max(initial=0)), 0, -1):
            sel = depth >= k
            z[sel] = self.hidden.inverse(z[sel])
        return self.classify_latent(z)

    def generate(self) -> Dataset:
        cfg = self.config
        rng = self._sample_rng
        n_tok = cfg.num_samples * cfg.tokens_per_sample
        C, d = cfg.num_classes, cfg.embed_dim
        labels = rng.permutation(np.arange(n_tok) % C)
        levels = np.asarray(cfg.depth_levels)
        depth = levels[rng.permutation(np.arange(n_tok) % len(levels))]

        # latent with prescribed class: iid projections on the class directions,
        # with the largest swapped into the label's slot
        u = rng.normal((n_tok, C))
        top = np.argmax(u, axis=1)
        rows = np.arange(n_tok)
        u_lab = u[rows, labels].copy()
        u[rows, labels] = u[rows, top]
        u[rows, top] = u_lab
        u[rows, labels] += cfg.margin
        w = rng.normal((n_tok, d))
        w -= (w @ self.directions) @ self.directions.T
        z = u @ self.directions.T + w

        x = z.copy()
        for k in range(1, int(levels.max()) + 1):
            sel = depth >= k
            x[sel] = self.hidden(x[sel])
        x += cfg.noise_std * rng.normal(x.shape)

        perm = rng.permutation(cfg.num_samples)
        n_train = int(round(cfg.train_frac * cfg.num_samples))
        splits = {
            "train": np.sort(perm[:n_train]),
            "calib": np.sort(perm[n_train:n_train + cfg.calib_samples]),
            "test": np.sort(perm[n_train + cfg.calib_samples:]),
        }
        return Dataset(cfg, x.astype(np.float32), labels.astype(np.int64), depth.astype(np.int64), splits)


def generate_dataset(cfg: TaskConfig) -> Dataset:
    return Task(cfg).generate()
