"""Coarse-to-fine grid search for the shared execution threshold."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import Model, forward_infer

COARSE_STEP = 0.05
FINE_STEP = 0.01
THETA_MAX = 0.5


@dataclass(frozen=True)
class SearchConfig:
    upper: float = THETA_MAX
    coarse_step: float = COARSE_STEP
    fine_step: float = FINE_STEP
    calib_size: int = 300

    def __post_init__(self):
        if not 0 < self.fine_step <= self.coarse_step <= self.upper <= THETA_MAX:
            raise ValueError("need 0 < fine_step <= coarse_step <= upper <= 0.5")

    def coarse_grid(self) -> list[float]:
        n = int(round(self.upper / self.coarse_step))
        return [round(self.coarse_step * i, 10) for i in range(1, n + 1)]

    def fine_grid(self, center: float) -> list[float]:
        lo = max(center - self.coarse_step, 0.0)
        hi = min(center + self.coarse_step, self.upper)
        n = int(round(hi / self.fine_step))
        grid = [round(self.fine_step * i, 10) for i in range(1, n + 1)]
        eps = 1e-9
        return [t for t in grid if lo - eps <= t <= hi + eps and t > 0]


@dataclass
class Candidate:
    theta: float
    phase: str
    accuracy: float
    exec_ratio: float

    def to_dict(self) -> dict:
        return {"theta": self.theta, "phase": self.phase, "accuracy": self.accuracy,
                "exec_ratio": self.exec_ratio}


@dataclass
class CalibrationReport:
    candidates: list[Candidate] = field(default_factory=list)
    selected_theta: float = THETA_MAX

    def to_dict(self) -> dict:
        return {"format_version": 1,
                "candidates": [c.to_dict() for c in self.candidates],
                "selected_theta": self.selected_theta}

    @classmethod
    def from_dict(cls, doc: dict) -> "CalibrationReport":
        return cls([Candidate(**c) for c in doc["candidates"]], float(doc["selected_theta"]))

    def phase(self, name: str) -> list[Candidate]:
        return [c for c in self.candidates if c.phase == name]

    def selected(self) -> Candidate:
        best = [c for c in self.candidates if c.theta == self.selected_theta]
        return best[-1]


def _best(cands: list[Candidate]) -> Candidate:
    # highest accuracy; ties go to the larger threshold (less compute)
    return max(cands, key=lambda c: (c.accuracy, c.theta))


def evaluate_threshold(model: Model, x, y, theta: float) -> tuple[float, float]:
    logits, trace = forward_infer(model, x, theta)
    acc = float(np.mean(np.argmax(logits, axis=1) == y))
    return acc, float(trace.executed.mean())


def calibrate_threshold(model: Model, x, y, cfg: SearchConfig = SearchConfig()) -> CalibrationReport:
    """Pick the threshold in ``(0, 0.5]`` with the best calibration accuracy."""
    if len(y) == 0:
        raise ValueError("calibration set is empty")
    report = CalibrationReport()
    seen: dict[float, Candidate] = {}

    def run(theta: float, phase: str) -> Candidate:
        if theta in seen:
            acc, ratio = seen[theta].accuracy, seen[theta].exec_ratio
        else:
            acc, ratio = evaluate_threshold(model, x, y, theta)
        c = Candidate(theta, phase, acc, ratio)
        seen.setdefault(theta, c)
        report.candidates.append(c)
        return c

    coarse = [run(t, "coarse") for t in cfg.coarse_grid()]
    center = _best(coarse).theta
    fine = [run(t, "fine") for t in cfg.fine_grid(center)]
    report.selected_theta = _best(coarse + fine).theta
    return report
