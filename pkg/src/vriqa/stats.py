"""Prediction-performance measures (PLCC, SROCC, RMSE) and fold-wise reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


class UndefinedCorrelationError(ValueError):
    """Raised when a correlation is requested for constant input."""


def _pair(x, y, min_len: int):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < min_len:
        raise ValueError(f"need at least {min_len} values, got {x.size}")
    return x, y


def plcc(x, y) -> float:
    x, y = _pair(x, y, 2)
    xm = x - x.mean()
    ym = y - y.mean()
    vx = float(np.dot(xm, xm))
    vy = float(np.dot(ym, ym))
    if vx == 0.0 or vy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for constant input")
    r = float(np.dot(xm, ym)) / math.sqrt(vx * vy)
    return min(1.0, max(-1.0, r))


def midranks(x) -> np.ndarray:
    """1-based ranks, tied values sharing the mean of their positions."""
    return rankdata(np.asarray(x, dtype=np.float64), method="average")


def srocc(x, y) -> float:
    """Pearson correlation of mid-ranks (exact under ties)."""
    x, y = _pair(x, y, 2)
    return plcc(midranks(x), midranks(y))


def rmse(x, y) -> float:
    x, y = _pair(x, y, 1)
    return math.sqrt(float(np.mean((x - y) ** 2)))


def correlation_measures(pred, mos) -> dict:
    out = {"rmse": rmse(pred, mos)}
    try:
        out["plcc"] = plcc(pred, mos)
        out["srocc"] = srocc(pred, mos)
    except UndefinedCorrelationError:
        out["plcc"] = out["srocc"] = None
    return out


@dataclass
class FoldResult:
    plcc: float | None
    srocc: float | None
    rmse: float
    n: int

    def to_dict(self):
        return {"plcc": self.plcc, "srocc": self.srocc, "rmse": self.rmse, "n": self.n}


@dataclass
class EvalReport:
    folds: list[FoldResult] = field(default_factory=list)
    pooled: FoldResult | None = None
    notes: dict = field(default_factory=lambda: {"plcc_fit": "none (raw scores, no logistic mapping)"})

    @property
    def aggregate(self) -> dict:
        agg = {}
        for key in ("plcc", "srocc", "rmse"):
            vals = [getattr(f, key) for f in self.folds]
            agg[key] = None if not vals or any(v is None for v in vals) else float(np.mean(vals))
        agg["n"] = int(sum(f.n for f in self.folds))
        return agg

    def to_dict(self) -> dict:
        d = {"folds": [f.to_dict() for f in self.folds], "aggregate": self.aggregate, "notes": self.notes}
        if self.pooled is not None:
            d["pooled"] = self.pooled.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["folds", "aggregate"],
    "properties": {
        "folds": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["plcc", "srocc", "rmse", "n"],
                "properties": {
                    "plcc": {"type": ["number", "null"], "minimum": -1, "maximum": 1},
                    "srocc": {"type": ["number", "null"], "minimum": -1, "maximum": 1},
                    "rmse": {"type": "number", "minimum": 0},
                    "n": {"type": "integer", "minimum": 1},
                },
            },
        },
        "aggregate": {
            "type": "object",
            "required": ["plcc", "srocc", "rmse"],
            "properties": {
                "plcc": {"type": ["number", "null"]},
                "srocc": {"type": ["number", "null"]},
                "rmse": {"type": ["number", "null"]},
            },
        },
    },
}


def fold_result(pred, mos) -> FoldResult:
    m = correlation_measures(pred, mos)
    return FoldResult(m["plcc"], m["srocc"], m["rmse"], int(np.size(mos)))


def evaluate(model, samples) -> tuple[float, float, float]:
    """(PLCC, SROCC, RMSE) of ``model`` against the samples' MOS.

    ``model`` is a PredictorModel or any callable mapping a sample to a score.
    Constant predictions raise :class:`UndefinedCorrelationError`.
    """
    from .model import PredictorModel, predict_score

    if not samples:
        raise ValueError("no samples to evaluate")
    if isinstance(model, PredictorModel):
        pred = [predict_score(model, s.dist_image).score for s in samples]
    else:
        pred = [float(model(s)) for s in samples]
    mos = [s.mos for s in samples]
    return plcc(pred, mos), srocc(pred, mos), rmse(pred, mos)
