"""Forecast error metrics, computed on denormalized values."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricReport:
    mae: float
    rmse: float
    mape: float
    corr: float
    mape_masked: int = 0

    def as_row(self) -> dict[str, float]:
        return {"mae": self.mae, "rmse": self.rmse, "mape": self.mape, "corr": self.corr}


def _pair(pred, target) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise MetricError(f"shape mismatch: prediction {p.shape} vs target {t.shape}")
    if p.size == 0:
        raise MetricError("empty input")
    return p.ravel(), t.ravel()


def mae(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.mean(np.abs(p - t)))


def rmse(pred, target) -> float:
    p, t = _pair(pred, target)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def mape(pred, target, eps: float = 1e-3) -> tuple[float, int]:
    """Mean |pred - target| / |target| over entries with |target| >= eps.

    Returns the value and the number of masked (excluded) entries.
    """
    p, t = _pair(pred, target)
    keep = np.abs(t) >= eps
    if not keep.any():
        raise MetricError(f"every target entry is below the MAPE threshold {eps}")
    return float(np.mean(np.abs(p[keep] - t[keep]) / np.abs(t[keep]))), int((~keep).sum())


def pearson_corr(pred, target) -> float:
    p, t = _pair(pred, target)
    pc, tc = p - p.mean(), t - t.mean()
    sp, st = np.sqrt(np.dot(pc, pc)), np.sqrt(np.dot(tc, tc))
    if sp == 0.0 or st == 0.0:
        raise MetricError("correlation undefined for a constant series")
    return float(np.clip(np.dot(pc, tc) / (sp * st), -1.0, 1.0))


def report(pred, target, eps: float = 1e-3) -> MetricReport:
    """All four metrics; CORR is NaN-free only for non-constant series."""
    m, masked = mape(pred, target, eps)
    try:
        c = pearson_corr(pred, target)
    except MetricError:
        c = 0.0
    return MetricReport(mae(pred, target), rmse(pred, target), m, c, masked)
