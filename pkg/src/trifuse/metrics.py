"""Regression and classification metrics, plus the area-under-curve
aggregate used to summarize performance across missing rates."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

METRIC_FIELDS = ("mae", "corr", "acc7", "acc5", "acc3",
                 "acc2_nonneg", "acc2_pos", "f1_nonneg", "f1_pos")

SCHEMES = ("acc7", "acc5", "acc3", "acc5_sims", "acc3_sims",
           "acc2_nonneg", "acc2_pos")


def _round_half_away(value: float) -> int:
    return int(math.copysign(math.floor(abs(value) + 0.5), value))


def discretize(value: float, scheme: str):
    """Map a continuous score to a class id, or None when excluded.

    Wide-range scores use round-half-away-from-zero then clamping (7, 5, or
    3 classes); the ``*_sims`` schemes bin the [-1, 1] range uniformly (5
    classes) or into negative/neutral/positive bands at +/-0.1.  The binary
    negative/non-negative scheme classifies every value; negative/positive
    excludes exact zeros.
    """
    v = float(value)
    if scheme == "acc7":
        return max(-3, min(3, _round_half_away(v)))
    if scheme == "acc5":
        return max(-2, min(2, _round_half_away(v)))
    if scheme == "acc3":
        return max(-1, min(1, _round_half_away(v)))
    if scheme == "acc5_sims":
        edges = (-0.6, -0.2, 0.2, 0.6)
        return int(np.searchsorted(edges, v, side="right")) - 2
    if scheme == "acc3_sims":
        if v < -0.1:
            return -1
        if v > 0.1:
            return 1
        return 0
    if scheme == "acc2_nonneg":
        return 0 if v < 0 else 1
    if scheme == "acc2_pos":
        if v == 0.0:
            return None
        return 0 if v < 0 else 1
    raise ValueError(f"unknown scheme '{scheme}'")


def _pearson(x: np.ndarray, y: np.ndarray):
    sx = x.std()
    sy = y.std()
    if sx == 0.0 or sy == 0.0:
        return 0.0, True
    cov = ((x - x.mean()) * (y - y.mean())).mean()
    return float(np.clip(cov / (sx * sy), -1.0, 1.0)), False


def _weighted_binary_f1(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    """Support-weighted mean of the per-class F1 scores over classes {0, 1}."""
    total = 0.0
    weight_sum = 0
    for cls in (0, 1):
        tp = int(((y_pred == cls) & (y_true == cls)).sum())
        fp = int(((y_pred == cls) & (y_true != cls)).sum())
        fn = int(((y_pred != cls) & (y_true == cls)).sum())
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = (2 * precision * recall / (precision + recall)
              if precision + recall else 0.0)
        support = int((y_true == cls).sum())
        total += f1 * support
        weight_sum += support
    return total / weight_sum if weight_sum else 0.0


@dataclass
class MetricReport:
    mae: float
    corr: float
    acc7: float
    acc5: float
    acc3: float
    acc2_nonneg: float
    acc2_pos: float
    f1_nonneg: float
    f1_pos: float
    n: int
    corr_degenerate: bool = False

    def to_dict(self) -> dict:
        out = {name: getattr(self, name) for name in METRIC_FIELDS}
        out["n"] = self.n
        out["corr_degenerate"] = self.corr_degenerate
        return out


def evaluate(preds, labels, scale: str = "mosi") -> MetricReport:
    """Score predictions against labels.

    ``scale`` picks the discretization family: "mosi" for labels on
    [-3, 3] (round-and-clamp bins), "sims" for labels on [-1, 1] (uniform
    bins and the +/-0.1 neutral band).  A constant series yields
    correlation 0 with the degenerate flag set.
    """
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValueError("preds and labels must be 1-D and the same length")
    if preds.size < 2:
        raise ValueError("need at least two samples")
    if scale not in ("mosi", "sims"):
        raise ValueError(f"unknown scale '{scale}'")

    mae = float(np.abs(preds - labels).mean())
    corr, degenerate = _pearson(preds, labels)

    fine_schemes = {"acc7": "acc7",
                    "acc5": "acc5" if scale == "mosi" else "acc5_sims",
                    "acc3": "acc3" if scale == "mosi" else "acc3_sims"}
    accs = {}
    for name, scheme in fine_schemes.items():
        pred_cls = np.array([discretize(v, scheme) for v in preds])
        true_cls = np.array([discretize(v, scheme) for v in labels])
        accs[name] = float((pred_cls == true_cls).mean())

    nonneg_pred = np.array([discretize(v, "acc2_nonneg") for v in preds])
    nonneg_true = np.array([discretize(v, "acc2_nonneg") for v in labels])
    acc2_nonneg = float((nonneg_pred == nonneg_true).mean())
    f1_nonneg = _weighted_binary_f1(nonneg_true, nonneg_pred)

    pos_pred = [discretize(v, "acc2_pos") for v in preds]
    pos_true = [discretize(v, "acc2_pos") for v in labels]
    keep = [i for i in range(len(preds))
            if pos_pred[i] is not None and pos_true[i] is not None]
    if keep:
        kept_pred = np.array([pos_pred[i] for i in keep])
        kept_true = np.array([pos_true[i] for i in keep])
        acc2_pos = float((kept_pred == kept_true).mean())
        f1_pos = _weighted_binary_f1(kept_true, kept_pred)
    else:
        acc2_pos = 0.0
        f1_pos = 0.0

    return MetricReport(mae=mae, corr=corr, acc7=accs["acc7"], acc5=accs["acc5"],
                        acc3=accs["acc3"], acc2_nonneg=acc2_nonneg,
                        acc2_pos=acc2_pos, f1_nonneg=f1_nonneg, f1_pos=f1_pos,
                        n=preds.size, corr_degenerate=degenerate)


def auilc(missing_rates, values) -> float:
    """Trapezoidal area under a metric traced over ascending missing rates."""
    rates = np.asarray(missing_rates, dtype=np.float64)
    vals = np.asarray(values, dtype=np.float64)
    if rates.shape != vals.shape or rates.ndim != 1 or rates.size < 2:
        raise ValueError("need equal-length 1-D inputs with at least two points")
    if not (np.diff(rates) > 0).all():
        raise ValueError("missing rates must be strictly ascending")
    steps = np.diff(rates)
    return float((0.5 * (vals[:-1] + vals[1:]) * steps).sum())


@dataclass
class SweepReport:
    """Per-missing-rate metric reports plus their area aggregates."""

    rates: list = field(default_factory=list)
    reports: dict = field(default_factory=dict)   # rate -> MetricReport

    def add(self, rate: float, report: MetricReport) -> None:
        self.rates.append(rate)
        self.reports[rate] = report

    def auilc_per_metric(self) -> dict:
        rates = sorted(self.rates)
        if len(rates) < 2:
            return {}
        return {name: auilc(rates, [getattr(self.reports[r], name) for r in rates])
                for name in METRIC_FIELDS}

    def to_dict(self) -> dict:
        return {
            "rates": sorted(self.rates),
            "per_rate": {repr(r): self.reports[r].to_dict() for r in sorted(self.rates)},
            "auilc": self.auilc_per_metric(),
        }
