"""Regression and rank-correlation scores for congestion prediction."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats as sps

from .errors import ShapeMismatch, TooFewSamples


@dataclass
class MetricsReport:
    pearson: float
    spearman: float
    kendall: float
    mae: float
    rmse: float
    n: int = 0
    degenerate: bool = False  # a constant input forced correlations to 0
    n_graphs: int = 1
    aggregation: str = "per-graph mean"

    def to_dict(self) -> dict:
        return {"schema_version": 1, **asdict(self)}


def metrics(pred, labels) -> MetricsReport:
    """Pearson, Spearman (average ranks), Kendall tau-b, MAE and RMSE."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if pred.shape != labels.shape:
        raise ShapeMismatch(f"{pred.shape} vs {labels.shape}")
    if pred.size < 2:
        raise TooFewSamples("need at least two samples")
    err = pred - labels
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err * err)))
    if np.ptp(pred) == 0 or np.ptp(labels) == 0:
        return MetricsReport(0.0, 0.0, 0.0, mae, rmse, pred.size, degenerate=True)
    return MetricsReport(
        pearson=float(sps.pearsonr(pred, labels)[0]),
        spearman=float(sps.spearmanr(pred, labels)[0]),
        kendall=float(sps.kendalltau(pred, labels, variant="b")[0]),
        mae=mae,
        rmse=rmse,
        n=int(pred.size),
    )


def mean_metrics(reports: list[MetricsReport]) -> MetricsReport:
    if not reports:
        raise TooFewSamples("no reports to average")
    m = lambda f: float(np.mean([getattr(r, f) for r in reports]))  # noqa: E731
    return MetricsReport(m("pearson"), m("spearman"), m("kendall"), m("mae"), m("rmse"),
                         n=sum(r.n for r in reports),
                         degenerate=any(r.degenerate for r in reports),
                         n_graphs=len(reports))
