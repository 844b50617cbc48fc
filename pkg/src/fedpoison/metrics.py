"""Evaluation metrics: main-task accuracy, adversary-task accuracies, and a
PCA projection of latent features for inspection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .data import Dataset
from .errors import DomainError, MetricError


@dataclass
class MetricsRow:
    """Per-round evaluation of the global model."""

    round_index: int
    mta: float
    ts_ata: float | None
    ts_ata_target: int | None
    max_ata: float
    max_ata_class: int
    val_loss: float
    chosen_target: int | None


@dataclass
class PcaProjection:
    coords: np.ndarray                 # (n, out_dim)
    components: np.ndarray             # (dim, out_dim), orthonormal columns
    explained_variance_ratio: np.ndarray
    labels: np.ndarray | None = None
    degenerate: bool = False


def mta_from_predictions(preds: np.ndarray, labels: np.ndarray, source: int) -> float:
    """Accuracy over the non-source slice."""
    mask = labels != source
    if not mask.any():
        raise MetricError("no non-source samples to score the main task on")
    return float(np.mean(preds[mask] == labels[mask]))


def ts_ata_from_predictions(preds: np.ndarray, labels: np.ndarray,
                            source: int, target: int) -> float:
    """Fraction of source-class samples predicted as the target class."""
    if target == source:
        raise DomainError("ts-ATA target must differ from the source class")
    mask = labels == source
    if not mask.any():
        raise MetricError("no source-class samples to score the attack on")
    return float(np.mean(preds[mask] == target))


def max_ata_from_predictions(preds: np.ndarray, labels: np.ndarray, source: int,
                             num_classes: int) -> tuple[float, int]:
    """Max ts-ATA over all non-source targets; ties break to the lowest class."""
    mask = labels == source
    if not mask.any():
        raise MetricError("no source-class samples to score the attack on")
    src_preds = preds[mask]
    counts = np.bincount(src_preds, minlength=num_classes).astype(np.float64)
    counts[source] = -1.0
    best = int(np.argmax(counts))
    return float(counts[best] / src_preds.size), best


def mta(model: nn.Model, val: Dataset, source: int) -> float:
    return mta_from_predictions(nn.predict(model, val.x), val.y, source)


def ts_ata(model: nn.Model, val: Dataset, source: int, target: int) -> float:
    return ts_ata_from_predictions(nn.predict(model, val.x), val.y, source, target)


def max_ata(model: nn.Model, val: Dataset, source: int) -> tuple[float, int]:
    return max_ata_from_predictions(nn.predict(model, val.x), val.y, source, val.num_classes)


def evaluate_round(model: nn.Model, val: Dataset, source: int, round_index: int,
                   ts_target: int | None, chosen_target: int | None) -> MetricsRow:
    """One forward pass over the validation set feeding every metric."""
    probs = nn.probabilities(model, val.x)
    preds = probs.argmax(axis=1)
    loss = nn.cross_entropy(probs, val.y)
    row_ts = None
    if ts_target is not None:
        row_ts = ts_ata_from_predictions(preds, val.y, source, ts_target)
    mx, mx_class = max_ata_from_predictions(preds, val.y, source, val.num_classes)
    return MetricsRow(
        round_index=round_index,
        mta=mta_from_predictions(preds, val.y, source),
        ts_ata=row_ts,
        ts_ata_target=ts_target,
        max_ata=mx,
        max_ata_class=mx_class,
        val_loss=loss,
        chosen_target=chosen_target,
    )


def pca_project(features: np.ndarray, out_dim: int = 2,
                labels: np.ndarray | None = None) -> PcaProjection:
    """Mean-centered projection onto the top eigenvectors of the sample
    covariance. A zero-variance input yields a degenerate projection with
    explained variance 0 rather than an error."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DomainError("PCA needs a (n >= 2, dim) feature matrix")
    if x.shape[1] < out_dim:
        raise DomainError(f"feature dim {x.shape[1]} smaller than out_dim {out_dim}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:out_dim]
    comps = eigvecs[:, order]
    top = np.maximum(eigvals[order], 0.0)
    total = float(np.maximum(eigvals, 0.0).sum())
    degenerate = total <= 0.0
    ratio = top / total if not degenerate else np.zeros(out_dim)
    return PcaProjection(
        coords=centered @ comps,
        components=comps,
        explained_variance_ratio=ratio,
        labels=None if labels is None else np.asarray(labels),
        degenerate=degenerate,
    )
