"""Plot-level EO features and the MLR / kNN reference methods."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .eo_data import EOStack, PlotError, PlotRecord, PlotTable

KNN_EPSILON = 1e-6
STD_FLOOR = 1e-6


@dataclass
class FeatureVector:
    plot_id: str
    features: np.ndarray
    label: float


def footprint_pixels(grid, plot: PlotRecord) -> tuple[np.ndarray, np.ndarray]:
    """Rows/cols of pixels whose centers lie within the plot radius."""
    row, col = grid.pixel_of(plot.x, plot.y)
    if not grid.contains_pixel(row, col):
        raise PlotError(f"plot {plot.plot_id} lies outside the raster extent")
    reach = int(np.ceil(plot.radius / grid.pixel_size)) + 1
    r = np.arange(max(row - reach, 0), min(row + reach + 1, grid.height))
    c = np.arange(max(col - reach, 0), min(col + reach + 1, grid.width))
    rr, cc = np.meshgrid(r, c, indexing="ij")
    cx = grid.origin_x + (cc + 0.5) * grid.pixel_size
    cy = grid.origin_y - (rr + 0.5) * grid.pixel_size
    inside = (cx - plot.x) ** 2 + (cy - plot.y) ** 2 <= plot.radius ** 2
    if not inside.any():
        return np.array([row]), np.array([col])
    return rr[inside], cc[inside]


def extract_plot_features(stack: EOStack, plot: PlotRecord) -> FeatureVector:
    """Per-channel mean over the plot footprint (center pixel if the footprint is empty)."""
    rows, cols = footprint_pixels(stack.grid, plot)
    vals = stack.data[:, rows, cols].astype(np.float64)
    ok = np.all(np.isfinite(vals), axis=0)
    if not ok.any():
        raise PlotError(f"plot {plot.plot_id}: footprint is entirely nodata")
    return FeatureVector(plot.plot_id, vals[:, ok].mean(axis=1), float(plot.height))


def extract_features(stack: EOStack, plots: PlotTable) -> list[FeatureVector]:
    return [extract_plot_features(stack, p) for p in plots]


def _matrix(features) -> np.ndarray:
    if isinstance(features, np.ndarray):
        return np.atleast_2d(features).astype(np.float64)
    return np.array([f.features for f in features], dtype=np.float64)


# ---------------------------------------------------------------------------
# multiple linear regression


@dataclass
class MLRModel:
    intercept: float
    coefficients: np.ndarray

    def to_dict(self) -> dict:
        return {"method": "mlr", "intercept": self.intercept,
                "coefficients": self.coefficients.tolist()}


def mlr_fit(train: Sequence[FeatureVector]) -> MLRModel:
    """Ordinary least squares with intercept (minimum-norm if rank deficient)."""
    X = _matrix(train)
    y = np.array([f.label for f in train], dtype=np.float64)
    n, p = X.shape
    if n <= p + 1:
        raise ValueError(f"MLR needs more than {p + 1} training plots, got {n}")
    A = np.hstack([np.ones((n, 1)), X])
    beta, _, rank, _ = np.linalg.lstsq(A, y, rcond=None)
    if rank < p + 1:
        warnings.warn(f"MLR design matrix rank {rank} < {p + 1}; using minimum-norm solution")
    return MLRModel(float(beta[0]), beta[1:])


def mlr_predict_raw(model: MLRModel, features) -> np.ndarray:
    return model.intercept + _matrix(features) @ model.coefficients


def mlr_predict(model: MLRModel, features) -> np.ndarray:
    return np.clip(mlr_predict_raw(model, features), 0.0, None)


# ---------------------------------------------------------------------------
# k nearest neighbours


@dataclass
class KNNModel:
    reference: np.ndarray  # standardized features
    labels: np.ndarray
    ids: list[str]
    mean: np.ndarray
    std: np.ndarray
    k: int = 5
    weighting: str = "inverse_distance"

    def to_dict(self) -> dict:
        return {"method": "knn", "k": self.k, "weighting": self.weighting,
                "mean": self.mean.tolist(), "std": self.std.tolist(), "ids": self.ids}


def knn_fit(train: Sequence[FeatureVector], k: int = 5,
            weighting: str = "inverse_distance") -> KNNModel:
    if k < 1:
        raise ValueError("k must be at least 1")
    if not len(train):
        raise ValueError("kNN needs a non-empty reference set")
    if k > len(train):
        raise ValueError(f"k={k} exceeds reference size {len(train)}")
    if weighting not in ("inverse_distance", "uniform"):
        raise ValueError(f"unknown weighting {weighting!r}")
    X = _matrix(train)
    mean = X.mean(axis=0)
    std = np.maximum(X.std(axis=0), STD_FLOOR)
    return KNNModel((X - mean) / std, np.array([f.label for f in train], dtype=np.float64),
                    [f.plot_id for f in train], mean, std, k, weighting)


def knn_predict(model: KNNModel, features) -> np.ndarray:
    Q = (_matrix(features) - model.mean) / model.std
    # ties in distance are broken by plot_id
    id_rank = np.argsort(np.argsort(model.ids, kind="stable"), kind="stable")
    out = np.empty(len(Q))
    for i, q in enumerate(Q):
        d = np.sqrt(((model.reference - q) ** 2).sum(axis=1))
        order = np.lexsort((id_rank, d))[: model.k]
        if d[order[0]] == 0.0:
            out[i] = model.labels[order[0]]
            continue
        if model.weighting == "uniform":
            w = np.ones(model.k)
        else:
            w = 1.0 / (d[order] + KNN_EPSILON)
        out[i] = np.dot(w / w.sum(), model.labels[order])
    return out


def save_model(model, path, reference_table: str | None = None) -> None:
    d = model.to_dict()
    if reference_table is not None:
        d["reference_table"] = str(reference_table)
    Path(path).write_text(json.dumps(d, indent=1, sort_keys=True) + "\n")
