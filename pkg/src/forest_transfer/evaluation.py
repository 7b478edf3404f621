"""Accuracy metrics, map prediction, stress scenarios and report files."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .eo_data import EOStack, ForestMask, PlotError, PlotTable, SparseLabelRaster
from .model import Checkpoint
from .patches import normalize_array

METRICS_HEADER = ["method", "scenario", "rmse", "rrmse_pct", "bias", "r2", "n"]
SCATTER_HEADER = ["plot_id", "reference_m", "predicted_m"]


@dataclass(frozen=True)
class Metrics:
    rmse: float
    rrmse: Optional[float]  # percent; None when the reference mean is zero
    bias: float
    r2: Optional[float]     # None when the reference has no variance


def compute_metrics(reference, predicted) -> Metrics:
    """RMSE, relative RMSE (% of reference mean), bias (reference minus prediction), R^2."""
    y = np.asarray(reference, dtype=np.float64)
    yhat = np.asarray(predicted, dtype=np.float64)
    if y.shape != yhat.shape or y.ndim != 1:
        raise ValueError("reference and prediction must be 1-D arrays of equal length")
    if y.size < 2:
        raise ValueError("metrics need at least two records")
    resid = y - yhat
    rmse = math.sqrt(np.mean(resid ** 2))
    ybar = y.mean()
    ss_tot = np.sum((y - ybar) ** 2)
    return Metrics(
        rmse=rmse,
        rrmse=rmse / ybar * 100.0 if ybar != 0 else None,
        bias=float(np.mean(resid)),
        r2=float(1.0 - np.sum(resid ** 2) / ss_tot) if ss_tot > 0 else None,
    )


@dataclass
class EvalReport:
    method: str
    records: list  # (plot_id, reference, prediction)
    scenario: str = "full"
    metrics: Metrics = field(init=False)

    def __post_init__(self):
        self.metrics = compute_metrics([r[1] for r in self.records], [r[2] for r in self.records])

    @property
    def n(self) -> int:
        return len(self.records)

    @property
    def reference(self) -> np.ndarray:
        return np.array([r[1] for r in self.records])

    @property
    def predicted(self) -> np.ndarray:
        return np.array([r[2] for r in self.records])

    @property
    def key(self) -> str:
        return self.method if self.scenario == "full" else f"{self.method}__{self.scenario}"


# ---------------------------------------------------------------------------
# map prediction


def _window_starts(length: int, window: int, margin: int) -> list[int]:
    core = window - 2 * margin
    if core <= 0:
        raise ValueError("margin too large for window")
    starts = list(range(0, max(length - window, 0) + 1, core))
    if starts[-1] + window < length:
        starts.append(length - window)
    return starts


def _owner(length: int, starts: list[int], window: int) -> np.ndarray:
    """Index of the window whose center is nearest to each pixel (first wins ties)."""
    centers = np.array(starts) + window / 2.0
    pix = np.arange(length) + 0.5
    return np.argmin(np.abs(pix[:, None] - centers[None, :]), axis=1)


@torch.no_grad()
def predict_array(checkpoint: Checkpoint, eo: np.ndarray, forest: Optional[np.ndarray] = None,
                  window: Optional[int] = None, margin: Optional[int] = None,
                  batch_size: int = 1) -> np.ndarray:
    """Stitch eval-mode predictions from overlapping windows.

    Each pixel takes its value from the window whose center is closest, so
    interior windows contribute their central (window - 2*margin) block and
    edge windows keep their outer margins. Windows run one at a time by
    default so a window's output does not depend on what it is batched with.
    """
    c, h, w = eo.shape
    if c != checkpoint.config.in_channels:
        raise ValueError(f"channel mismatch: checkpoint expects {checkpoint.config.in_channels}, "
                         f"stack has {c}")
    window = window or 256
    margin = window // 4 if margin is None else margin
    if h < window or w < window:
        raise ValueError(f"scene {h}x{w} smaller than prediction window {window}")
    if forest is not None:
        eo = np.where(forest, eo, np.nan)
    z = normalize_array(eo, checkpoint.normalization)
    model = checkpoint.model()
    rs, cs = _window_starts(h, window, margin), _window_starts(w, window, margin)
    row_owner, col_owner = _owner(h, rs, window), _owner(w, cs, window)
    out = np.full((h, w), np.nan, dtype=np.float32)
    jobs = [(i, j) for i in range(len(rs)) for j in range(len(cs))]
    for b in range(0, len(jobs), batch_size):
        chunk = jobs[b:b + batch_size]
        x = torch.from_numpy(np.stack([z[:, rs[i]:rs[i] + window, cs[j]:cs[j] + window]
                                       for i, j in chunk]))
        pred = model(x).numpy()
        for k, (i, j) in enumerate(chunk):
            rows = np.nonzero(row_owner == i)[0]
            cols = np.nonzero(col_owner == j)[0]
            out[np.ix_(rows, cols)] = pred[k][np.ix_(rows - rs[i], cols - cs[j])]
    if forest is not None:
        out[~forest] = np.nan
    return out


def predict_map(checkpoint: Checkpoint, stack: EOStack, mask: Optional[ForestMask] = None,
                window: Optional[int] = None, margin: Optional[int] = None) -> SparseLabelRaster:
    if checkpoint.band_names and tuple(stack.band_names) != tuple(checkpoint.band_names):
        if len(stack.band_names) != len(checkpoint.band_names):
            raise ValueError(f"channel mismatch: checkpoint expects {len(checkpoint.band_names)}, "
                             f"stack has {len(stack.band_names)}")
    out = predict_array(checkpoint, stack.data, None if mask is None else mask.mask,
                        window, margin)
    valid = np.isfinite(out)
    return SparseLabelRaster(stack.grid.with_bands(1), np.where(valid, out, np.nan), valid)


# ---------------------------------------------------------------------------
# plot-level evaluation


def map_lookup(height_map: SparseLabelRaster, plots: PlotTable) -> np.ndarray:
    """Predicted-map value at each plot's center pixel."""
    out = np.empty(len(plots))
    for i, p in enumerate(plots):
        r, c = height_map.grid.pixel_of(p.x, p.y)
        if not height_map.grid.contains_pixel(r, c):
            raise PlotError(f"plot {p.plot_id} lies outside the predicted map")
        if not height_map.valid[r, c]:
            raise PlotError(f"plot {p.plot_id} falls on a nodata pixel of the predicted map")
        out[i] = height_map.values[r, c]
    return out


def map_footprint_lookup(height_map: SparseLabelRaster, plots: PlotTable) -> np.ndarray:
    from .baselines import footprint_pixels

    out = np.empty(len(plots))
    for i, p in enumerate(plots):
        rows, cols = footprint_pixels(height_map.grid, p)
        v = height_map.values[rows, cols]
        out[i] = np.nanmean(v) if np.isfinite(v).any() else np.nan
    return out


def evaluate_plots(method: str, predictor: Callable[[PlotTable], np.ndarray],
                   test_plots: PlotTable, scenario: str = "full") -> EvalReport:
    """Run ``predictor`` on the test plots and assemble the report.

    ``predictor`` maps a plot table to predicted heights; see
    :func:`map_predictor` and :func:`baseline_predictor`.
    """
    pred = np.asarray(predictor(test_plots), dtype=np.float64)
    if pred.shape != (len(test_plots),):
        raise ValueError("predictor returned the wrong number of predictions")
    records = [(p.plot_id, float(p.height), float(v)) for p, v in zip(test_plots, pred)]
    return EvalReport(method, records, scenario)


def map_predictor(height_map: SparseLabelRaster, footprint: bool = False):
    return (lambda plots: map_footprint_lookup(height_map, plots)) if footprint else \
        (lambda plots: map_lookup(height_map, plots))


def baseline_predictor(model, stack: EOStack):
    from .baselines import KNNModel, extract_features, knn_predict, mlr_predict

    predict = knn_predict if isinstance(model, KNNModel) else mlr_predict
    return lambda plots: predict(model, extract_features(stack, plots))


# ---------------------------------------------------------------------------
# scenarios

SCENARIOS = ("full", "scarce_5pct", "censor_below_10m", "censor_above_25m")


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    fraction: float = 0.05
    threshold: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.name not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.name!r}")
        if not 0 < self.fraction <= 1:
            raise ValueError("fraction must lie in (0, 1]")

    @classmethod
    def named(cls, name: str, seed: int = 0) -> "ScenarioSpec":
        thresholds = {"censor_below_10m": 10.0, "censor_above_25m": 25.0}
        return cls(name, threshold=thresholds.get(name, 0.0), seed=seed)


def build_scenario(train_plots: PlotTable, spec: ScenarioSpec) -> PlotTable:
    """Reduce the training plots; test plots are never touched."""
    plots = list(train_plots)
    if spec.name == "scarce_5pct":
        k = max(1, int(round(spec.fraction * len(plots))))
        pick = np.sort(np.random.default_rng(spec.seed).choice(len(plots), size=k, replace=False))
        kept = [plots[i] for i in pick]
    elif spec.name == "censor_below_10m":
        kept = [p for p in plots if p.height >= spec.threshold]
    elif spec.name == "censor_above_25m":
        kept = [p for p in plots if p.height <= spec.threshold]
    else:
        kept = plots
    if not kept:
        raise ValueError(f"scenario {spec.name} leaves no training plots")
    return PlotTable(kept)


# ---------------------------------------------------------------------------
# report files


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def emit_report(reports: Sequence[EvalReport], out_dir, figures: bool = False) -> list[Path]:
    """Write ``metrics.csv`` plus one ``scatter_<method>.csv`` per report.

    With ``figures`` the scatter plots (and a method-by-scenario grid when
    several scenarios are present) are rendered as PNG files as well.
    """
    out = Path(out_dir)
    if not out.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {out}")
    written = [out / "metrics.csv"]
    with open(written[0], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in reports:
            m = r.metrics
            w.writerow([r.method, r.scenario, _fmt(m.rmse), _fmt(m.rrmse), _fmt(m.bias),
                        _fmt(m.r2), r.n])
    for r in reports:
        path = out / f"scatter_{r.key}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SCATTER_HEADER)
            for pid, y, yhat in r.records:
                w.writerow([pid, repr(float(y)), repr(float(yhat))])
        written.append(path)
    if figures and reports:
        from . import plotting

        for r in reports:
            written.append(plotting.scatter_figure(r, out / f"scatter_{r.key}.png"))
        if len({r.scenario for r in reports}) > 1:
            written.append(plotting.scenario_grid(reports, out / "scenario_grid.png"))
    return written


def read_scatter(path) -> list[tuple[str, float, float]]:
    with open(path, newline="") as fh:
        return [(row["plot_id"], float(row["reference_m"]), float(row["predicted_m"]))
                for row in csv.DictReader(fh)]


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
