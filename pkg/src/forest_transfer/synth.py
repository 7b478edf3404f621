"""Deterministic synthetic source/target scenes standing in for real EO data.

Heights are Gaussian random fields; EO channels respond to height through a
simple sensor model (saturating, linear or weak) with additive noise.  The
target site differs from the source in forest structure (taller, more
variable) and in per-channel calibration, which produces the blind-transfer
bias that fine-tuning is meant to remove.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .eo_data import (
    EOStack,
    ForestMask,
    PlotRecord,
    PlotTable,
    RasterGrid,
    Scene,
    SparseLabelRaster,
)

CHANNEL_KINDS = ("saturating", "linear_height", "weak")

# channel subsets named after the three EO combinations
CHANNEL_SETS = {
    "s2": 7,
    "s1s2": 9,
    "ms": 14,
}


@dataclass(frozen=True)
class ChannelModel:
    name: str
    kind: str
    amplitude: float = 1.0
    offset: float = 0.0
    h_sat: float = 10.0
    noise_sd: float = 0.05

    def __post_init__(self):
        if self.kind not in CHANNEL_KINDS:
            raise ValueError(f"unknown channel kind {self.kind!r}")
        if self.kind != "linear_height" and not self.h_sat > 0:
            raise ValueError(f"{self.name}: h_sat must be positive")
        if self.noise_sd < 0:
            raise ValueError(f"{self.name}: noise_sd must be non-negative")

    def response(self, h: np.ndarray) -> np.ndarray:
        """Noise-free channel value for height ``h`` (metres)."""
        if self.kind == "linear_height":
            return self.amplitude * h + self.offset
        return self.amplitude * (1.0 - np.exp(-h / self.h_sat)) + self.offset


@dataclass(frozen=True)
class SensorModel:
    channels: tuple[ChannelModel, ...]

    def __post_init__(self):
        names = [c.name for c in self.channels]
        if len(set(names)) != len(names):
            raise ValueError("channel names must be unique")

    @property
    def band_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.channels)

    def __len__(self):
        return len(self.channels)


def default_sensor() -> SensorModel:
    """14-channel layout: 7 optical, 2 C-band, 2 L-band, 2 interferometric, 1 spare."""
    optical = [
        ChannelModel(f"s2_b{b}", "saturating", amplitude=1.0, offset=0.1 * i,
                     h_sat=hs, noise_sd=0.03)
        for i, (b, hs) in enumerate(zip((2, 3, 4, 5, 8, 11, 12),
                                        (4.0, 5.0, 6.0, 7.0, 9.0, 5.5, 6.5)))
    ]
    cband = [
        ChannelModel("s1_vv", "weak", amplitude=0.3, offset=-1.0, h_sat=8.0, noise_sd=0.04),
        ChannelModel("s1_vh", "weak", amplitude=0.4, offset=-1.5, h_sat=10.0, noise_sd=0.04),
    ]
    lband = [
        ChannelModel("alos_hh", "saturating", amplitude=1.0, offset=-0.5, h_sat=10.0,
                     noise_sd=0.06),
        ChannelModel("alos_hv", "saturating", amplitude=1.2, offset=-1.0, h_sat=14.0,
                     noise_sd=0.06),
    ]
    insar = [
        ChannelModel("tdx_ichm", "linear_height", amplitude=1.0, offset=0.0, noise_sd=1.2),
        ChannelModel("tdx_coh", "weak", amplitude=-0.3, offset=0.9, h_sat=15.0, noise_sd=0.05),
    ]
    spare = [ChannelModel("spare", "weak", amplitude=0.2, offset=0.0, h_sat=12.0,
                          noise_sd=0.04)]
    return SensorModel(tuple(optical + cband + lband + insar + spare))


def channel_subset(sensor_or_names, channels: str):
    """Band names for a named channel combination (``s2``, ``s1s2``, ``ms``)."""
    if channels not in CHANNEL_SETS:
        raise ValueError(f"unknown channel set {channels!r}; expected one of {list(CHANNEL_SETS)}")
    names = (sensor_or_names.band_names if isinstance(sensor_or_names, SensorModel)
             else tuple(sensor_or_names))
    return names[:CHANNEL_SETS[channels]]


@dataclass(frozen=True)
class SiteParams:
    name: str
    mean_height: float
    height_spread: float
    correlation_length: float = 4.0
    forest_fraction: float = 0.85
    forest_correlation_length: float = 12.0
    channel_gains: Optional[tuple[float, ...]] = None
    channel_offsets: Optional[tuple[float, ...]] = None  # in units of channel noise sd
    seed: int = 0

    def __post_init__(self):
        if not self.mean_height > 0:
            raise ValueError("mean_height must be positive")
        if not 0 < self.forest_fraction <= 1:
            raise ValueError("forest_fraction must lie in (0, 1]")
        if self.correlation_length < 1:
            raise ValueError("correlation_length must be >= 1")


def default_sites(seed: int = 0, n_channels: int = 14, source_mean: float = 10.8,
                  target_mean: float = 15.0, gain: float = 1.10,
                  offset_sd: float = 1.5) -> tuple[SiteParams, SiteParams]:
    """Source/target pair: 10.8 m vs 15.0 m mean height, +10% gain and +0.5 sd offset.

    Height spread scales with the mean so the target is both taller and more variable.
    """
    source = SiteParams("source", mean_height=source_mean,
                        height_spread=4.0 * source_mean / 10.8, seed=seed)
    target = SiteParams("target", mean_height=target_mean,
                        height_spread=5.5 * target_mean / 15.0, seed=seed + 1,
                        channel_gains=(gain,) * n_channels,
                        channel_offsets=(offset_sd,) * n_channels)
    return source, target


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in key])


def gaussian_random_field(shape, correlation_length: float, rng) -> np.ndarray:
    """Zero-mean unit-variance field: white noise shaped by a Gaussian spectrum."""
    h, w = shape
    noise = rng.standard_normal((h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    # Fourier transform of a spatial Gaussian with sd = correlation_length pixels
    kernel = np.exp(-2.0 * np.pi ** 2 * (fx ** 2 + fy ** 2) * correlation_length ** 2)
    field = np.fft.irfft2(np.fft.rfft2(noise) * kernel, s=(h, w))
    field -= field.mean()
    sd = field.std()
    return field / sd if sd > 0 else field


def gen_height_field(grid: RasterGrid, site: SiteParams) -> SparseLabelRaster:
    z = gaussian_random_field(grid.shape, site.correlation_length, _rng(site.seed, 1))
    heights = np.clip(site.mean_height + site.height_spread * z, 0.0, None)
    return SparseLabelRaster(grid.with_bands(1), heights.astype(np.float32),
                             np.ones(grid.shape, dtype=bool))


def gen_forest_mask(grid: RasterGrid, site: SiteParams) -> ForestMask:
    if site.forest_fraction >= 1:
        return ForestMask(grid.with_bands(1), np.ones(grid.shape, dtype=bool))
    z = gaussian_random_field(grid.shape, site.forest_correlation_length, _rng(site.seed, 2))
    cut = np.quantile(z, 1.0 - site.forest_fraction)
    return ForestMask(grid.with_bands(1), z >= cut)


def gen_eo_channels(heights: SparseLabelRaster, sensor: SensorModel,
                    site: Optional[SiteParams] = None,
                    forest: Optional[ForestMask] = None) -> EOStack:
    """Simulate every sensor channel; non-forest pixels respond as zero height.

    ``site`` supplies the calibration shift (gains multiply the noise-free
    signal, offsets are added in units of the channel noise sd) and the seed.
    """
    n = len(sensor)
    site = site or SiteParams("unshifted", 1.0, 0.0)
    gains = site.channel_gains or (1.0,) * n
    offsets = site.channel_offsets or (0.0,) * n
    if len(gains) != n or len(offsets) != n:
        raise ValueError(f"site shift has {len(gains)}/{len(offsets)} entries for {n} channels")
    h = np.nan_to_num(heights.values.astype(np.float64), nan=0.0)
    if forest is not None:
        h = np.where(forest.mask, h, 0.0)
    out = np.empty((n,) + heights.grid.shape, dtype=np.float32)
    for i, ch in enumerate(sensor.channels):
        signal = gains[i] * ch.response(h) + offsets[i] * ch.noise_sd
        if ch.noise_sd > 0:
            signal = signal + ch.noise_sd * _rng(site.seed, 100 + i).standard_normal(h.shape)
        out[i] = signal
    return EOStack(heights.grid.with_bands(n), out, sensor.band_names)


def radius_for_heights(heights: np.ndarray) -> np.ndarray:
    """Plot radius by height tercile: short 5.64 m, middle 9 m, tall 12.62 m."""
    lo, hi = np.quantile(heights, [1 / 3, 2 / 3])
    return np.where(heights < lo, 5.64, np.where(heights < hi, 9.0, 12.62))


def sample_plots(heights: SparseLabelRaster, forest: ForestMask, n: int, seed: int,
                 prefix: str = "P") -> PlotTable:
    """Place ``n`` plots at distinct, uniformly drawn forest pixel centers."""
    rows, cols = np.nonzero(forest.mask & heights.valid)
    if n > rows.size:
        raise ValueError(f"cannot place {n} plots on {rows.size} forest pixels")
    pick = np.sort(_rng(seed, 3).choice(rows.size, size=n, replace=False))
    rows, cols = rows[pick], cols[pick]
    h = heights.values[rows, cols].astype(np.float64)
    radii = radius_for_heights(h) if n else h
    width = len(str(max(n, 1)))
    plots = []
    for i, (r, c) in enumerate(zip(rows, cols)):
        x, y = heights.grid.pixel_center(int(r), int(c))
        plots.append(PlotRecord(f"{prefix}{i:0{width}d}", x, y, float(radii[i]),
                                float(np.float32(h[i]))))
    return PlotTable(plots)


@dataclass
class SceneConfig:
    """Everything needed to regenerate a site pair; serialised as ``scene.json``."""

    source_size: int = 1024
    target_size: int = 1024
    n_plots: int = 1064
    pixel_size: float = 10.0
    seed: int = 0
    source: Optional[SiteParams] = None
    target: Optional[SiteParams] = None
    sensor: SensorModel = field(default_factory=default_sensor)

    def __post_init__(self):
        src, tgt = default_sites(self.seed, len(self.sensor))
        self.source = self.source or src
        self.target = self.target or tgt

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        def site(v):
            if v is None:
                return None
            v = dict(v)
            for k in ("channel_gains", "channel_offsets"):
                if v.get(k) is not None:
                    v[k] = tuple(v[k])
            return SiteParams(**v)

        d = dict(d)
        sensor = d.pop("sensor", None)
        sensor = (SensorModel(tuple(ChannelModel(**c) for c in sensor["channels"]))
                  if sensor else default_sensor())
        return cls(source=site(d.pop("source", None)), target=site(d.pop("target", None)),
                   sensor=sensor, **d)

    @classmethod
    def load(cls, path) -> "SceneConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def gen_scene(size: int, site: SiteParams, sensor: SensorModel, pixel_size: float = 10.0,
              origin=(0.0, None)) -> Scene:
    ox, oy = origin
    grid = RasterGrid(size, size, 1, pixel_size, ox, size * pixel_size if oy is None else oy)
    heights = gen_height_field(grid, site)
    forest = gen_forest_mask(grid, site)
    eo = gen_eo_channels(heights, sensor, site, forest)
    return Scene(eo, forest, heights.masked(forest))


def gen_site_pair(cfg: SceneConfig) -> tuple[Scene, Scene]:
    """Source scene with dense heights, target scene with heights and sampled plots."""
    source = gen_scene(cfg.source_size, cfg.source, cfg.sensor, cfg.pixel_size)
    target = gen_scene(cfg.target_size, cfg.target, cfg.sensor, cfg.pixel_size)
    target.plots = sample_plots(target.heights, target.forest, cfg.n_plots, cfg.target.seed)
    return source, target


def with_seed(cfg: SceneConfig, seed: int) -> SceneConfig:
    return replace(cfg, seed=seed,
                   source=replace(cfg.source, seed=seed),
                   target=replace(cfg.target, seed=seed + 1))
