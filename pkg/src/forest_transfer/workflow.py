"""End-to-end steps: scenes -> patches -> pretrain -> fine-tune -> evaluate."""

from __future__ import annotations

from typing import Optional

from .baselines import extract_features, knn_fit, mlr_fit
from .config import RunConfig
from .eo_data import PlotTable, Scene, rasterize_plots, split_plots_by_attribute
from .evaluation import (
    EvalReport,
    ScenarioSpec,
    baseline_predictor,
    build_scenario,
    evaluate_plots,
    map_predictor,
    predict_map,
)
from .model import Checkpoint
from .patches import (
    PatchSet,
    augment,
    filter_patches_dense,
    filter_patches_sparse,
    fit_normalization,
    normalize_set,
    split_patches,
    tile_scene,
)
from .synth import SceneConfig, channel_subset, default_sites, gen_site_pair, with_seed
from .train import finetune, pretrain


def scene_config(cfg: RunConfig) -> SceneConfig:
    if cfg.scene_config:
        sc = SceneConfig.load(cfg.scene_config)
    else:
        source, target = default_sites(cfg.seed, source_mean=cfg.source_mean_height,
                                       target_mean=cfg.target_mean_height,
                                       gain=cfg.target_gain, offset_sd=cfg.target_offset_sd)
        sc = SceneConfig(source_size=cfg.source_size, target_size=cfg.target_size,
                         n_plots=cfg.n_plots, pixel_size=cfg.pixel_size,
                         source=source, target=target)
    return with_seed(sc, cfg.seed)


def make_scenes(cfg: RunConfig) -> tuple[Scene, Scene]:
    return gen_site_pair(scene_config(cfg))


def select_channels(scene: Scene, channels: str) -> Scene:
    names = channel_subset(scene.eo.band_names, channels)
    return Scene(scene.eo.select(names), scene.forest, scene.heights, scene.plots)


def pretrain_patchset(source: Scene, cfg: RunConfig) -> PatchSet:
    if source.heights is None:
        raise ValueError("source scene has no dense height labels")
    tiles = tile_scene(source.eo, source.heights, source.forest, cfg.patch_size)
    kept = filter_patches_dense(tiles, cfg.min_forest_fraction)
    ps = split_patches(kept, cfg.test_fraction, cfg.val_fraction, cfg.seed)
    ps.train = augment(ps.train, cfg.pretrain_multiplier, cfg.seed, cfg.shift_step)
    return normalize_set(ps, fit_normalization([p for p in ps.train if p.augmentation_tag == "orig"]))


def run_pretrain(source: Scene, cfg: RunConfig, log_path=None) -> Checkpoint:
    source = select_channels(source, cfg.channels)
    ps = pretrain_patchset(source, cfg)
    return pretrain(cfg.model_config(source.eo.grid.bands), ps, cfg.optimizer(),
                    band_names=source.eo.band_names, log_path=log_path)


def finetune_patchset(target: Scene, train_plots: PlotTable, ckpt: Checkpoint,
                      cfg: RunConfig) -> PatchSet:
    labels = rasterize_plots(train_plots, target.grid).masked(target.forest)
    tiles = filter_patches_sparse(tile_scene(target.eo, labels, target.forest, cfg.patch_size))
    ps = split_patches(tiles, 0.0, cfg.finetune_val_fraction, cfg.seed + 1)
    ps.train = augment(ps.train, cfg.finetune_multiplier, cfg.seed + 1, cfg.shift_step)
    return normalize_set(ps, ckpt.normalization)


def run_finetune(ckpt: Checkpoint, target: Scene, train_plots: PlotTable, cfg: RunConfig,
                 log_path=None) -> Checkpoint:
    target = select_channels(target, cfg.channels)
    ps = finetune_patchset(target, train_plots, ckpt, cfg)
    return finetune(ckpt, ps, cfg.optimizer(seed_offset=1), cfg.freeze_bn_stats, log_path)


def split_target_plots(target: Scene) -> tuple[PlotTable, PlotTable]:
    if target.plots is None:
        raise ValueError("target scene has no plots")
    return split_plots_by_attribute(target.plots)


def seunet_report(ckpt: Checkpoint, target: Scene, test_plots: PlotTable, method: str,
                  cfg: RunConfig, scenario: str = "full", height_map=None) -> EvalReport:
    if height_map is None:
        target = select_channels(target, cfg.channels)
        height_map = predict_map(ckpt, target.eo, target.forest, cfg.patch_size,
                                 cfg.predict_margin)
    return evaluate_plots(method, map_predictor(height_map, cfg.plot_lookup == "footprint"),
                          test_plots, scenario)


def baseline_reports(target: Scene, train_plots: PlotTable, test_plots: PlotTable,
                     cfg: RunConfig, scenario: str = "full", methods=("knn", "mlr"),
                     suffix: str = "") -> list[EvalReport]:
    target = select_channels(target, cfg.channels)
    feats = extract_features(target.eo, train_plots)
    out = []
    for m in methods:
        model = knn_fit(feats, cfg.knn_k, cfg.knn_weighting) if m == "knn" else mlr_fit(feats)
        out.append(evaluate_plots(m + suffix, baseline_predictor(model, target.eo),
                                  test_plots, scenario))
    return out


def run_experiment(pretrained: Checkpoint, target: Scene, cfg: RunConfig,
                   scenarios=("full", "scarce_5pct", "censor_below_10m", "censor_above_25m"),
                   suffix: str = "", finetuned_full: Optional[Checkpoint] = None):
    """Scenario x {kNN, fine-tuned SeUNet} report matrix.

    Returns ``(reports, checkpoints)`` with checkpoints keyed by scenario.
    """
    train, test = split_target_plots(target)
    reports, ckpts = [], {}
    for name in scenarios:
        spec = ScenarioSpec.named(name, cfg.seed)
        plots = build_scenario(train, spec)
        if name == "full" and finetuned_full is not None:
            ft = finetuned_full
        else:
            ft = run_finetune(pretrained, target, plots, cfg)
        ckpts[name] = ft
        reports += baseline_reports(target, plots, test, cfg, name, ("knn",), suffix)
        reports.append(seunet_report(ft, target, test, "seunet_finetuned" + suffix, cfg, name))
    return reports, ckpts
