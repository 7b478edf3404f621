"""``forest-transfer`` command-line entry point.

Every command reads a flat JSON config, applies the ``--channels``,
``--seed`` and ``--out`` overrides, writes ``resolved_config.json`` into the
output directory and then does its work. Scene inputs come from
``source_dir``/``target_dir`` when set and are regenerated from the config
otherwise, which is deterministic.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import plotting
from .baselines import extract_features, knn_fit, mlr_fit, save_model
from .config import ConfigError, RunConfig
from .eo_data import PlotError, RasterFormatError, load_scene, save_plots, save_raster, save_scene
from .evaluation import emit_report, predict_map
from .model import NonFiniteActivation, load_checkpoint, save_checkpoint
from .synth import CHANNEL_SETS
from .train import TrainingDiverged
from .workflow import (
    baseline_reports,
    make_scenes,
    run_experiment,
    run_finetune,
    run_pretrain,
    scene_config,
    select_channels,
    seunet_report,
    split_target_plots,
)

log = logging.getLogger("forest_transfer")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
COMMANDS = ("synth", "pretrain", "finetune", "predict", "evaluate", "baseline", "experiment")


class DataError(Exception):
    pass


def _out_dir(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise ConfigError("no output directory: set 'out' in the config or pass --out")
    out = Path(cfg.out)
    if not out.parent.is_dir():
        raise DataError(f"parent of output directory does not exist: {out.parent}")
    out.mkdir(exist_ok=True)
    return out


def _scenes(cfg: RunConfig):
    if cfg.source_dir is None and cfg.target_dir is None:
        return make_scenes(cfg)
    source = load_scene(cfg.source_dir) if cfg.source_dir else None
    target = load_scene(cfg.target_dir) if cfg.target_dir else None
    if source is None or target is None:
        generated = make_scenes(cfg)
        source = source or generated[0]
        target = target or generated[1]
    return source, target


def _target(cfg: RunConfig):
    if cfg.target_dir:
        return load_scene(cfg.target_dir)
    return make_scenes(cfg)[1]


def _checkpoint(path, what: str):
    if not path:
        raise ConfigError(f"no {what} checkpoint configured")
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataError(str(exc)) from None


def _check_channels(ckpt, cfg: RunConfig):
    want = CHANNEL_SETS[cfg.channels]
    if ckpt.config.in_channels != want:
        raise DataError(f"channel mismatch: checkpoint has {ckpt.config.in_channels} input "
                        f"channels, --channels {cfg.channels} selects {want}")


def cmd_synth(cfg: RunConfig, out: Path) -> None:
    source, target = make_scenes(cfg)
    save_scene(source, out / "source")
    save_scene(target, out / "target")
    (out / "scene.json").write_text(scene_config(cfg).to_json())


def cmd_pretrain(cfg: RunConfig, out: Path) -> None:
    source, _ = _scenes(cfg)
    ckpt = run_pretrain(source, cfg, log_path=out / "pretrain_log.csv")
    save_checkpoint(ckpt, out / "pretrained")
    log.info("best epoch %d, val loss %.4f", ckpt.epoch, ckpt.val_loss)


def cmd_finetune(cfg: RunConfig, out: Path) -> None:
    ckpt = _checkpoint(cfg.checkpoint, "pretrained")
    _check_channels(ckpt, cfg)
    target = _target(cfg)
    train, test = split_target_plots(target)
    save_plots(train, out / "train_plots.csv")
    save_plots(test, out / "test_plots.csv")
    ft = run_finetune(ckpt, target, train, cfg, log_path=out / "finetune_log.csv")
    save_checkpoint(ft, out / "finetuned")


def cmd_predict(cfg: RunConfig, out: Path) -> None:
    ckpt = _checkpoint(cfg.finetuned_checkpoint or cfg.checkpoint, "model")
    _check_channels(ckpt, cfg)
    target = select_channels(_target(cfg), cfg.channels)
    hmap = predict_map(ckpt, target.eo, target.forest, cfg.patch_size, cfg.predict_margin)
    save_raster(hmap, out / "height_map")
    if cfg.figures:
        plotting.map_figure(hmap, out / "height_map.png")


def cmd_evaluate(cfg: RunConfig, out: Path) -> None:
    target = _target(cfg)
    _, test = split_target_plots(target)
    reports = []
    for path, name in ((cfg.checkpoint, "seunet_nonfinetuned"),
                       (cfg.finetuned_checkpoint, "seunet_finetuned")):
        if path:
            ckpt = _checkpoint(path, name)
            _check_channels(ckpt, cfg)
            reports.append(seunet_report(ckpt, target, test, f"{name}-{cfg.channels}", cfg))
    if not reports:
        raise ConfigError("evaluate needs 'checkpoint' and/or 'finetuned_checkpoint'")
    emit_report(reports, out, cfg.figures)


def cmd_baseline(cfg: RunConfig, out: Path, channel_sets=None) -> None:
    target = _target(cfg)
    train, test = split_target_plots(target)
    reports = []
    for ch in channel_sets or [cfg.channels]:
        c = cfg.override(channels=ch)
        reports += baseline_reports(target, train, test, c, suffix=f"-{ch}")
        feats = extract_features(select_channels(target, ch).eo, train)
        save_model(knn_fit(feats, c.knn_k, c.knn_weighting), out / f"knn-{ch}.json",
                   "train_plots.csv")
        save_model(mlr_fit(feats), out / f"mlr-{ch}.json")
    save_plots(train, out / "train_plots.csv")
    emit_report(reports, out, cfg.figures)


def cmd_experiment(cfg: RunConfig, out: Path) -> None:
    ckpt = _checkpoint(cfg.checkpoint, "pretrained")
    _check_channels(ckpt, cfg)
    reports, ckpts = run_experiment(ckpt, _target(cfg), cfg, suffix=f"-{cfg.channels}")
    ck_dir = out / "checkpoints"
    ck_dir.mkdir(exist_ok=True)
    for name, ft in ckpts.items():
        save_checkpoint(ft, ck_dir / name)
    emit_report(reports, out, cfg.figures)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forest-transfer",
                                description="Forest height mapping with pretrain/fine-tune transfer.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--channels",
                   help="s2, s1s2 or ms; baseline also accepts a comma list such as ms,s2")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (overrides 'out' in the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        channel_sets = args.channels.split(",") if args.channels else None
        if channel_sets and len(channel_sets) > 1 and args.command != "baseline":
            raise ConfigError("only the baseline command accepts several channel sets")
        cfg = RunConfig.load(args.config).override(
            channels=channel_sets[0] if channel_sets else None, seed=args.seed, out=args.out)
        for ch in channel_sets or []:
            cfg.override(channels=ch)  # validates every entry
        out = _out_dir(cfg)
        (out / "resolved_config.json").write_text(cfg.to_json())
        handler = globals()[f"cmd_{args.command}"]
        if args.command == "baseline":
            handler(cfg, out, channel_sets)
        else:
            handler(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, NonFiniteActivation, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, RasterFormatError, PlotError, ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
