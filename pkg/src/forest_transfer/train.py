"""Losses, optimizer, learning-rate schedule, pretraining and fine-tuning."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import torch
from torch import nn

from .model import (Checkpoint, ModelConfig, NonFiniteActivation, Normalization, SeUNet,
                    build_model, clone_params, init_parameters)

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    max_lr: float = 1e-2
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8
    batch_size: int = 8
    epochs_pretrain: int = 100
    epochs_finetune: int = 5
    warmup_fraction: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.max_lr < 0:
            raise ValueError("max_lr must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def masked_mse(pred: torch.Tensor, target: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Mean squared error over valid pixels only (pooled across a batch)."""
    n = valid.sum()
    if int(n) == 0:
        raise ValueError("masked_mse needs at least one valid pixel")
    diff = torch.where(valid, pred - torch.nan_to_num(target), torch.zeros_like(pred))
    return (diff ** 2).sum() / n


def _cos(start: float, end: float, pct: float) -> float:
    return end + (start - end) / 2.0 * (math.cos(math.pi * pct) + 1.0)


def one_cycle_lr(step: int, total_steps: int, cfg: OptimizerConfig) -> float:
    """Cosine warm-up from max_lr/div_factor to max_lr, then cosine anneal to
    max_lr/(div_factor*final_div_factor). Phase boundaries follow the usual
    convention: warm-up ends at step warmup_fraction*total_steps - 1 and the
    anneal ends at the last step."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    initial = cfg.max_lr / cfg.div_factor
    final = initial / cfg.final_div_factor
    warm_end = cfg.warmup_fraction * total_steps - 1
    last = total_steps - 1
    if step <= warm_end:
        return _cos(initial, cfg.max_lr, step / warm_end) if warm_end > 0 else cfg.max_lr
    if last <= warm_end:
        return cfg.max_lr
    return _cos(cfg.max_lr, final, (step - warm_end) / (last - warm_end))


@dataclass
class TrainState:
    params: dict                  # name -> trainable tensor (updated in place)
    exp_avg: dict
    exp_avg_sq: dict
    step: int = 0
    best_val_loss: float = math.inf
    best_params: Optional[dict] = None
    best_epoch: int = 0

    @classmethod
    def fresh(cls, params: dict) -> "TrainState":
        return cls(params, {k: torch.zeros_like(v) for k, v in params.items()},
                   {k: torch.zeros_like(v) for k, v in params.items()})


def decays(name: str, tensor: torch.Tensor) -> bool:
    """Weight decay applies to conv/linear kernels only, never biases or batch norm."""
    return name.endswith("weight") and tensor.ndim >= 2


@torch.no_grad()
def adam_step(state: TrainState, gradients: dict, lr: float, cfg: OptimizerConfig) -> TrainState:
    """Adam with bias correction and decoupled (multiplicative) weight decay."""
    for name, g in gradients.items():
        if not torch.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient for {name} at step {state.step}")
    b1, b2 = cfg.betas
    state.step += 1
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, p in state.params.items():
        g = gradients[name]
        m = state.exp_avg[name].mul_(b1).add_(g, alpha=1.0 - b1)
        v = state.exp_avg_sq[name].mul_(b2).addcmul_(g, g, value=1.0 - b2)
        if decays(name, p):
            p.mul_(1.0 - lr * cfg.weight_decay)
        p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + cfg.epsilon))
    return state


# ---------------------------------------------------------------------------
# loops


def _tensors(patches, dtype=torch.float32):
    if not patches:
        return None
    for p in patches:
        if not p.normalized:
            raise ValueError("training patches must be normalized first")
    x = torch.from_numpy(np.stack([p.eo for p in patches])).to(dtype)
    y = torch.from_numpy(np.nan_to_num(np.stack([p.labels for p in patches]))).to(dtype)
    m = torch.from_numpy(np.stack([p.valid for p in patches]))
    return x, y, m


@torch.no_grad()
def evaluate_loss(model: SeUNet, data, batch_size: int = 8) -> float:
    """Pixel-pooled masked MSE in eval mode (predictions clamped at 0)."""
    x, y, m = data
    model.eval()
    sse, n = 0.0, 0
    for i in range(0, len(x), batch_size):
        pred = model(x[i:i + batch_size])
        mm = m[i:i + batch_size]
        sse += float(((pred - y[i:i + batch_size])[mm] ** 2).sum())
        n += int(mm.sum())
    if n == 0:
        raise ValueError("no valid pixels in evaluation data")
    return sse / n


def _run(model: SeUNet, train, val, opt: OptimizerConfig, epochs: int,
         freeze_bn_stats: bool = False, log_path=None):
    x, y, m = train
    n = len(x)
    per_epoch = math.ceil(n / opt.batch_size)
    total = max(epochs * per_epoch, 1)
    trainable = {k: p for k, p in model.named_parameters()}
    state = TrainState.fresh(trainable)
    history = []
    rng = np.random.default_rng(opt.seed)
    for epoch in range(1, epochs + 1):
        model.train()
        if freeze_bn_stats:
            for mod in model.modules():
                if isinstance(mod, nn.BatchNorm2d):
                    mod.eval()
        order = rng.permutation(n)
        losses, lr = [], 0.0
        for b in range(per_epoch):
            idx = torch.from_numpy(order[b * opt.batch_size:(b + 1) * opt.batch_size])
            mb = m[idx]
            if not mb.any():
                continue
            lr = one_cycle_lr(state.step, total, opt)
            model.zero_grad(set_to_none=True)
            try:
                loss = masked_mse(model(x[idx]), y[idx], mb)
            except NonFiniteActivation as exc:
                raise TrainingDiverged(f"{exc} in epoch {epoch}") from exc
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"loss is {loss.item()} in epoch {epoch}")
            loss.backward()
            grads = {k: (p.grad if p.grad is not None else torch.zeros_like(p))
                     for k, p in trainable.items()}
            adam_step(state, grads, lr, opt)
            losses.append(loss.item())
        train_loss = float(np.mean(losses)) if losses else float("nan")
        val_loss = evaluate_loss(model, val, opt.batch_size) if val is not None else train_loss
        if not math.isfinite(val_loss):
            raise TrainingDiverged(f"validation loss is {val_loss} in epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr})
        log.info("epoch %d train %.4f val %.4f lr %.2e", epoch, train_loss, val_loss, lr)
        if val_loss < state.best_val_loss:
            state.best_val_loss = val_loss
            state.best_params = clone_params(model.state_dict())
            state.best_epoch = epoch
    if log_path is not None:
        write_log(history, log_path)
    return state, history


def write_log(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for h in history:
            w.writerow([h["epoch"], repr(h["train_loss"]), repr(h["val_loss"]), repr(h["lr"])])


def patch_fingerprint(patches) -> str:
    h = hashlib.sha256()
    for p in patches:
        h.update(repr((p.origin, p.augmentation_tag)).encode())
        h.update(np.ascontiguousarray(p.eo).tobytes())
        h.update(np.ascontiguousarray(p.labels).tobytes())
    return h.hexdigest()[:16]


def pretrain(config: ModelConfig, patchset, opt: OptimizerConfig = OptimizerConfig(),
             band_names=(), log_path=None) -> Checkpoint:
    """Train from scratch on dense labels; keep the best-validation epoch."""
    if not patchset.train:
        raise ValueError("empty training set")
    if patchset.normalization is None:
        raise ValueError("patch set carries no normalization statistics")
    if patchset.train[0].eo.shape[0] != config.in_channels:
        raise ValueError(f"patches have {patchset.train[0].eo.shape[0]} channels, "
                         f"model expects {config.in_channels}")
    params = init_parameters(config, config.seed)
    # Adam moves each weight by ~lr per step, so regressing raw metres would
    # spend a short schedule learning the label offset and spread
    labels = np.concatenate([p.labels[p.valid] for p in patchset.train]).astype(np.float64)
    params["out_shift"] = torch.tensor(float(labels.mean()))
    params["out_scale"] = torch.tensor(max(float(labels.std()), 1e-6))
    model = build_model(config, params)
    state, history = _run(model, _tensors(patchset.train), _tensors(patchset.val), opt,
                          opt.epochs_pretrain, log_path=log_path)
    params = state.best_params if state.best_params is not None else clone_params(model.state_dict())
    return Checkpoint(config, params, patchset.normalization, seed=opt.seed,
                      epoch=state.best_epoch, val_loss=state.best_val_loss,
                      band_names=tuple(band_names),
                      data_fingerprint=patch_fingerprint(patchset.train), history=history)


def finetune(pretrained: Checkpoint, target_patchset, opt: OptimizerConfig = OptimizerConfig(),
             freeze_bn_stats: bool = False, log_path=None) -> Checkpoint:
    """Continue training all parameters on sparse plot labels.

    The pretrained normalization statistics are reused unchanged; the target
    patch set must have been normalized with them.
    """
    if not target_patchset.train:
        raise ValueError("empty fine-tuning set")
    c = target_patchset.train[0].eo.shape[0]
    if c != pretrained.config.in_channels:
        raise ValueError(f"channel mismatch: checkpoint expects {pretrained.config.in_channels}, "
                         f"target data has {c}")
    norm = target_patchset.normalization
    if norm is not None and norm.fingerprint() != pretrained.normalization.fingerprint():
        raise ValueError("target patches were normalized with different statistics")
    if opt.epochs_finetune == 0:
        return replace(pretrained, params=clone_params(pretrained.params), history=[])
    model = build_model(pretrained.config, clone_params(pretrained.params))
    state, history = _run(model, _tensors(target_patchset.train), _tensors(target_patchset.val),
                          opt, opt.epochs_finetune, freeze_bn_stats, log_path)
    params = state.best_params if state.best_params is not None else clone_params(model.state_dict())
    return Checkpoint(pretrained.config, params, pretrained.normalization, seed=opt.seed,
                      epoch=state.best_epoch, val_loss=state.best_val_loss,
                      band_names=pretrained.band_names,
                      data_fingerprint=patch_fingerprint(target_patchset.train), history=history)
