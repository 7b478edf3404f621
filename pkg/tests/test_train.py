import csv
import math

import numpy as np
import pytest
import torch

from forest_transfer.model import ModelConfig, Normalization, init_parameters, params_equal
from forest_transfer.patches import Patch, PatchSet
from forest_transfer.train import (
    OptimizerConfig,
    TrainState,
    TrainingDiverged,
    adam_step,
    decays,
    finetune,
    masked_mse,
    one_cycle_lr,
    pretrain,
)

TINY = ModelConfig(in_channels=3, base_width=4, depth=2, se_reduction=2, seed=0)


def _patches(n, seed=0, size=16, channels=3, sparse=False):
    """Normalized patches whose labels are a smooth function of the inputs."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        eo = rng.normal(size=(channels, size, size)).astype(np.float32)
        eo = (eo + np.roll(eo, 1, axis=1) + np.roll(eo, 1, axis=2)) / 3
        labels = (10 + 3 * eo[0] - 2 * eo[1] + eo[2] ** 2).astype(np.float32)
        valid = rng.random((size, size)) < (0.05 if sparse else 1.0)
        valid[0, 0] = True
        out.append(Patch(eo, np.where(valid, labels, np.nan).astype(np.float32), valid,
                         np.ones((size, size), bool), (0, 16 * i), normalized=True))
    return out


NORM = Normalization(np.zeros(3), np.ones(3))


def _set(train, val=None):
    return PatchSet(train, val or [], [], normalization=NORM)


class TestMaskedMSE:
    def test_full_mask_is_plain_mse(self):
        g = torch.Generator().manual_seed(0)
        p, t = torch.randn(4, 8, 8, generator=g, dtype=torch.float64), torch.randn(4, 8, 8, generator=g, dtype=torch.float64)
        full = torch.ones(4, 8, 8, dtype=torch.bool)
        assert masked_mse(p, t, full).item() == pytest.approx(torch.mean((p - t) ** 2).item(), rel=1e-15)

    def test_garbage_outside_mask_ignored(self):
        t = torch.tensor([[1.0, float("nan")], [3.0, 4.0]])
        p = torch.tensor([[1.0, 1e9], [3.0, -7.0]])
        v = torch.tensor([[True, False], [True, False]])
        assert masked_mse(p, t, v).item() == 0.0

    def test_hand_case(self):
        p = torch.tensor([[1.0, 3.0, 100.0]])
        t = torch.zeros(1, 3)
        v = torch.tensor([[True, True, False]])
        assert masked_mse(p, t, v).item() == 5.0

    def test_no_valid_pixels(self):
        with pytest.raises(ValueError):
            masked_mse(torch.zeros(2, 2), torch.zeros(2, 2), torch.zeros(2, 2, dtype=torch.bool))


class TestOneCycle:
    cfg = OptimizerConfig()

    def test_step_zero(self):
        assert one_cycle_lr(0, 1000, self.cfg) == pytest.approx(4e-4, rel=1e-12)

    def test_peak_at_warmup_end(self):
        assert one_cycle_lr(299, 1000, self.cfg) == pytest.approx(1e-2, rel=1e-12)

    def test_unimodal(self):
        lrs = [one_cycle_lr(s, 777, self.cfg) for s in range(777)]
        peak = int(np.argmax(lrs))
        assert all(a <= b for a, b in zip(lrs[:peak], lrs[1:peak + 1]))
        assert all(a >= b for a, b in zip(lrs[peak:], lrs[peak + 1:]))
        assert lrs[-1] == pytest.approx(1e-2 / 25 / 1e4, rel=1e-9)

    @pytest.mark.parametrize("total", [10, 100, 1234])
    def test_matches_torch_scheduler(self, total):
        p = torch.nn.Parameter(torch.zeros(1))
        opt = torch.optim.SGD([p], lr=1.0)
        sched = torch.optim.lr_scheduler.OneCycleLR(
            opt, max_lr=1e-2, total_steps=total, pct_start=0.3, anneal_strategy="cos",
            cycle_momentum=False, div_factor=25.0, final_div_factor=1e4)
        for s in range(total):
            assert one_cycle_lr(s, total, self.cfg) == pytest.approx(opt.param_groups[0]["lr"], rel=1e-12)
            opt.step()
            sched.step()

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            one_cycle_lr(10, 10, self.cfg)
        with pytest.raises(ValueError):
            one_cycle_lr(-1, 10, self.cfg)


class TestAdam:
    def test_hand_case(self):
        w = torch.ones(1, 1, dtype=torch.float64)
        st = TrainState.fresh({"w.weight": w})
        adam_step(st, {"w.weight": torch.ones(1, 1, dtype=torch.float64)}, 0.1, OptimizerConfig())
        expect = 1 * (1 - 0.1 * 1e-4) - 0.1 * 1 / (1 + 1e-8)
        assert w.item() == pytest.approx(expect, rel=1e-14)
        assert w.item() == pytest.approx(0.89999, abs=1e-6)

    def test_zero_gradient_no_decay_leaves_params(self):
        p = {"a.weight": torch.randn(3, 3), "a.bias": torch.randn(3)}
        before = {k: v.clone() for k, v in p.items()}
        st = TrainState.fresh(p)
        cfg = OptimizerConfig(weight_decay=0.0)
        for _ in range(3):
            adam_step(st, {k: torch.zeros_like(v) for k, v in p.items()}, 0.1, cfg)
        assert params_equal(p, before)

    def test_matches_torch_adamw(self):
        torch.manual_seed(0)
        cfg = OptimizerConfig(weight_decay=0.05)
        names = ["conv.weight", "conv.bias", "bn.weight"]
        shapes = [(4, 3, 3, 3), (4,), (4,)]
        ours = {n: torch.randn(s, dtype=torch.float64) for n, s in zip(names, shapes)}
        ref = [torch.nn.Parameter(v.clone()) for v in ours.values()]
        opt = torch.optim.AdamW([{"params": [ref[0]], "weight_decay": cfg.weight_decay},
                                 {"params": ref[1:], "weight_decay": 0.0}],
                                betas=cfg.betas, eps=cfg.epsilon)
        st = TrainState.fresh(ours)
        for step in range(5):
            lr = 0.01 * (step + 1)
            grads = {n: torch.randn(s, dtype=torch.float64) for n, s in zip(names, shapes)}
            adam_step(st, grads, lr, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            for p, n in zip(ref, names):
                p.grad = grads[n].clone()
            opt.step()
        for p, n in zip(ref, names):
            torch.testing.assert_close(ours[n], p.detach(), rtol=1e-12, atol=1e-14)

    def test_weight_decay_partition(self):
        params = init_parameters(TINY)
        from forest_transfer.model import build_model

        named = dict(build_model(TINY).named_parameters())
        decayed = {k for k, v in named.items() if decays(k, v)}
        assert decayed and all(".bn" not in k and not k.endswith("bias") for k in decayed)
        assert all(named[k].ndim >= 2 for k in decayed)
        assert {k for k in named if ".bn" in k}.isdisjoint(decayed)
        assert set(named) <= set(params)

    def test_non_finite_gradient(self):
        st = TrainState.fresh({"w.weight": torch.ones(2, 2)})
        with pytest.raises(TrainingDiverged):
            adam_step(st, {"w.weight": torch.full((2, 2), float("nan"))}, 0.1, OptimizerConfig())


def _opt(**kw):
    base = dict(batch_size=4, epochs_pretrain=3, epochs_finetune=2, max_lr=1e-2)
    base.update(kw)
    return OptimizerConfig(**base)


class TestPretrain:
    def test_overfits_tiny_set(self):
        ps = _set(_patches(8))
        ck = pretrain(TINY, ps, _opt(epochs_pretrain=20, batch_size=1, max_lr=3e-2))
        first, last = ck.history[0]["train_loss"], ck.history[-1]["train_loss"]
        assert last < 0.10 * first

    def test_output_affine_from_labels(self):
        train = _patches(4)
        ck = pretrain(TINY, _set(train), _opt(epochs_pretrain=1))
        labels = np.concatenate([p.labels[p.valid] for p in train]).astype(np.float64)
        assert ck.params["out_shift"].item() == pytest.approx(labels.mean(), rel=1e-6)
        assert ck.params["out_scale"].item() == pytest.approx(labels.std(), rel=1e-6)

    def test_best_checkpoint_is_min_val(self, tmp_path):
        ps = _set(_patches(8), _patches(2, seed=9))
        ck = pretrain(TINY, ps, _opt(epochs_pretrain=6), log_path=tmp_path / "log.csv")
        vals = [h["val_loss"] for h in ck.history]
        assert ck.val_loss == min(vals)
        assert ck.epoch == 1 + int(np.argmin(vals))
        rows = list(csv.reader(open(tmp_path / "log.csv")))
        assert rows[0] == ["epoch", "train_loss", "val_loss", "lr"] and len(rows) == 7

    def test_deterministic(self):
        ps = _set(_patches(8), _patches(2, seed=9))
        a = pretrain(TINY, ps, _opt())
        b = pretrain(TINY, ps, _opt())
        assert a.metadata() == b.metadata()
        assert params_equal(a.params, b.params)

    def test_empty_train(self):
        with pytest.raises(ValueError):
            pretrain(TINY, _set([]), _opt())

    def test_unnormalized_patches_rejected(self):
        raw = [Patch(p.eo, p.labels, p.valid, p.forest, p.origin) for p in _patches(2)]
        with pytest.raises(ValueError, match="normalized"):
            pretrain(TINY, _set(raw), _opt())

    def test_divergence(self):
        with pytest.raises(TrainingDiverged):
            pretrain(TINY, _set(_patches(4)), _opt(max_lr=1e30, epochs_pretrain=2))


class TestFinetune:
    @pytest.fixture(scope="class")
    @classmethod
    def base(cls):
        return pretrain(TINY, _set(_patches(4)), _opt(epochs_pretrain=2))

    def test_zero_epochs_is_identity(self, base):
        out = finetune(base, _set(_patches(2, seed=5, sparse=True)), _opt(epochs_finetune=0))
        assert params_equal(out.params, base.params)
        assert out.normalization is base.normalization

    def test_zero_lr_leaves_parameters(self, base):
        ft = finetune(base, _set(_patches(4, seed=5, sparse=True)),
                      _opt(max_lr=0.0, epochs_finetune=2), freeze_bn_stats=True)
        assert params_equal(ft.params, base.params)

    def test_zero_lr_only_running_stats_move(self, base):
        ft = finetune(base, _set(_patches(4, seed=5, sparse=True)), _opt(max_lr=0.0))
        for k, v in base.params.items():
            if "running" in k or "num_batches" in k:
                continue
            assert torch.equal(ft.params[k], v), k

    def test_updates_parameters(self, base):
        ft = finetune(base, _set(_patches(4, seed=5, sparse=True)), _opt())
        assert not params_equal(ft.params, base.params)
        for k in ("out_scale", "out_shift"):
            assert torch.equal(ft.params[k], base.params[k])
        assert ft.normalization.fingerprint() == base.normalization.fingerprint()

    def test_channel_mismatch(self, base):
        with pytest.raises(ValueError, match="channel"):
            finetune(base, _set(_patches(2, channels=4)), _opt())

    def test_foreign_normalization(self, base):
        ps = _set(_patches(2, sparse=True))
        ps.normalization = Normalization(np.ones(3), np.ones(3))
        with pytest.raises(ValueError, match="normalized"):
            finetune(base, ps, _opt())

    def test_improves_on_shifted_target(self, base):
        src = pretrain(TINY, _set(_patches(8), _patches(2, seed=9)), _opt(epochs_pretrain=15))
        shifted = []
        for p in _patches(8, seed=21, sparse=True):
            shifted.append(Patch(p.eo, p.labels + 4.0, p.valid, p.forest, p.origin, normalized=True))
        held = []
        for p in _patches(2, seed=33):
            held.append(Patch(p.eo, p.labels + 4.0, p.valid, p.forest, p.origin, normalized=True))
        ft = finetune(src, _set(shifted), _opt(epochs_finetune=10, max_lr=5e-3))
        from forest_transfer.train import _tensors, evaluate_loss

        before = evaluate_loss(src.model(), _tensors(held))
        after = evaluate_loss(ft.model(), _tensors(held))
        assert math.sqrt(after) < math.sqrt(before)
