import math

import numpy as np
import pytest
import torch

from forest_transfer.model import (
    DoubleConv,
    ModelConfig,
    NonFiniteActivation,
    SEBlock,
    SeUNet,
    build_model,
    init_parameters,
    load_checkpoint,
    Checkpoint,
    Normalization,
    parameter_count,
    params_equal,
    save_checkpoint,
)


def test_double_conv_shape():
    blk = DoubleConv(4, 6)
    assert blk(torch.randn(2, 4, 16, 16)).shape == (2, 6, 16, 16)


def test_double_conv_zero_input():
    blk = DoubleConv(4, 6).eval()
    out = blk(torch.zeros(1, 4, 8, 8))
    assert torch.count_nonzero(out) == 0


def test_double_conv_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        DoubleConv(4, 6)(torch.randn(1, 3, 8, 8))


def test_double_conv_finite_difference():
    torch.manual_seed(0)
    blk = DoubleConv(3, 4).double().train()
    x = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    w = blk.conv1.weight
    blk(x).sum().backward()
    analytic = w.grad[1, 2, 0, 1].item()
    eps = 1e-6
    with torch.no_grad():
        w[1, 2, 0, 1] += eps
        up = blk(x).sum().item()
        w[1, 2, 0, 1] -= 2 * eps
        down = blk(x).sum().item()
        w[1, 2, 0, 1] += eps
    numeric = (up - down) / (2 * eps)
    assert abs(analytic - numeric) <= 1e-4 * max(abs(numeric), 1e-8)


class TestSE:
    def test_saturated_gate_is_identity(self):
        se = SEBlock(8, 2)
        with torch.no_grad():
            se.fc2.weight.zero_()
            se.fc2.bias.fill_(1e4)
        x = torch.randn(2, 8, 5, 5)
        torch.testing.assert_close(se(x), x, atol=1e-6, rtol=0)

    def test_zero_excitation_halves(self):
        se = SEBlock(8, 2)
        with torch.no_grad():
            for p in se.parameters():
                p.zero_()
        x = torch.randn(2, 8, 5, 5)
        torch.testing.assert_close(se(x), x / 2)

    def test_matches_scalar_reimplementation(self):
        torch.manual_seed(3)
        se = SEBlock(4, 2).double()
        x = torch.randn(1, 4, 3, 3, dtype=torch.float64)
        out = se(x)
        W1, b1 = se.fc1.weight.detach().numpy(), se.fc1.bias.detach().numpy()
        W2, b2 = se.fc2.weight.detach().numpy(), se.fc2.bias.detach().numpy()
        xs = x[0].numpy()
        s = [sum(xs[c, i, j] for i in range(3) for j in range(3)) / 9 for c in range(4)]
        hidden = [max(0.0, sum(W1[h, c] * s[c] for c in range(4)) + b1[h]) for h in range(2)]
        for c in range(4):
            z = sum(W2[c, h] * hidden[h] for h in range(2)) + b2[c]
            gate = 1 / (1 + math.exp(-z))
            np.testing.assert_allclose(out[0, c].detach().numpy(), gate * xs[c], rtol=1e-12)

    def test_output_magnitude_bounded_by_input(self):
        torch.manual_seed(4)
        se = SEBlock(8, 4)
        x = torch.randn(3, 8, 6, 6) * 10
        assert torch.all(se(x).abs() <= x.abs())

    def test_indivisible_channels(self):
        with pytest.raises(ValueError):
            SEBlock(6, 4)


class TestForward:
    @pytest.mark.parametrize("c", [7, 9, 14])
    def test_full_size_shapes(self, c):
        model = build_model(ModelConfig(in_channels=c)).eval()
        with torch.no_grad():
            out = model(torch.randn(1, c, 256, 256))
        assert out.shape == (1, 256, 256)

    def test_intermediate_shapes(self):
        cfg = ModelConfig(in_channels=3, base_width=8, depth=3, se_reduction=4)
        model = build_model(cfg).eval()
        seen = {}
        hooks = [m.register_forward_hook(lambda mod, i, o, n=n: seen.__setitem__(n, o.shape))
                 for n, m in model.named_children() if n in ("bottleneck",)]
        for i, se in enumerate(model.enc_se):
            hooks.append(se.register_forward_hook(lambda mod, i_, o, n=f"enc{i}": seen.__setitem__(n, o.shape)))
        with torch.no_grad():
            model(torch.randn(1, 3, 64, 64))
        for h in hooks:
            h.remove()
        assert seen["enc0"] == (1, 8, 64, 64)
        assert seen["enc1"] == (1, 16, 32, 32)
        assert seen["enc2"] == (1, 32, 16, 16)
        assert seen["bottleneck"] == (1, 64, 8, 8)

    def test_eval_is_deterministic_and_clamped(self):
        model = build_model(ModelConfig(in_channels=4, base_width=4, depth=2, se_reduction=2)).eval()
        x = torch.randn(2, 4, 16, 16)
        with torch.no_grad():
            a, b = model(x), model(x)
        assert torch.equal(a, b) and a.min() >= 0

    def test_train_mode_output_is_linear(self):
        torch.manual_seed(0)
        model = build_model(ModelConfig(in_channels=4, base_width=4, depth=2, se_reduction=2))
        with torch.no_grad():
            model.head.bias.fill_(-100.0)
        model.train()
        assert model(torch.randn(2, 4, 16, 16)).max() < 0

    def test_output_affine(self):
        cfg = ModelConfig(in_channels=4, base_width=4, depth=2, se_reduction=2)
        params = init_parameters(cfg)
        x = torch.randn(2, 4, 16, 16)
        with torch.no_grad():
            raw = build_model(cfg, params).train()(x)
            params["out_scale"] = torch.tensor(3.0)
            params["out_shift"] = torch.tensor(11.0)
            scaled = build_model(cfg, params).train()(x)
        torch.testing.assert_close(scaled, raw * 3.0 + 11.0)
        assert "out_scale" not in dict(build_model(cfg, params).named_parameters())

    def test_shape_errors(self):
        model = build_model(ModelConfig(in_channels=4, base_width=4, depth=2, se_reduction=2))
        with pytest.raises(ValueError):
            model(torch.randn(1, 5, 16, 16))
        with pytest.raises(ValueError):
            model(torch.randn(1, 4, 18, 16))

    def test_non_finite_reports_block(self):
        model = build_model(ModelConfig(in_channels=4, base_width=4, depth=2, se_reduction=2)).eval()
        x = torch.zeros(1, 4, 16, 16)
        x[0, 0, 3, 3] = float("nan")
        with pytest.raises(NonFiniteActivation, match="enc0"):
            model(x)


class TestParameters:
    @pytest.mark.parametrize("cfg", [ModelConfig(), ModelConfig(7, 16, 3, 4), ModelConfig(4, 4, 2, 2)])
    def test_count_matches_closed_form(self, cfg):
        n = sum(p.numel() for p in SeUNet(cfg).parameters())
        assert n == parameter_count(cfg)

    def test_default_count_regression(self):
        assert parameter_count(ModelConfig()) == 8_681_209

    def test_same_seed_identical(self):
        cfg = ModelConfig(4, 8, 2, 4)
        assert params_equal(init_parameters(cfg, 5), init_parameters(cfg, 5))

    def test_different_seed_differs(self):
        cfg = ModelConfig(4, 8, 2, 4)
        assert not params_equal(init_parameters(cfg, 5), init_parameters(cfg, 6))

    def test_he_variance(self):
        params = init_parameters(ModelConfig(), 0)
        for name in ("enc.2.conv1.weight", "bottleneck.conv2.weight", "dec.0.conv1.weight"):
            w = params[name]
            fan_in = w[0].numel()
            assert abs(w.var().item() * fan_in / 2 - 1) < 0.2, name

    def test_biases_zero_batchnorm_unit(self):
        params = init_parameters(ModelConfig(4, 8, 2, 4), 1)
        assert torch.count_nonzero(params["up.0.conv.bias"]) == 0
        assert torch.all(params["enc.0.bn1.weight"] == 1)
        assert torch.count_nonzero(params["enc.0.bn1.bias"]) == 0

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            ModelConfig(base_width=30, se_reduction=8)
        with pytest.raises(ValueError):
            ModelConfig(depth=0)


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(4, 8, 2, 4, seed=2)
    ck = Checkpoint(cfg, init_parameters(cfg), Normalization(np.arange(4.0), np.ones(4)),
                    seed=2, epoch=3, val_loss=1.5, band_names=("a", "b", "c", "d"))
    save_checkpoint(ck, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert params_equal(back.params, ck.params)
    assert back.fingerprint() == ck.fingerprint()
    assert back.config == cfg and back.band_names == ck.band_names
    raw = (tmp_path / "ck.bin").read_bytes()
    (tmp_path / "ck.bin").write_bytes(raw[:-4] + b"\x00\x00\x80\x3f")
    with pytest.raises(ValueError, match="fingerprint"):
        load_checkpoint(tmp_path / "ck")
