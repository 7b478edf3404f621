"""SeUNet: a UNet regressor with squeeze-excitation channel attention."""

from __future__ import annotations

import hashlib
import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F


class NonFiniteActivation(FloatingPointError):
    """A block produced NaN or inf activations."""


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 14
    base_width: int = 32
    depth: int = 4
    se_reduction: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.se_reduction < 1 or self.base_width % self.se_reduction:
            raise ValueError(
                f"base_width {self.base_width} must be divisible by se_reduction {self.se_reduction}")

    def widths(self) -> list[int]:
        """Channel widths of the encoder levels, bottleneck last."""
        return [self.base_width * 2 ** i for i in range(self.depth + 1)]


class DoubleConv(nn.Module):
    """(3x3 conv -> batch norm -> ReLU) twice; spatial size unchanged."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)

    def forward(self, x):
        if x.shape[1] != self.conv1.in_channels:
            raise ValueError(f"expected {self.conv1.in_channels} channels, got {x.shape[1]}")
        x = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(x)))


class SEBlock(nn.Module):
    """Squeeze (global mean) and excite (FC-ReLU-FC-sigmoid), then rescale channels."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        if channels % reduction:
            raise ValueError(f"{channels} channels not divisible by reduction {reduction}")
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)

    def gate(self, x):
        s = x.mean(dim=(2, 3))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))

    def forward(self, x):
        if x.shape[1] != self.fc1.in_features:
            raise ValueError(f"expected {self.fc1.in_features} channels, got {x.shape[1]}")
        return x * self.gate(x)[:, :, None, None]


class UpConv(nn.Module):
    """2x nearest-neighbour upsampling followed by a 3x3 conv."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class SeUNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        w = config.widths()
        r = config.se_reduction
        self.enc = nn.ModuleList()
        self.enc_se = nn.ModuleList()
        cin = config.in_channels
        for i in range(config.depth):
            self.enc.append(DoubleConv(cin, w[i]))
            self.enc_se.append(SEBlock(w[i], r))
            cin = w[i]
        self.bottleneck = DoubleConv(w[-2], w[-1])
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        self.dec_se = nn.ModuleList()
        for i in reversed(range(config.depth)):
            self.up.append(UpConv(w[i + 1], w[i]))
            self.dec.append(DoubleConv(2 * w[i], w[i]))
            self.dec_se.append(SEBlock(w[i], r))
        self.head = nn.Conv2d(w[0], 1, 1)
        # fixed output affine: the head regresses standardized heights
        self.register_buffer("out_scale", torch.tensor(1.0))
        self.register_buffer("out_shift", torch.tensor(0.0))

    def forward(self, x, check_finite: bool = True):
        """[N, C, H, W] -> [N, H, W] heights; eval mode clamps at 0 m."""
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ValueError(f"expected input [N, {cfg.in_channels}, H, W], got {list(x.shape)}")
        step = 2 ** cfg.depth
        if x.shape[2] % step or x.shape[3] % step:
            raise ValueError(f"spatial size {tuple(x.shape[2:])} must be divisible by {step}")

        def guard(t, name):
            if check_finite and not torch.isfinite(t).all():
                raise NonFiniteActivation(f"non-finite activations after {name}")
            return t

        skips = []
        for i, (conv, se) in enumerate(zip(self.enc, self.enc_se)):
            x = guard(se(conv(x)), f"enc{i}")
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = guard(self.bottleneck(x), "bottleneck")
        for i, (up, conv, se) in enumerate(zip(self.up, self.dec, self.dec_se)):
            x = torch.cat([up(x), skips[-1 - i]], dim=1)
            x = guard(se(conv(x)), f"dec{i}")
        out = self.head(x)[:, 0] * self.out_scale + self.out_shift
        if not self.training:
            out = out.clamp(min=0.0)
        return out


def parameter_count(config: ModelConfig) -> int:
    """Closed-form count of trainable parameters."""

    def dconv(cin, cout):
        return 9 * cin * cout + 9 * cout * cout + 4 * cout

    def se(c):
        h = c // config.se_reduction
        return 2 * c * h + h + c

    w = config.widths()
    total = 0
    cin = config.in_channels
    for i in range(config.depth):
        total += dconv(cin, w[i]) + se(w[i])
        cin = w[i]
    total += dconv(w[-2], w[-1])
    for i in range(config.depth):
        total += 9 * w[i + 1] * w[i] + w[i]          # up conv
        total += dconv(2 * w[i], w[i]) + se(w[i])
    return total + w[0] + 1


def init_parameters(config: ModelConfig, seed: Optional[int] = None) -> "OrderedDict[str, torch.Tensor]":
    """He (fan-in) normal weights, zero biases, unit/zero batch-norm affine."""
    seed = config.seed if seed is None else seed
    gen = torch.Generator().manual_seed(int(seed))
    model = SeUNet(config)
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
    return model.state_dict()


def build_model(config: ModelConfig, params=None, dtype=torch.float32) -> SeUNet:
    model = SeUNet(config)
    model.load_state_dict(params if params is not None else init_parameters(config))
    return model.to(dtype)


def clone_params(params) -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict((k, v.detach().clone()) for k, v in params.items())


def params_equal(a, b) -> bool:
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Normalization:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d) -> "Normalization":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    config: ModelConfig
    params: "OrderedDict[str, torch.Tensor]"
    normalization: Normalization
    seed: int = 0
    epoch: int = 0
    val_loss: float = float("nan")
    band_names: tuple[str, ...] = ()
    data_fingerprint: str = ""
    history: list = field(default_factory=list)

    def model(self, dtype=torch.float32) -> SeUNet:
        m = build_model(self.config, self.params, dtype)
        m.eval()
        return m

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in self.params.items():
            h.update(name.encode())
            h.update(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
        h.update(self.normalization.fingerprint().encode())
        return h.hexdigest()[:16]

    def metadata(self) -> dict:
        return {
            "config": asdict(self.config),
            "seed": self.seed,
            "epoch": self.epoch,
            "val_loss": self.val_loss,
            "normalization": self.normalization.to_dict(),
            "normalization_fingerprint": self.normalization.fingerprint(),
            "band_names": list(self.band_names),
            "data_fingerprint": self.data_fingerprint,
            "fingerprint": self.fingerprint(),
            "history": self.history,
        }


def _ckpt_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".bin", ".json"):
        p = p.with_suffix("")
    return p.with_suffix(".bin"), p.with_suffix(".json")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Named-tensor table as little-endian float32 blob plus JSON metadata."""
    bin_path, json_path = _ckpt_paths(path)
    table, chunks, offset = [], [], 0
    for name, t in ckpt.params.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset,
                      "dtype": str(t.dtype).replace("torch.", "")})
        chunks.append(arr.tobytes())
        offset += arr.size
    meta = ckpt.metadata()
    meta["tensors"] = table
    bin_path.write_bytes(b"".join(chunks))
    json_path.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path) -> Checkpoint:
    bin_path, json_path = _ckpt_paths(path)
    if not bin_path.exists() or not json_path.exists():
        raise FileNotFoundError(f"checkpoint not found: {bin_path.with_suffix('')}")
    meta = json.loads(json_path.read_text())
    blob = np.frombuffer(bin_path.read_bytes(), dtype="<f4")
    params = OrderedDict()
    for entry in meta["tensors"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        arr = blob[entry["offset"]: entry["offset"] + n].reshape(entry["shape"])
        t = torch.from_numpy(arr.astype(np.float32))
        params[entry["name"]] = t.to(getattr(torch, entry["dtype"]))
    ckpt = Checkpoint(
        config=ModelConfig(**meta["config"]),
        params=params,
        normalization=Normalization.from_dict(meta["normalization"]),
        seed=meta["seed"],
        epoch=meta["epoch"],
        val_loss=meta["val_loss"],
        band_names=tuple(meta["band_names"]),
        data_fingerprint=meta["data_fingerprint"],
        history=meta.get("history", []),
    )
    if ckpt.fingerprint() != meta["fingerprint"]:
        raise ValueError(f"checkpoint {bin_path} fails its fingerprint check")
    return ckpt
