"""Scene tiling, patch filtering, splitting, augmentation and normalization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .eo_data import EOStack, ForestMask, RasterGrid, SparseLabelRaster, load_raster, save_raster
from .model import Normalization

STD_FLOOR = 1e-6
DIHEDRAL = ("id", "rot90", "rot180", "rot270", "flipud", "fliplr", "transpose", "antitranspose")


@dataclass(eq=False)
class Patch:
    eo: np.ndarray      # [C, P, P] float32, NaN outside forest
    labels: np.ndarray  # [P, P] float32, NaN where invalid
    valid: np.ndarray   # [P, P] bool
    forest: np.ndarray  # [P, P] bool
    origin: tuple[int, int]
    augmentation_tag: str = "orig"
    normalized: bool = False

    def __post_init__(self):
        p = self.labels.shape
        if self.eo.shape[1:] != p or self.valid.shape != p or self.forest.shape != p:
            raise ValueError("patch arrays must share one spatial shape")

    @property
    def size(self) -> int:
        return self.labels.shape[0]

    @property
    def forest_fraction(self) -> float:
        return float(self.forest.mean())

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    @property
    def key(self):
        return (self.origin, self.augmentation_tag)


@dataclass
class PatchSet:
    train: list
    val: list
    test: list
    normalization: Optional[Normalization] = None
    seed: int = 0
    fractions: tuple[float, float] = (0.5, 0.1)
    transforms: list = field(default_factory=list)

    def counts(self) -> dict:
        return {"train": len(self.train), "val": len(self.val), "test": len(self.test)}


def tile_scene(stack: EOStack, labels: SparseLabelRaster, mask: ForestMask,
               patch_size: int = 256) -> list[Patch]:
    """Non-overlapping patches anchored at (0, 0); partial edge tiles are dropped.

    Non-forest pixels become NaN in the EO channels and invalid in the labels.
    """
    h, w = stack.grid.shape
    if h < patch_size or w < patch_size:
        raise ValueError(f"scene {h}x{w} is smaller than one {patch_size} px patch")
    if not (stack.grid.same_footprint(labels.grid) and stack.grid.same_footprint(mask.grid)):
        raise ValueError("stack, labels and mask must share a grid")
    patches = []
    for r in range(0, h - patch_size + 1, patch_size):
        for c in range(0, w - patch_size + 1, patch_size):
            win = (slice(r, r + patch_size), slice(c, c + patch_size))
            forest = mask.mask[win].copy()
            eo = np.where(forest, stack.data[(slice(None),) + win], np.nan).astype(np.float32)
            valid = labels.valid[win] & forest
            lab = np.where(valid, labels.values[win], np.nan).astype(np.float32)
            patches.append(Patch(eo, lab, valid, forest, (r, c)))
    return patches


def filter_patches_dense(patches, min_forest_fraction: float = 0.20) -> list[Patch]:
    return [p for p in patches if p.forest_fraction >= min_forest_fraction]


def filter_patches_sparse(patches) -> list[Patch]:
    return [p for p in patches if p.n_valid >= 1]


def split_patches(patches, test_fraction: float = 0.5, val_fraction: float = 0.1,
                  seed: int = 0) -> PatchSet:
    """Seeded permutation; first floor(n*test) to test, next floor(n*val) to val."""
    n = len(patches)
    if n < 3:
        raise ValueError(f"need at least 3 patches to split, got {n}")
    if not (0 <= test_fraction and 0 <= val_fraction and test_fraction + val_fraction <= 1):
        raise ValueError("invalid split fractions")
    order = np.random.default_rng(seed).permutation(n)
    n_test = int(np.floor(n * test_fraction))
    n_val = int(np.floor(n * val_fraction))
    pick = [patches[i] for i in order]
    return PatchSet(train=pick[n_test + n_val:], val=pick[n_test:n_test + n_val],
                    test=pick[:n_test], seed=seed, fractions=(test_fraction, val_fraction))


# ---------------------------------------------------------------------------
# augmentation


def _dihedral(a: np.ndarray, name: str) -> np.ndarray:
    # operates on the last two axes
    if name == "id":
        return a
    if name.startswith("rot"):
        return np.rot90(a, int(name[3:]) // 90, axes=(-2, -1))
    if name == "flipud":
        return a[..., ::-1, :]
    if name == "fliplr":
        return a[..., :, ::-1]
    if name == "transpose":
        return np.swapaxes(a, -1, -2)
    if name == "antitranspose":
        return np.swapaxes(a, -1, -2)[..., ::-1, ::-1]
    raise ValueError(f"unknown transform {name!r}")


def parse_tag(tag: str) -> tuple[str, int, int]:
    """'rot90+s32,64' -> ('rot90', 32, 64); 'orig' -> ('id', 0, 0)."""
    if tag == "orig":
        return "id", 0, 0
    geo, _, shift = tag.partition("+s")
    dy, dx = (int(v) for v in shift.split(",")) if shift else (0, 0)
    return geo, dy, dx


def make_tag(geo: str, dy: int, dx: int) -> str:
    if geo == "id" and dy == 0 and dx == 0:
        return "orig"
    return geo + (f"+s{dy},{dx}" if (dy or dx) else "")


def transform_array(a: np.ndarray, tag: str) -> np.ndarray:
    geo, dy, dx = parse_tag(tag)
    out = _dihedral(a, geo)
    if dy or dx:
        out = np.roll(out, (dy, dx), axis=(-2, -1))
    return np.ascontiguousarray(out)


def apply_transform(patch: Patch, tag: str) -> Patch:
    """Apply the same dihedral map and circular shift to every patch array."""
    return Patch(transform_array(patch.eo, tag), transform_array(patch.labels, tag),
                 transform_array(patch.valid, tag), transform_array(patch.forest, tag),
                 patch.origin, tag, patch.normalized)


def transform_budget(patch_size: int, shift_step: int = 32) -> list[str]:
    """Every non-identity (dihedral, shift) tag available for one patch."""
    shifts = range(0, patch_size, shift_step) if shift_step > 0 else [0]
    tags = [make_tag(g, dy, dx) for g in DIHEDRAL for dy in shifts for dx in shifts]
    return [t for t in tags if t != "orig"]


def augment(train_patches, target_multiplier: float, seed: int = 0,
            shift_step: int = 32) -> list[Patch]:
    """Originals plus transformed copies, round(multiplier * n) patches in total.

    Copies are handed out round-robin over the originals; each original draws
    its transforms from a seeded permutation of the full budget, so no
    (patch, transform) pair repeats.
    """
    n = len(train_patches)
    if n == 0:
        raise ValueError("cannot augment an empty patch list")
    if target_multiplier < 1:
        raise ValueError("target_multiplier must be >= 1")
    budget = transform_budget(train_patches[0].size, shift_step)
    total = min(int(round(target_multiplier * n)), n * (len(budget) + 1))
    rng = np.random.default_rng(seed)
    perms = [rng.permutation(len(budget)) for _ in range(n)]
    out = list(train_patches)
    for j in range(total - n):
        i, k = j % n, j // n
        out.append(apply_transform(train_patches[i], budget[perms[i][k]]))
    return out


# ---------------------------------------------------------------------------
# normalization


def fit_normalization(train_patches) -> Normalization:
    """Per-channel mean/std over forest pixels of the given patches."""
    if not train_patches:
        raise ValueError("no patches to fit normalization on")
    c = train_patches[0].eo.shape[0]
    s = np.zeros(c)
    s2 = np.zeros(c)
    n = 0
    for p in train_patches:
        if p.normalized:
            raise ValueError("normalization must be fitted on raw patches")
        x = p.eo[:, p.forest].astype(np.float64)
        s += x.sum(axis=1)
        s2 += (x ** 2).sum(axis=1)
        n += x.shape[1]
    if n == 0:
        raise ValueError("no forest pixels to fit normalization on")
    mean = s / n
    var = np.maximum(s2 / n - mean ** 2, 0.0)
    return Normalization(mean, np.maximum(np.sqrt(var), STD_FLOOR))


def normalize_array(eo: np.ndarray, stats: Normalization) -> np.ndarray:
    """(x - mean) / std per channel; nodata becomes 0 (the channel mean)."""
    z = (eo - stats.mean[:, None, None]) / stats.std[:, None, None]
    return np.nan_to_num(z, nan=0.0).astype(np.float32)


def apply_normalization(patch: Patch, stats: Normalization) -> Patch:
    if patch.normalized:
        raise ValueError("patch is already normalized")
    if patch.eo.shape[0] != len(stats.mean):
        raise ValueError(f"patch has {patch.eo.shape[0]} channels, stats have {len(stats.mean)}")
    return replace(patch, eo=normalize_array(patch.eo, stats), normalized=True)


def normalize_set(ps: PatchSet, stats: Normalization) -> PatchSet:
    return replace(ps, normalization=stats,
                   train=[apply_normalization(p, stats) for p in ps.train],
                   val=[apply_normalization(p, stats) for p in ps.val],
                   test=[apply_normalization(p, stats) for p in ps.test])


# ---------------------------------------------------------------------------
# serialization


def save_patchset(ps: PatchSet, directory) -> None:
    """One raster per patch (EO bands + labels/valid/forest) and ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for subset in ("train", "val", "test"):
        for i, p in enumerate(getattr(ps, subset)):
            name = f"{subset}_{i:05d}"
            c = p.eo.shape[0]
            data = np.concatenate([p.eo, p.labels[None], p.valid[None].astype(np.float32),
                                   p.forest[None].astype(np.float32)])
            grid = RasterGrid(p.size, p.size, c + 3)
            save_raster(EOStack(grid, data), d / name)
            entries.append({"file": name, "subset": subset, "origin": list(p.origin),
                            "augmentation_tag": p.augmentation_tag, "normalized": p.normalized})
    manifest = {
        "seed": ps.seed,
        "fractions": {"test": ps.fractions[0], "val": ps.fractions[1]},
        "counts": ps.counts(),
        "normalization": ps.normalization.to_dict() if ps.normalization else None,
        "transforms": sorted({e["augmentation_tag"] for e in entries}),
        "patches": entries,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_patchset(directory) -> PatchSet:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    subsets = {"train": [], "val": [], "test": []}
    for e in manifest["patches"]:
        r = load_raster(d / e["file"])
        data = r.data
        valid = data[-2] > 0.5
        subsets[e["subset"]].append(Patch(
            eo=data[:-3].copy(), labels=np.where(valid, data[-3], np.nan).astype(np.float32),
            valid=valid, forest=data[-1] > 0.5, origin=tuple(e["origin"]),
            augmentation_tag=e["augmentation_tag"], normalized=e["normalized"]))
    norm = manifest["normalization"]
    return PatchSet(**subsets, seed=manifest["seed"],
                    normalization=Normalization.from_dict(norm) if norm else None,
                    fractions=(manifest["fractions"]["test"], manifest["fractions"]["val"]),
                    transforms=manifest["transforms"])
