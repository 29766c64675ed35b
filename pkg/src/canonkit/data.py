"""Datasets: IDX files, synthetic oriented glyphs, orbit augmentation, splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from canonkit.errors import (
    ConfigError,
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncatedError,
)
from canonkit.symmetry import Group, act_image, make_group

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] in [0, 1]
    labels: np.ndarray  # [N] int64
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ConfigError(f"images {self.images.shape} and labels {self.labels.shape} disagree")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.meta.get("num_classes", int(self.labels.max()) + 1 if len(self) else 0))

    def subset(self, idx) -> Dataset:
        return Dataset(self.images[idx], self.labels[idx], dict(self.meta))


# --------------------------------------------------------------------------
# IDX
# --------------------------------------------------------------------------


def _read_idx(path: Path, magic: int, ndim: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxMagicError(f"{path}: unexpected magic 0x{found:08x} (wanted 0x{magic:08x})")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxTruncatedError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    need = int(np.prod(dims))
    if len(raw) - head < need:
        raise IdxTruncatedError(f"{path}: expected {need} payload bytes, found {len(raw) - head}")
    return dims, raw[head:head + need]


def load_idx(image_path, label_path) -> Dataset:
    (n, h, w), pix = _read_idx(Path(image_path), IMAGE_MAGIC, 3)
    (m,), lab = _read_idx(Path(label_path), LABEL_MAGIC, 1)
    if n != m:
        raise IdxCountMismatchError(f"{n} images but {m} labels")
    images = np.frombuffer(pix, dtype=np.uint8).reshape(n, 1, h, w) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    meta = {"source": "idx", "num_classes": int(labels.max()) + 1 if n else 0,
            "image_path": str(image_path), "label_path": str(label_path)}
    return Dataset(images, labels, meta)


def write_idx(ds: Dataset, image_path, label_path) -> None:
    """Write a single-channel dataset as an IDX pair (pixels quantized to bytes)."""
    n, c, h, w = ds.images.shape
    if c != 1:
        raise ConfigError(f"IDX images are single-channel, got {c} channels")
    pix = np.rint(ds.images[:, 0] * 255.0).clip(0, 255).astype(np.uint8)
    Path(image_path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, n, h, w) + pix.tobytes())
    Path(label_path).write_bytes(struct.pack(">II", LABEL_MAGIC, n) + ds.labels.astype(np.uint8).tobytes())


# --------------------------------------------------------------------------
# synthetic glyphs
# --------------------------------------------------------------------------

# filled rectangles (row0, row1, col0, col1) on a 10x10 design grid
GLYPHS: tuple[tuple[str, tuple[tuple[int, int, int, int], ...]], ...] = (
    ("L", ((0, 10, 0, 2), (8, 10, 0, 7))),
    ("F", ((0, 10, 0, 2), (0, 2, 0, 8), (4, 6, 0, 5))),
    ("arrow", ((4, 6, 0, 10), (1, 4, 7, 9), (6, 9, 0, 2))),
    ("P", ((0, 10, 0, 2), (0, 2, 0, 7), (0, 6, 5, 7), (4, 6, 0, 7))),
    ("four", ((0, 10, 6, 8), (5, 7, 0, 10), (0, 6, 0, 2))),
    ("seven", ((0, 2, 0, 10), (2, 4, 7, 9), (4, 6, 6, 8), (6, 8, 5, 7), (8, 10, 4, 6))),
    ("h", ((0, 10, 0, 2), (4, 6, 0, 8), (4, 10, 6, 8))),
    ("hook", ((0, 2, 0, 10), (0, 10, 0, 2), (8, 10, 0, 10), (5, 10, 8, 10), (5, 7, 5, 10))),
)
MAX_CLASSES = len(GLYPHS)


def glyph_mask(label: int, canvas: int) -> np.ndarray:
    m = np.zeros((canvas, canvas), dtype=bool)
    for r0, r1, c0, c1 in GLYPHS[label][1]:
        m[round(r0 * canvas / 10):round(r1 * canvas / 10), round(c0 * canvas / 10):round(c1 * canvas / 10)] = True
    return m


def stabilizer_trivial(img: np.ndarray, group: Group) -> bool:
    """True when no non-identity element of ``group`` fixes ``img``."""
    return not any(np.array_equal(act_image(g, img), img) for g in group if not g.is_identity)


def _canvas(size: int) -> int:
    return max(6, (size * 5) // 8)


def prototypes(num_classes: int, size: int = 16) -> np.ndarray:
    """Noise-free glyphs centred on a ``size`` grid, ``[K, 1, size, size]``."""
    c = _canvas(size)
    off = (size - c) // 2
    out = np.zeros((num_classes, 1, size, size))
    for k in range(num_classes):
        out[k, 0, off:off + c, off:off + c] = glyph_mask(k, c)
    return out


def check_prototypes(num_classes: int, size: int = 16, group: Group | None = None) -> bool:
    """Every prototype has a trivial stabilizer and no two share an orbit."""
    group = group or make_group("d4")
    protos = prototypes(num_classes, size)
    for k, p in enumerate(protos):
        if not stabilizer_trivial(p, group):
            return False
        for q in protos[:k]:
            if any(np.array_equal(act_image(g, q), p) for g in group):
                return False
    return True


def gen_shapes(seed: int, n_per_class: int, num_classes: int = 4, size: int = 16) -> Dataset:
    """Asymmetric glyphs at a fixed orientation with per-sample jitter.

    Each sample is translated by a random offset, drawn with random stroke
    intensity over a noisy background, and quantized to bytes. Samples whose
    D4 stabilizer is non-trivial are redrawn.
    """
    if not 1 <= num_classes <= MAX_CLASSES:
        raise ConfigError(f"num_classes must be in [1, {MAX_CLASSES}], got {num_classes}")
    if size < 8:
        raise ConfigError(f"size must be >= 8, got {size}")
    d4 = make_group("d4")
    if not check_prototypes(num_classes, size, d4):
        raise ConfigError(f"glyph prototypes are not asymmetric at size {size}")
    rng = np.random.default_rng(seed)
    c = _canvas(size)
    masks = [glyph_mask(k, c) for k in range(num_classes)]
    hi = size - c - 1
    images = np.empty((num_classes * n_per_class, 1, size, size))
    labels = np.repeat(np.arange(num_classes), n_per_class)
    for i, k in enumerate(labels):
        while True:
            oy, ox = rng.integers(1, hi + 1, size=2) if hi >= 1 else (0, 0)
            px = rng.integers(0, 51, size=(size, size))
            stroke = rng.integers(170, 256, size=(c, c))
            tile = px[oy:oy + c, ox:ox + c]
            px[oy:oy + c, ox:ox + c] = np.where(masks[k], stroke, tile)
            img = px[None] / 255.0
            if stabilizer_trivial(img, d4):
                break
        images[i] = img
    order = rng.permutation(len(labels))
    meta = {"source": "synthetic", "num_classes": num_classes, "seed": seed,
            "n_per_class": n_per_class, "size": size, "stabilizer": "trivial"}
    return Dataset(images[order], labels[order], meta)


# --------------------------------------------------------------------------
# augmentation and splits
# --------------------------------------------------------------------------


def augment_orbit(ds: Dataset, group: Group, mode: str = "exhaustive", seed: int | None = None) -> Dataset:
    """Exhaustive: ``|G|`` blocks, block ``i`` holding ``act(g_i, x)`` for every x.
    Random: every image transformed by one uniformly drawn element."""
    if mode == "exhaustive":
        images = np.concatenate([act_image(g, ds.images) for g in group])
        labels = np.tile(ds.labels, len(group))
        elems = np.repeat(np.arange(len(group)), len(ds))
    elif mode == "random":
        rng = np.random.default_rng(seed)
        elems = rng.integers(0, len(group), size=len(ds))
        images = np.stack([act_image(group[e], x) for e, x in zip(elems, ds.images)]) if len(ds) else ds.images
        labels = ds.labels.copy()
    else:
        raise ConfigError(f"unknown augmentation mode {mode!r}")
    meta = dict(ds.meta, augmented=f"{group.name}:{mode}", elements=elems.tolist())
    return Dataset(images, labels, meta)


def split(ds: Dataset, fractions: Sequence[float], seed: int = 0) -> tuple[Dataset, ...]:
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.ndim != 1 or len(fr) == 0 or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be nonnegative and sum to 1, got {list(fractions)}")
    n = len(ds)
    exact = fr * n
    sizes = np.floor(exact).astype(int)
    # hand leftover samples to the largest fractional parts
    for i in np.argsort(-(exact - sizes), kind="stable")[: n - sizes.sum()]:
        sizes[i] += 1
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    return tuple(ds.subset(perm[bounds[i]:bounds[i + 1]]) for i in range(len(sizes)))
