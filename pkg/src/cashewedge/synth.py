"""Synthetic leaf imagery and P6 PPM handling.

Stands in for drone photographs at desk scale: the healthy class is a
green-dominant noise texture, the diseased class adds dark-brown elliptical
lesions.  Everything is deterministic from the seed, and images are written
as binary P6 PPM so ingestion stays codec-free and bit-exact.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

CLASS_NAMES = ("anthracnose", "healthy")  # label order everywhere
MANIFEST_NAME = "manifest.tsv"


@dataclass(frozen=True)
class SynthSpec:
    per_class: int
    image_size: int = 96
    lesion_count: tuple[int, int] = (5, 10)
    lesion_radius: tuple[float, float] = (12.0, 26.0)
    seed: int = 0

    def __post_init__(self):
        if self.per_class < 1:
            raise ContractError("per_class must be at least 1")
        if self.image_size < 8:
            raise ContractError("image_size must be at least 8")
        if not (0 < self.lesion_count[0] <= self.lesion_count[1]):
            raise ContractError("lesion_count range must be positive and ordered")
        if not (0 < self.lesion_radius[0] <= self.lesion_radius[1]):
            raise ContractError("lesion_radius range must be positive and ordered")


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as binary P6."""
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ContractError("write_ppm expects (H, W, 3) uint8")
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 PPM with maxval 255 into (H, W, 3) uint8."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise ContractError(f"{path}: not a P6 PPM file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":  # comment to end of line
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ContractError(f"{path}: only maxval 255 supported")
    pixels = np.frombuffer(data, np.uint8, count=h * w * 3, offset=pos)
    if pixels.size != h * w * 3:
        raise ContractError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w, 3).copy()


def normalize_pixels(rgb: np.ndarray) -> np.ndarray:
    """Map uint8 pixels onto the model's [-1, 1] input range."""
    return (rgb.astype(np.float32) / 127.5) - 1.0


def _smooth_field(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    """Low-frequency noise in [0, 1]: a coarse random grid, bilinearly upsampled."""
    coarse = rng.random((cells + 1, cells + 1))
    t = np.linspace(0.0, cells, size)
    i0 = np.minimum(t.astype(np.int64), cells - 1)
    frac = t - i0
    rows = (coarse[i0, :] * (1 - frac)[:, None] + coarse[i0 + 1, :] * frac[:, None])
    cols = (rows[:, i0] * (1 - frac)[None, :] + rows[:, i0 + 1] * frac[None, :])
    return cols


def _leaf_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    g = 105.0 + 55.0 * _smooth_field(rng, size, 6) + rng.normal(0, 9, (size, size))
    r = 52.0 + 28.0 * _smooth_field(rng, size, 5) + rng.normal(0, 7, (size, size))
    b = 30.0 + 18.0 * _smooth_field(rng, size, 5) + rng.normal(0, 6, (size, size))
    return np.stack([r, g, b], axis=-1)


def _add_lesions(rng: np.random.Generator, img: np.ndarray, spec: SynthSpec) -> None:
    size = spec.image_size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    count = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
    for _ in range(count):
        cy, cx = rng.uniform(0, size, 2)
        a = rng.uniform(*spec.lesion_radius)
        b = rng.uniform(*spec.lesion_radius)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dy * np.cos(theta) + dx * np.sin(theta)
        v = -dy * np.sin(theta) + dx * np.cos(theta)
        rnorm = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        alpha = np.clip(1.6 * (1.0 - rnorm), 0.0, 1.0) * 0.97
        shade = rng.uniform(0.85, 1.1)
        color = np.array([55.0, 35.0, 15.0]) * shade
        img[...] = img * (1 - alpha[..., None]) + color * alpha[..., None]


def render_image(spec: SynthSpec, label: str, index: int) -> np.ndarray:
    """Render one image deterministically from (seed, label, index)."""
    if label not in CLASS_NAMES:
        raise ContractError(f"unknown class {label!r}")
    stream = CLASS_NAMES.index(label) * 1_000_003 + index
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, stream])))
    img = _leaf_texture(rng, spec.image_size)
    if label == "anthracnose":
        _add_lesions(rng, img, spec)
    return np.clip(img, 0, 255).astype(np.uint8)


def gen_synth(spec: SynthSpec, out_dir) -> str:
    """Write per-class PPM directories plus a manifest; returns manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for label in CLASS_NAMES:
        cls_dir = os.path.join(out_dir, label)
        os.makedirs(cls_dir, exist_ok=True)
        for i in range(spec.per_class):
            rel = f"{label}/{label}_{i:04d}.ppm"
            write_ppm(os.path.join(out_dir, rel), render_image(spec, label, i))
            records.append(f"{rel}\t{label}")
    manifest = os.path.join(out_dir, MANIFEST_NAME)
    with open(manifest, "w", encoding="utf-8") as f:
        f.write("\n".join(records) + "\n")
    return manifest


@dataclass
class ImageDataset:
    """Normalized images plus integer labels (indices into class_names)."""

    images: np.ndarray  # (N, H, W, 3) float32 in [-1, 1]
    labels: np.ndarray  # (N,) int64
    class_names: tuple[str, ...]
    paths: tuple[str, ...]

    def __len__(self) -> int:
        return self.images.shape[0]


def load_dataset(data_dir) -> ImageDataset:
    """Load a gen_synth-style directory via its manifest."""
    manifest = os.path.join(data_dir, MANIFEST_NAME)
    if not os.path.exists(manifest):
        raise ContractError(f"no {MANIFEST_NAME} in {data_dir}")
    rels, labels = [], []
    with open(manifest, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rel, label = line.rstrip("\n").split("\t")
            rels.append(rel)
            labels.append(label)
    class_names = tuple(sorted(set(labels)))
    images = np.stack([normalize_pixels(read_ppm(os.path.join(data_dir, r)))
                       for r in rels])
    y = np.array([class_names.index(c) for c in labels], np.int64)
    return ImageDataset(images, y, class_names, tuple(rels))
