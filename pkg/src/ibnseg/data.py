"""Synthetic paired two-modality segmentation scenes.

Every sample draws one set of class masks and renders it twice: modality A
as a textured three-channel colour image, modality B as a single channel
obtained by mixing A's channels, optionally inverting, and applying a random
per-sample gain/offset plus independent noise. Content is shared, appearance
is not.

Randomness comes from numpy's Philox counter-based generator keyed by
``(seed, sample_id)``, so sample ``i`` is a pure function of the scene description, the
seed and ``i`` on any platform.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensorio import read_tensor, write_tensor

LUMA = (0.299, 0.587, 0.114)

CLASS_NAMES = ("background", "cloud_shadow", "double_plant", "planter_skip",
               "standing_water", "waterway", "weed_cluster")

_COLORS = (
    (0.12, 0.14, 0.20),
    (0.20, 0.62, 0.12),
    (0.58, 0.44, 0.30),
    (0.12, 0.28, 0.58),
    (0.30, 0.46, 0.56),
    (0.45, 0.75, 0.22),
)
_BACKGROUND = (0.32, 0.46, 0.24)
SHAPES = ("ellipse", "band", "blob")


@dataclass(frozen=True)
class SceneSpec:
    """Generator parameters. ``frequencies`` excludes background (the leftover)."""

    size: tuple[int, int] = (64, 64)
    frequencies: tuple[float, ...] = (0.08, 0.06, 0.006, 0.05, 0.04, 0.10)
    shapes: tuple[str, ...] = ("ellipse", "band", "band", "blob", "band", "blob")
    colors: tuple[tuple[float, float, float], ...] = _COLORS
    background: tuple[float, float, float] = _BACKGROUND
    presence: float = 0.75
    concentration: float = 6.0
    blend: float = 0.75
    texture: float = 0.06
    noise: float = 0.02
    mix: tuple[float, float, float] = (-0.2, 1.0, 0.2)
    invert: bool = True
    gain_range: tuple[float, float] = (0.8, 1.2)
    offset_range: tuple[float, float] = (-0.05, 0.05)

    def __post_init__(self):
        k = len(self.frequencies)
        if any(f < 0 for f in self.frequencies):
            raise ValueError("class frequencies must be non-negative")
        if sum(self.frequencies) > 1.0 + 1e-12:
            raise ValueError(f"class frequencies sum to {sum(self.frequencies):.4f} > 1")
        if len(self.shapes) != k or len(self.colors) < k:
            raise ValueError("shapes and colors need one entry per class")
        bad = set(self.shapes) - set(SHAPES)
        if bad:
            raise ValueError(f"unknown shapes {sorted(bad)}")
        if not 0 < self.presence <= 1:
            raise ValueError("presence must lie in (0, 1]")
        if self.size[0] < 2 or self.size[1] < 2:
            raise ValueError("image size must be at least 2x2")

    @property
    def num_classes(self) -> int:
        return len(self.frequencies) + 1


@dataclass
class SegSample:
    image_a: np.ndarray  # (3, H, W)
    image_b: np.ndarray  # (1, H, W)
    mask: np.ndarray  # (m, H, W), channel 0 is background
    sample_id: int
    seed: int = 0

    def image(self, modality: str) -> np.ndarray:
        modality = modality.upper()
        if modality == "A":
            return self.image_a
        if modality == "B":
            return self.image_b
        raise ValueError(f"modality must be 'A' or 'B', got {modality!r}")


def sample_rng(seed: int, sample_id: int) -> np.random.Generator:
    key = np.array([seed & 0xFFFFFFFFFFFFFFFF, sample_id & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _shape_score(kind: str, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "ellipse":
        score = np.full((h, w), -np.inf)
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            ay, ax = rng.uniform(0.1, 0.3) * h, rng.uniform(0.1, 0.3) * w
            t = rng.uniform(0, np.pi)
            dy, dx = yy - cy, xx - cx
            u = (dx * np.cos(t) + dy * np.sin(t)) / ax
            v = (-dx * np.sin(t) + dy * np.cos(t)) / ay
            score = np.maximum(score, -(u * u + v * v))
        return score
    if kind == "band":
        t = rng.uniform(0, np.pi)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        along = (xx - cx) * np.cos(t) + (yy - cy) * np.sin(t)
        across = -(xx - cx) * np.sin(t) + (yy - cy) * np.cos(t)
        wiggle = rng.uniform(0.5, 2.5) * np.sin(along / rng.uniform(4, 10) + rng.uniform(0, 2 * np.pi))
        return -np.abs(across + wiggle)
    noise = rng.normal(size=(h, w))
    return gaussian_filter(noise, sigma=max(h, w) / 16, mode="wrap")


def _class_fraction(f: float, spec: SceneSpec, rng: np.random.Generator) -> float:
    present_p = max(spec.presence, f)
    present = rng.uniform() < present_p
    r = f / present_p
    if not present or f == 0:
        return 0.0
    if r >= 1.0:
        return 1.0
    k = spec.concentration
    return float(rng.beta(r * k, (1 - r) * k))


def sample_mask(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Binary (m, H, W) mask; anomaly channels may overlap, channel 0 is the rest."""
    h, w = spec.size
    mask = np.zeros((spec.num_classes, h, w))
    for c, (f, kind) in enumerate(zip(spec.frequencies, spec.shapes), start=1):
        frac = _class_fraction(f, spec, rng)
        score = _shape_score(kind, rng, h, w)
        k = int(round(frac * h * w))
        if k:
            top = np.argsort(-score.reshape(-1), kind="stable")[:k]
            mask[c].reshape(-1)[top] = 1.0
    mask[0] = 1.0 - mask[1:].max(axis=0) if spec.num_classes > 1 else 1.0
    return mask


def render_a(spec: SceneSpec, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.size
    img = np.empty((3, h, w))
    for ch in range(3):
        texture = gaussian_filter(rng.normal(size=(h, w)), sigma=1.5, mode="wrap")
        img[ch] = spec.background[ch] + spec.texture * texture / (texture.std() + 1e-12)
    for c in range(1, spec.num_classes):
        color = np.asarray(spec.colors[c - 1]).reshape(3, 1, 1)
        m = mask[c][None] > 0
        img = np.where(m, (1 - spec.blend) * img + spec.blend * color, img)
    if spec.noise:
        img = img + spec.noise * rng.normal(size=img.shape)
    return np.clip(img, 0.0, 1.0)


def render_b(spec: SceneSpec, image_a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    mix = np.asarray(spec.mix).reshape(3, 1, 1)
    b = (mix * image_a).sum(axis=0, keepdims=True)
    if spec.invert:
        b = 1.0 - b
    gain = rng.uniform(*spec.gain_range)
    offset = rng.uniform(*spec.offset_range)
    b = gain * b + offset
    if spec.noise:
        b = b + spec.noise * rng.normal(size=b.shape)
    return np.clip(b, 0.0, 1.0)


def generate_sample(spec: SceneSpec, seed: int, sample_id: int) -> SegSample:
    rng = sample_rng(seed, sample_id)
    mask = sample_mask(spec, rng)
    image_a = render_a(spec, mask, rng)
    image_b = render_b(spec, image_a, rng)
    return SegSample(image_a, image_b, mask, sample_id, seed)


def gen_dataset(spec: SceneSpec, n: int, seed: int = 0, start: int = 0) -> Iterator[SegSample]:
    """Samples ``start .. start + n - 1`` in order."""
    if n < 1:
        raise ValueError("n must be at least 1")
    for i in range(start, start + n):
        yield generate_sample(spec, seed, i)


def empirical_frequencies(stream: Iterable[SegSample], n: int | None = None) -> np.ndarray:
    """Mean per-sample positive-pixel fraction of each non-background class."""
    total, count = None, 0
    for sample in stream:
        frac = sample.mask[1:].mean(axis=(1, 2))
        total = frac if total is None else total + frac
        count += 1
        if n is not None and count >= n:
            break
    if not count:
        raise ValueError("empty stream")
    return total / count


def stack(samples: Iterable[SegSample], modality: str = "A") -> tuple[np.ndarray, np.ndarray]:
    """(images, masks) arrays for a list of samples in one modality."""
    samples = list(samples)
    x = np.stack([s.image(modality) for s in samples])
    y = np.stack([s.mask for s in samples])
    return x, y


# ------------------------------------------------------------------- export

_MANIFEST = "manifest.txt"


def export_dataset(samples: Iterable[SegSample], directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = ["ibnseg-dataset v1"]
    for s in samples:
        name = f"sample_{s.sample_id:06d}"
        sub = directory / name
        sub.mkdir(exist_ok=True)
        write_tensor(sub / "imageA", s.image_a)
        write_tensor(sub / "imageB", s.image_b)
        write_tensor(sub / "mask", s.mask)
        lines.append(f"{name} {s.sample_id} {s.seed}")
    (directory / _MANIFEST).write_text("\n".join(lines) + "\n")
    return directory


def load_dataset(directory) -> list[SegSample]:
    directory = Path(directory)
    path = directory / _MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != "ibnseg-dataset v1":
        raise ValueError(f"{path}: not an ibnseg dataset")
    out = []
    for line in lines[1:]:
        name, sid, seed = line.split()
        sub = directory / name
        out.append(SegSample(read_tensor(sub / "imageA").astype(np.float64),
                             read_tensor(sub / "imageB").astype(np.float64),
                             read_tensor(sub / "mask").astype(np.float64), int(sid), int(seed)))
    return out
