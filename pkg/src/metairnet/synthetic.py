"""Procedural shapes-and-textures image dataset for smoke benchmarks.

Each class is a (shape, texture, foreground hue) triple; images of a class
vary in position, scale, rotation, colour jitter and background.
"""

from __future__ import annotations

import colorsys
import itertools
from pathlib import Path

import numpy as np
from PIL import Image

from .data import SplitSpec, write_split_file

SHAPES = ("circle", "square", "triangle", "diamond", "ring", "cross")
TEXTURES = ("solid", "stripes", "checker", "dots")
HUES = (0.0, 0.08, 0.5, 0.58)


def _shape_mask(shape: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    r = np.sqrt(x**2 + y**2)
    if shape == "circle":
        return r < 1.0
    if shape == "square":
        return np.maximum(abs(x), abs(y)) < 0.85
    if shape == "triangle":
        return (y < 0.75) & (y > -0.9 + 1.7 * abs(x) * 1.05)
    if shape == "diamond":
        return abs(x) + abs(y) < 1.1
    if shape == "ring":
        return (r < 1.0) & (r > 0.55)
    if shape == "cross":
        inside = np.maximum(abs(x), abs(y)) < 1.0
        return inside & ((abs(x) < 0.33) | (abs(y) < 0.33))
    raise ValueError(shape)


def _texture(texture: str, x: np.ndarray, y: np.ndarray, phase: float) -> np.ndarray:
    """1 where the primary colour shows, 0 where the secondary colour shows."""
    if texture == "solid":
        return np.ones_like(x)
    if texture == "stripes":
        return (np.sin(7.0 * y + phase) > 0).astype(float)
    if texture == "checker":
        return ((np.floor(3.0 * x + phase) + np.floor(3.0 * y)) % 2 == 0).astype(float)
    if texture == "dots":
        fx = np.sin(8.0 * x + phase)
        fy = np.sin(8.0 * y)
        return ((fx * fy) < 0.5).astype(float)
    raise ValueError(texture)


def render(cls: tuple[str, str, float], size: int, rng: np.random.Generator) -> np.ndarray:
    shape, texture, hue = cls
    coords = np.linspace(-1.0, 1.0, size)
    gx, gy = np.meshgrid(coords, coords)
    theta = rng.uniform(-0.8, 0.8)
    scale = rng.uniform(0.4, 0.75)
    cx, cy = rng.uniform(-0.25, 0.25, size=2)
    dx, dy = gx - cx, gy - cy
    x = (np.cos(theta) * dx + np.sin(theta) * dy) / scale
    y = (-np.sin(theta) * dx + np.cos(theta) * dy) / scale

    h = (hue + rng.normal(0, 0.02)) % 1.0
    primary = np.array(colorsys.hsv_to_rgb(h, rng.uniform(0.6, 0.9), rng.uniform(0.7, 0.95)))
    secondary = primary * rng.uniform(0.3, 0.5)
    bg_hue = rng.uniform(0, 1)
    bg_a = np.array(colorsys.hsv_to_rgb(bg_hue, rng.uniform(0.1, 0.3), rng.uniform(0.3, 0.6)))
    bg_b = np.array(colorsys.hsv_to_rgb((bg_hue + 0.1) % 1, rng.uniform(0.1, 0.3), rng.uniform(0.3, 0.6)))
    ramp = (gx * np.cos(bg_hue * 6) + gy * np.sin(bg_hue * 6) + 2) / 4

    img = bg_a * (1 - ramp[..., None]) + bg_b * ramp[..., None]
    for _ in range(2):
        bx, by = rng.uniform(-1, 1, size=2)
        blob = (gx - bx) ** 2 + (gy - by) ** 2 < rng.uniform(0.01, 0.06)
        img = np.where(blob[..., None], rng.uniform(0, 1, size=3), img)
    mask = _shape_mask(shape, x, y)[..., None]
    tex = _texture(texture, x, y, rng.uniform(0, 2 * np.pi))[..., None]
    fg = tex * primary + (1 - tex) * secondary
    img = np.where(mask, fg, img)
    img = img + rng.normal(0, 0.06, size=img.shape)
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def make_shapes_dataset(
    root: str | Path,
    n_base: int = 20,
    n_val: int = 6,
    n_novel: int = 10,
    images_per_class: int = 30,
    size: int = 32,
    seed: int = 0,
) -> SplitSpec:
    """Write ``root/<class>/<i>.png`` plus ``root/split.txt``; return the split."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    combos = list(itertools.product(SHAPES, TEXTURES, HUES))
    total = n_base + n_val + n_novel
    if total > len(combos):
        raise ValueError(f"at most {len(combos)} distinct classes available")
    chosen = [combos[i] for i in rng.permutation(len(combos))[:total]]
    names = [f"c{i:03d}" for i in range(total)]
    for name, cls in zip(names, chosen):
        d = root / name
        d.mkdir(parents=True, exist_ok=True)
        for j in range(images_per_class):
            Image.fromarray(render(cls, size, rng)).save(d / f"{j:03d}.png")
    split = SplitSpec(
        frozenset(names[:n_base]),
        frozenset(names[n_base : n_base + n_val]),
        frozenset(names[n_base + n_val :]),
    )
    write_split_file(split, root / "split.txt")
    return split
