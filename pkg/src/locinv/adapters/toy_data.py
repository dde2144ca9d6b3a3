"""Procedural colored-shape scenes used to train and exercise the toy backend.

Scenes are drawn on a 16x16 cell grid and upsampled 4x to 64x64 pixels, so
every image is constant on 4x4 blocks. Colors are 8-bit so scenes survive a
PNG roundtrip unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GRID = 16
IMAGE_SIZE = 64
CELL = IMAGE_SIZE // GRID

SHAPES = ("square", "circle", "triangle", "cross")
COLORS = {
    "red": (255, 0, 0),
    "green": (0, 192, 0),
    "blue": (0, 64, 255),
    "yellow": (255, 255, 0),
    "white": (255, 255, 255),
    "purple": (128, 0, 192),
    "orange": (255, 128, 0),
    "cyan": (0, 255, 255),
}
BACKGROUNDS = (32, 64, 96)


@dataclass
class SceneObject:
    shape: str
    color: str
    mask: np.ndarray  # bool [GRID, GRID]


@dataclass
class Scene:
    image: np.ndarray  # float32 [3, 64, 64]
    prompt: str
    objects: list[SceneObject]

    def pixel_mask(self, index: int) -> np.ndarray:
        return upsample_cells(self.objects[index].mask)


def upsample_cells(mask: np.ndarray) -> np.ndarray:
    return np.kron(mask.astype(np.uint8), np.ones((CELL, CELL), np.uint8)).astype(bool)


def shape_mask(shape: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2
    if shape == "square":
        m = np.ones((size, size), bool)
    elif shape == "circle":
        m = (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2) ** 2 * 0.9
    elif shape == "triangle":
        half = (yy + 1) / size * (size / 2)
        m = np.abs(xx - c) <= half
    elif shape == "cross":
        w = max(size // 3, 1)
        lo = (size - w) // 2
        m = np.zeros((size, size), bool)
        m[lo:lo + w, :] = True
        m[:, lo:lo + w] = True
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m


def _place(rng: np.random.Generator, occupied: np.ndarray, size: int, tries: int = 200):
    for _ in range(tries):
        y = int(rng.integers(0, GRID - size + 1))
        x = int(rng.integers(0, GRID - size + 1))
        lo_y, lo_x = max(y - 1, 0), max(x - 1, 0)
        if not occupied[lo_y:y + size + 1, lo_x:x + size + 1].any():
            return y, x
    return None


def render(objects: list[tuple[str, str, int, int, int]], background: int) -> tuple[np.ndarray, list[SceneObject]]:
    """Draw ``(shape, color, y, x, size)`` objects on a uniform background."""
    cells = np.full((3, GRID, GRID), background, np.uint8)
    out = []
    for shape, color, y, x, size in objects:
        m = np.zeros((GRID, GRID), bool)
        m[y:y + size, x:x + size] = shape_mask(shape, size)
        cells[:, m] = np.asarray(COLORS[color], np.uint8)[:, None]
        out.append(SceneObject(shape, color, m))
    image = np.repeat(np.repeat(cells, CELL, axis=1), CELL, axis=2)
    return to_float(image), out


def to_float(image_u8: np.ndarray) -> np.ndarray:
    return image_u8.astype(np.float32) / np.float32(255)


def caption(objects: list[SceneObject], with_color: list[bool]) -> str:
    parts = []
    for obj, colored in zip(objects, with_color):
        parts.append(f"a {obj.color} {obj.shape}" if colored else f"a {obj.shape}")
    return " and ".join(parts)


def random_scene(rng: np.random.Generator, n_objects: int | None = None,
                 color_drop: float = 0.0) -> Scene:
    if n_objects is None:
        n_objects = int(rng.integers(1, 3))
    background = int(rng.choice(BACKGROUNDS))
    occupied = np.zeros((GRID, GRID), bool)
    specs = []
    shapes = rng.choice(SHAPES, size=n_objects, replace=False)
    colors = rng.choice(list(COLORS), size=n_objects, replace=False)
    for shape, color in zip(shapes, colors):
        size = int(rng.integers(6, 9)) if n_objects == 1 else int(rng.integers(5, 8))
        spot = _place(rng, occupied, size)
        if spot is None:
            continue
        y, x = spot
        occupied[y:y + size, x:x + size] = True
        specs.append((str(shape), str(color), y, x, size))
    image, objects = render(specs, background)
    with_color = [bool(rng.random() >= color_drop) for _ in objects]
    return Scene(image, caption(objects, with_color), objects)
