"""Synthetic scene specs, the renderer, and pixel-level analysis helpers.

Scenes are small RGB canvases with up to four colored shapes placed on a
3x3 position grid.  Captions are templated from the spec, so an oracle
can re-derive the expected scene from the instruction text alone and
re-render it exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
}
PALETTE_NAMES = tuple(PALETTE)
PALETTE_RGB = np.array([PALETTE[n] for n in PALETTE_NAMES], dtype=np.float32)

SHAPES = ("square", "circle", "triangle")

POSITIONS: dict[str, tuple[int, int]] = {
    "top left": (0, 0), "top center": (0, 1), "top right": (0, 2),
    "middle left": (1, 0), "center": (1, 1), "middle right": (1, 2),
    "bottom left": (2, 0), "bottom center": (2, 1), "bottom right": (2, 2),
}
POSITION_NAMES = tuple(POSITIONS)
BLACK = np.zeros(3, dtype=np.float32)

OBJECT_MIN_FRACTION = 0.25   # cell coverage that counts as "occupied"
COLOR_DISTANCE_TOL = 0.25    # RGB distance from background that counts as object


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: tuple[float, float, float]
    cell: tuple[int, int]
    size: int


@dataclass
class SceneSpec:
    canvas: int
    objects: list[ObjectSpec] = field(default_factory=list)
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def validate(self) -> None:
        if len(self.objects) > 4:
            raise ValueError(f"at most 4 objects per scene, got {len(self.objects)}")
        for obj in self.objects:
            y0, y1, x0, x1 = cell_bounds(self.canvas, *obj.cell)
            if obj.size > y1 - y0 or obj.size > x1 - x0:
                raise ValueError(f"object size {obj.size} does not fit cell {obj.cell} on canvas {self.canvas}")


def cell_bounds(canvas: int, row: int, col: int) -> tuple[int, int, int, int]:
    """Pixel bounds (y0, y1, x0, x1) of a 3x3 grid cell."""
    ys = [round(canvas * i / 3) for i in range(4)]
    return ys[row], ys[row + 1], ys[col], ys[col + 1]


def shape_mask(shape: str, size: int) -> np.ndarray:
    """(size, size) boolean footprint; fill ratios separate the shapes
    (square 1.0, circle ~0.75-0.85, triangle ~0.5)."""
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "circle":
        c = (size - 1) / 2.0
        yy, xx = np.mgrid[0:size, 0:size]
        return (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2.0) ** 2
    if shape == "triangle":
        mask = np.zeros((size, size), dtype=bool)
        c = (size - 1) / 2.0
        for i in range(size):
            half = i / 2.0
            for j in range(size):
                if abs(j - c) <= half:
                    mask[i, j] = True
        return mask
    raise ValueError(f"unknown shape {shape!r}")


def object_support(canvas: int, obj: ObjectSpec) -> np.ndarray:
    """Boolean (canvas, canvas) mask of the object's pixels."""
    support = np.zeros((canvas, canvas), dtype=bool)
    y0, y1, x0, x1 = cell_bounds(canvas, *obj.cell)
    ay = y0 + (y1 - y0 - obj.size) // 2
    ax = x0 + (x1 - x0 - obj.size) // 2
    support[ay:ay + obj.size, ax:ax + obj.size] = shape_mask(obj.shape, obj.size)
    return support


def render_scene(spec: SceneSpec) -> np.ndarray:
    """(canvas, canvas, 3) float32 image of the scene."""
    spec.validate()
    img = np.empty((spec.canvas, spec.canvas, 3), dtype=np.float32)
    img[:] = np.asarray(spec.background, dtype=np.float32)
    for obj in spec.objects:
        img[object_support(spec.canvas, obj)] = np.asarray(obj.color, dtype=np.float32)
    return img


def extract_edges(mask: np.ndarray) -> np.ndarray:
    """Boundary of a support mask: object pixels with a 4-neighbor outside."""
    padded = np.pad(mask, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


# -- pixel analysis (oracle side) ---------------------------------------------


def classify_palette(pixels: np.ndarray) -> np.ndarray:
    """Index of the nearest palette color for each pixel (last axis = RGB)."""
    flat = pixels.reshape(-1, 3)
    d = ((flat[:, None, :] - PALETTE_RGB[None, :, :]) ** 2).sum(axis=2)
    return d.argmin(axis=1).reshape(pixels.shape[:-1])


def objectish(pixels: np.ndarray, background) -> np.ndarray:
    """Pixels further than COLOR_DISTANCE_TOL from the background color."""
    bg = np.asarray(background, dtype=np.float32)
    return np.sqrt(((pixels - bg) ** 2).sum(axis=-1)) > COLOR_DISTANCE_TOL


def occupied_cells(img: np.ndarray, background) -> list[tuple[int, int]]:
    """Grid cells whose object-ish coverage exceeds OBJECT_MIN_FRACTION."""
    canvas = img.shape[0]
    obj = objectish(img, background)
    cells = []
    for row in range(3):
        for col in range(3):
            y0, y1, x0, x1 = cell_bounds(canvas, row, col)
            if obj[y0:y1, x0:x1].mean() > OBJECT_MIN_FRACTION:
                cells.append((row, col))
    return cells


def classify_shape(support: np.ndarray) -> str:
    """Shape from the bounding-box fill ratio of a clean support mask."""
    ys, xs = np.nonzero(support)
    if ys.size == 0:
        raise ValueError("classify_shape: empty support")
    box = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
    ratio = ys.size / box
    if ratio >= 0.92:
        return "square"
    if ratio >= 0.62:
        return "circle"
    return "triangle"


def dominant_color_name(pixels: np.ndarray) -> str:
    """Modal nearest-palette color over a set of pixels (N, 3)."""
    idx = classify_palette(pixels)
    return PALETTE_NAMES[np.bincount(idx, minlength=len(PALETTE_NAMES)).argmax()]
