"""Deterministic top-down PNG rendering of a world state."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .simulation import WorldState

BACKGROUND = (34, 34, 34)
ROAD = (90, 90, 90)
EXIT = (60, 160, 60)
STATUS_COLORS = {
    "active": (70, 130, 220),
    "exited": (80, 220, 80),
    "crashed": (220, 60, 60),
    "passed_exit": (230, 160, 40),
    "timed_out": (150, 150, 150),
}
MARGIN = 5.0  # metres around the corridor


def render_frame(world: WorldState, pixels_per_meter: float = 4.0) -> Image.Image:
    """Raster of the corridor, exit gaps, and cars colored by status."""
    geom = world.geometry
    corridor = geom.corridor.corners()
    lo = corridor.min(axis=0) - MARGIN
    hi = corridor.max(axis=0) + MARGIN
    size = np.maximum(((hi - lo) * pixels_per_meter).astype(int), 1)
    img = Image.new("RGB", tuple(size), BACKGROUND)
    draw = ImageDraw.Draw(img)

    def to_px(pts: np.ndarray) -> list[tuple[float, float]]:
        pts = np.atleast_2d(pts)
        xy = (pts - lo) * pixels_per_meter
        # Flip y so north is up.
        return [(float(x), float(size[1] - y)) for x, y in xy]

    draw.polygon(to_px(corridor), fill=ROAD)
    for i in range(len(geom.exits)):
        draw.polygon(to_px(geom.exit_rect(i).corners()), fill=EXIT)
    for car in world.cars:
        draw.polygon(to_px(car.body().corners()), fill=STATUS_COLORS[car.status])
    return img


def save_frame(world: WorldState, path: str | Path, pixels_per_meter: float = 4.0) -> None:
    render_frame(world, pixels_per_meter).save(Path(path), format="PNG")
