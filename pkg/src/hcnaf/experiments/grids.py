"""Rectangular density lattices and their text/image serializations."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np


@dataclass
class DensityGrid:
    """Cell-centered lattice of density values over a bounding box.

    values[iy, ix] is the density at the center of cell (ix, iy) with x and y
    both ascending; serializers that want image orientation flip rows.
    """

    bounds: tuple  # (x0, x1, y0, y1)
    resolution: int
    values: np.ndarray

    def __post_init__(self):
        x0, x1, y0, y1 = self.bounds
        if not (x1 > x0 and y1 > y0):
            raise ValueError("bounds must be a proper box")
        if self.values.shape != (self.resolution, self.resolution):
            raise ValueError("values must be a square lattice matching the resolution")
        if np.any(self.values < 0):
            raise ValueError("densities must be nonnegative")

    @property
    def xs(self):
        x0, x1, _, _ = self.bounds
        step = (x1 - x0) / self.resolution
        return x0 + step * (np.arange(self.resolution) + 0.5)

    @property
    def ys(self):
        _, _, y0, y1 = self.bounds
        step = (y1 - y0) / self.resolution
        return y0 + step * (np.arange(self.resolution) + 0.5)

    @property
    def cell_area(self):
        x0, x1, y0, y1 = self.bounds
        return (x1 - x0) * (y1 - y0) / self.resolution**2

    def riemann_sum(self):
        return float(self.values.sum() * self.cell_area)

    def mass_where(self, predicate):
        """Integral of the density over cells whose center satisfies the
        predicate(x, y) -> bool array."""
        xx, yy = np.meshgrid(self.xs, self.ys)
        return float(self.values[predicate(xx, yy)].sum() * self.cell_area)


def density_grid(model, c, bounds, resolution, chunk=2048, workers=1):
    """Evaluate the model's conditional density on the lattice.

    Chunks of lattice points may run on a small thread pool; results are
    written back by index, so the reduction is deterministic regardless of
    worker count.
    """
    grid = DensityGrid(bounds=tuple(bounds), resolution=resolution, values=np.zeros((resolution, resolution)))
    xx, yy = np.meshgrid(grid.xs, grid.ys)
    pts = np.column_stack([xx.ravel(), yy.ravel()])
    out = np.empty(pts.shape[0])
    starts = range(0, pts.shape[0], chunk)
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        def run(i):
            return i, model.log_prob_for_condition(pts[i:i + chunk], c)

        with ThreadPoolExecutor(max_workers=workers) as pool:
            for i, vals in pool.map(run, starts):
                out[i:i + chunk] = vals
    else:
        for i in starts:
            out[i:i + chunk] = model.log_prob_for_condition(pts[i:i + chunk], c)
    grid.values = np.exp(out).reshape(resolution, resolution)
    return grid


def grid_to_csv(grid: DensityGrid):
    """CSV text with header x,y,density, x fastest, y ascending."""
    buf = io.StringIO()
    buf.write("x,y,density\n")
    for iy, y in enumerate(grid.ys):
        for ix, x in enumerate(grid.xs):
            buf.write(f"{x:.10g},{y:.10g},{grid.values[iy, ix]:.10g}\n")
    return buf.getvalue()


def grid_to_pgm(grid: DensityGrid):
    """Binary P5 image, max-normalized to 0..255, row 0 at the top of the
    bounds (largest y)."""
    peak = float(grid.values.max())
    if peak > 0:
        img = np.rint(grid.values / peak * 255.0).astype(np.uint8)
    else:
        img = np.zeros_like(grid.values, dtype=np.uint8)
    img = img[::-1, :]  # y descending = image rows top to bottom
    header = f"P5\n{grid.resolution} {grid.resolution}\n255\n".encode("ascii")
    return header + img.tobytes(order="C")
