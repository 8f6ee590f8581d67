"""Deterministic BEV geometry: pinhole projection, per-level depth
bookkeeping, and polar-to-Cartesian feature resampling.

Grid conventions used throughout the package:
  * BEV arrays are (C, Z, X) with depth row 0 at the FAR edge and row Z-1
    nearest the camera; column 0 is the leftmost lateral cell.
  * Cell (r, c) has metric center z = z_min + (Z - r - 0.5) * cell_m and
    x = (c + 0.5 - X/2) * cell_m, in the ego/camera ground frame.
  * Polar grids are (C, Z_i, W_i): depth rows of one pyramid level by
    image columns at that level's resolution.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics for the horizontal ground-plane projection."""

    f: float
    u0: float
    image_h: int
    image_w: int

    def __post_init__(self):
        if self.f <= 0:
            raise GeometryError(f"focal length must be positive, got {self.f}")
        if not 0 <= self.u0 < self.image_w:
            raise GeometryError(f"principal offset {self.u0} outside [0, {self.image_w})")


@dataclass(frozen=True)
class BevGridSpec:
    """Extent and resolution of the Cartesian BEV window."""

    Z: int
    X: int
    cell_m: float
    z_min: float

    def __post_init__(self):
        if self.Z <= 0 or self.X <= 0 or self.cell_m <= 0:
            raise GeometryError(f"invalid BEV spec: Z={self.Z}, X={self.X}, cell_m={self.cell_m}")

    @property
    def z_max(self):
        return self.z_min + self.Z * self.cell_m

    @property
    def x_half(self):
        return 0.5 * self.X * self.cell_m

    def row_centers_z(self):
        r = np.arange(self.Z)
        return self.z_min + (self.Z - r - 0.5) * self.cell_m

    def col_centers_x(self):
        c = np.arange(self.X)
        return (c + 0.5 - 0.5 * self.X) * self.cell_m

    def refined(self, factor):
        """Same window at `factor`-times finer resolution."""
        return BevGridSpec(self.Z * factor, self.X * factor, self.cell_m / factor, self.z_min)

    def metric_to_index(self, x, z):
        """Continuous (row, col) grid coordinates of metric points."""
        r = self.Z - 0.5 - (np.asarray(z) - self.z_min) / self.cell_m
        c = np.asarray(x) / self.cell_m + 0.5 * self.X - 0.5
        return r, c


@dataclass(frozen=True)
class LevelSpec:
    """One pyramid level's share of the BEV depth axis."""

    level: int
    d: int
    row_start: int
    row_stop: int

    @property
    def depth_rows(self):
        return self.row_stop - self.row_start


def level_downsample_factor(level):
    """Downsampling factor of pyramid level i, 2^(i+2)."""
    if level not in (1, 2, 3, 4, 5):
        raise GeometryError(f"invalid pyramid level {level}, expected 1..5")
    return 2 ** (level + 2)


def ground_point_to_column(cam, x, z):
    """Image column of the ground point (x, 0, z): u = f*x/z + u0.

    May land outside [0, image_w); the caller clamps or pads. z must be
    strictly in front of the camera.
    """
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0):
        raise GeometryError(f"ground point behind camera: z={z}")
    return cam.f * np.asarray(x, dtype=np.float64) / z + cam.u0


def depth_partition(spec, cam, levels):
    """Assign contiguous BEV depth-row intervals to pyramid levels.

    Finer levels take farther depth. The boundary between levels i and
    i+1 sits where one BEV cell subtends about one level-i pixel at the
    optical axis, z = f * cell_m / d_i, clamped to the grid's depth range,
    rounded to whole rows and corrected so every level keeps at least one
    row. Returns LevelSpecs ordered level 1..levels (far to near).
    """
    if levels not in (1, 2, 3, 4, 5):
        raise GeometryError(f"level count must be 1..5, got {levels}")
    if spec.Z < levels:
        raise GeometryError(f"cannot partition {spec.Z} depth rows among {levels} levels")

    # Row-space position of the geometric edge at depth z (row 0 = far).
    def z_to_row_edge(z):
        z = min(max(z, spec.z_min), spec.z_max)
        return spec.Z - (z - spec.z_min) / spec.cell_m

    bounds = [0]
    for i in range(1, levels):
        z_b = cam.f * spec.cell_m / level_downsample_factor(i)
        bounds.append(int(np.floor(z_to_row_edge(z_b) + 0.5)))
    bounds.append(spec.Z)

    # Monotone correction: guarantee each level at least one row.
    for j in range(1, levels):
        bounds[j] = max(bounds[j], bounds[j - 1] + 1)
    for j in range(levels - 1, 0, -1):
        bounds[j] = min(bounds[j], bounds[j + 1] - 1)
    if bounds[0] != 0 or any(bounds[j] >= bounds[j + 1] for j in range(levels)):
        raise GeometryError(f"depth partition failed for Z={spec.Z}, levels={levels}: {bounds}")

    return [
        LevelSpec(level=i + 1, d=level_downsample_factor(i + 1), row_start=bounds[i], row_stop=bounds[i + 1])
        for i in range(levels)
    ]


def polar_to_cartesian(p_i, cam, d_i, spec, level):
    """Resample one level's polar features into its Cartesian depth band.

    For every Cartesian cell in the level's rows, the cell's metric (x, z)
    maps to the level-scaled image column u/d_i = (f/d_i)*x/z + u0/d_i;
    the polar grid is interpolated bilinearly along its width axis at that
    column (integer coordinates align with polar column indices). Columns
    outside the polar width read as zero. Gradients flow to `p_i`.
    """
    if level.d != d_i:
        raise GeometryError(f"level {level.level} has d={level.d}, got d_i={d_i}")
    if p_i.shape[1] != level.depth_rows:
        raise GeometryError(
            f"polar grid has {p_i.shape[1]} depth rows, level {level.level} expects {level.depth_rows}"
        )
    return ad.bilinear_sample(p_i, _polar_coords(cam, d_i, spec, level))


@functools.lru_cache(maxsize=256)
def _polar_coords(cam, d_i, spec, level):
    z = spec.row_centers_z()[level.row_start:level.row_stop]
    x = spec.col_centers_x()
    u = ground_point_to_column(cam, x[None, :], z[:, None]) / d_i
    rows = np.broadcast_to(np.arange(level.depth_rows, dtype=np.float64)[:, None], u.shape)
    return np.stack([rows, u])


def concat_depth(grids, level_specs, spec):
    """Stack per-level Cartesian bands along depth, far to near.

    `grids` and `level_specs` are ordered by level index; the level row
    intervals must tile [0, Z) exactly.
    """
    if len(grids) != len(level_specs):
        raise GeometryError(f"{len(grids)} grids for {len(level_specs)} level specs")
    cursor = 0
    for g, ls in zip(grids, level_specs):
        if ls.row_start != cursor:
            raise GeometryError(f"level {ls.level} rows start at {ls.row_start}, expected {cursor}")
        if g.shape[1] != ls.depth_rows:
            raise GeometryError(f"level {ls.level} grid has {g.shape[1]} rows, spec says {ls.depth_rows}")
        cursor = ls.row_stop
    if cursor != spec.Z:
        raise GeometryError(f"levels cover {cursor} depth rows, BEV grid has {spec.Z}")
    xs = {g.shape[2] for g in grids}
    cs = {g.shape[0] for g in grids}
    if len(xs) != 1 or len(cs) != 1:
        raise GeometryError(f"mismatched level grid shapes: {[g.shape for g in grids]}")
    if len(grids) == 1:
        return grids[0]
    return ad.concat(grids, axis=1)
