"""Heightmap grid, bit masks, action masks, and rotated-rectangle rasterization.

Conventions used throughout the package:

* Grids are 224x224 numpy arrays indexed ``[row, col]``. A pixel covers a
  2x2 mm square; pixel (r, c) has its center at world
  ``x = (c + 0.5) * cell_m``, ``y = (r + 0.5) * cell_m`` with the workspace
  origin at the (0, 0) pixel corner. The workspace spans 0.448 m per side.
* Heights are stored as int32 *tenths of a millimetre* so that all height
  comparisons are exact integer comparisons.
* Angles are radians with direction vector ``(dx, dy) = (cos a, sin a)``
  in pixel axes (x = column, y = row).
* Rotated rectangles are rasterized with a nearest-pixel rule: a pixel
  belongs to the rectangle iff its center's coordinates (s, t) along the
  rectangle axes fall in half-open ranges ``[s_lo, s_hi) x [t_lo, t_hi)``.
  Grasp rectangles are anchored at the pixel *corner* (center + (0.5, 0.5))
  so that even-sized rectangles are symmetric under 90/180 degree rotation
  of the pixel lattice.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

GRID_SIZE = 224
CELL_MM = 2.0
WORKSPACE_MM = GRID_SIZE * CELL_MM  # 448 mm
MAX_HEIGHT_TENTHS = 10_000  # heights are < 1000 mm

# Push band: 62 px long, 12 px wide, route starts at the start pixel.
PUSH_LEN_PX = 62
PUSH_WIDTH_PX = 12
PUSH_S_RANGE = (-0.5, 61.5)
PUSH_T_RANGE = (-6.0, 6.0)
# Closed-gripper footprint at the push start: leading 12x12 patch of the band.
PUSH_FOOT_S_RANGE = (-0.5, 11.5)

# Grasp rectangle: 60 px long, 12 px wide, corner-anchored at the center pixel.
GRASP_LEN_PX = 60
GRASP_WIDTH_PX = 12
GRASP_S_RANGE = (-30.0, 30.0)
GRASP_T_RANGE = (-6.0, 6.0)
# 12x12 zones: center of the jaw and the two fingertip ends.
GRASP_CENTER_S_RANGE = (-6.0, 6.0)
GRASP_FINGER_S_RANGES = ((-30.0, -18.0), (18.0, 30.0))
# Corridor swept while the fingers close (between the finger zones).
GRASP_CORRIDOR_S_RANGE = (-18.0, 18.0)

N_GRASP_ORIENTATIONS = 16
ORIENTATION_STEP_RAD = math.pi / 8  # 22.5 degrees

DEFAULT_ROI_HALF_EXTENT = 50
DEFAULT_BORDER_RADIUS_PX = 10


class EmptyMaskError(ValueError):
    """Raised when an operation needs at least one set pixel."""


def mm_to_tenths(mm):
    """Quantize heights in mm to the internal integer tenth-mm scale."""
    return np.asarray(np.rint(np.asarray(mm, dtype=np.float64) * 10.0), dtype=np.int32)


def tenths_to_mm(tenths):
    return np.asarray(tenths, dtype=np.float64) / 10.0


@dataclass(frozen=True)
class Heightmap:
    """2.5D surface heights over the workspace.

    ``cells`` holds int32 tenths of mm, shape (224, 224).
    """

    cells: np.ndarray
    cell_size_mm: float = CELL_MM
    origin_m: tuple = (0.0, 0.0)

    def __post_init__(self):
        cells = np.asarray(self.cells, dtype=np.int32)
        if cells.shape != (GRID_SIZE, GRID_SIZE):
            raise ValueError(f"heightmap must be {GRID_SIZE}x{GRID_SIZE}, got {cells.shape}")
        if cells.min(initial=0) < 0 or cells.max(initial=0) >= MAX_HEIGHT_TENTHS:
            raise ValueError("heights must be in [0, 1000) mm")
        object.__setattr__(self, "cells", cells)

    @classmethod
    def zeros(cls):
        return cls(np.zeros((GRID_SIZE, GRID_SIZE), dtype=np.int32))

    @classmethod
    def from_mm(cls, heights_mm):
        return cls(mm_to_tenths(heights_mm))

    def mm(self):
        return tenths_to_mm(self.cells)

    def max_tenths_in(self, mask):
        """Max height (tenths) over the set pixels of a boolean mask; 0 if empty."""
        if not mask.any():
            return 0
        return int(self.cells[mask].max())


@dataclass(frozen=True)
class Region:
    """Square pixel window, clipped to the grid."""

    center: tuple  # (row, col)
    half_extent: int = DEFAULT_ROI_HALF_EXTENT

    @property
    def r0(self):
        return max(0, self.center[0] - self.half_extent)

    @property
    def r1(self):
        return min(GRID_SIZE, self.center[0] + self.half_extent)

    @property
    def c0(self):
        return max(0, self.center[1] - self.half_extent)

    @property
    def c1(self):
        return min(GRID_SIZE, self.center[1] + self.half_extent)

    def slices(self):
        return slice(self.r0, self.r1), slice(self.c0, self.c1)

    def contains(self, r, c):
        return self.r0 <= r < self.r1 and self.c0 <= c < self.c1


@dataclass(frozen=True)
class ActionMask:
    """Rasterized action footprint over the grid.

    ``values`` is float32 over {0, 0.5, 1.0}. ``coverage`` is the fraction of
    the nominal rectangle that landed in bounds (1.0 when nothing clipped).
    """

    values: np.ndarray
    coverage: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.shape != (GRID_SIZE, GRID_SIZE):
            raise ValueError("action mask must cover the full grid")
        object.__setattr__(self, "values", v)

    def nonzero_count(self):
        return int(np.count_nonzero(self.values))


def mask_centroid(mask):
    """Centroid (row, col) of set pixels, rounded half-up per axis."""
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise EmptyMaskError("mask has no set pixels")
    mr = float(rows.mean())
    mc = float(cols.mean())
    return int(math.floor(mr + 0.5)), int(math.floor(mc + 0.5))


def roi_of_target(mask, half_extent=DEFAULT_ROI_HALF_EXTENT):
    """Square region centered on the target mask centroid."""
    return Region(center=mask_centroid(mask), half_extent=half_extent)


def rect_offsets(angle, s_range, t_range, corner_anchor=False):
    """Integer pixel offsets from the anchor pixel covered by an oriented box.

    The box spans ``s_range x t_range`` (pixels, half-open) along the axes
    ``u = (cos angle, sin angle)`` and ``v = (-sin angle, cos angle)``. With
    ``corner_anchor`` the continuous anchor sits at the pixel corner
    (+0.5, +0.5), which is what keeps even-sized rectangles rotation-exact.

    Returns (drows, dcols) int arrays.
    """
    s_lo, s_hi = s_range
    t_lo, t_hi = t_range
    shift = 0.5 if corner_anchor else 0.0
    reach = math.hypot(max(abs(s_lo), abs(s_hi)), max(abs(t_lo), abs(t_hi))) + shift
    n = int(math.ceil(reach))
    dd = np.arange(-n, n + 1)
    dc, dr = np.meshgrid(dd, dd)
    ex = dc - shift
    ey = dr - shift
    ux, uy = math.cos(angle), math.sin(angle)
    s = ex * ux + ey * uy
    t = -ex * uy + ey * ux
    keep = (s >= s_lo) & (s < s_hi) & (t >= t_lo) & (t < t_hi)
    return dr[keep], dc[keep], s[keep]


def _paint(anchor, drows, dcols, values):
    """Scatter per-offset values around an anchor pixel, dropping out-of-grid pixels."""
    r, c = anchor
    rr = drows + r
    cc = dcols + c
    ok = (rr >= 0) & (rr < GRID_SIZE) & (cc >= 0) & (cc < GRID_SIZE)
    out = np.zeros((GRID_SIZE, GRID_SIZE), dtype=np.float32)
    out[rr[ok], cc[ok]] = values[ok] if isinstance(values, np.ndarray) else values
    return out, float(ok.sum()) / float(len(ok)) if len(ok) else 0.0


def rasterize_push(start, angle):
    """Push mask: 62x12 px band from ``start`` along ``angle``.

    The proximal half of the route is 0.5, the distal half 1.0. Pixels
    falling off-grid are dropped silently; the clip shows up in coverage.
    """
    dr, dc, s = rect_offsets(angle, PUSH_S_RANGE, PUSH_T_RANGE)
    vals = np.where(s < 30.5, np.float32(0.5), np.float32(1.0))
    values, coverage = _paint(start, dr, dc, vals)
    return ActionMask(values, coverage)


def grasp_angle(orientation_idx):
    """Rectangle angle for an orientation index; k and k+8 share one rectangle."""
    return (orientation_idx % 8) * ORIENTATION_STEP_RAD


def rasterize_grasp(center, orientation_idx):
    """Grasp mask: 60x12 px all-ones rectangle centered at ``center``.

    Orientations step by 22.5 degrees; since a rectangle is 180-degree
    symmetric, index k and k+8 rasterize identically (both remain distinct
    candidates because the two gripper approaches are symmetric).
    """
    angle = grasp_angle(orientation_idx)
    dr, dc, _ = rect_offsets(angle, GRASP_S_RANGE, GRASP_T_RANGE, corner_anchor=True)
    values, coverage = _paint(center, dr, dc, np.float32(1.0))
    return ActionMask(values, coverage)


def _disc_footprint(radius_px):
    dd = np.arange(-radius_px, radius_px + 1)
    dc, dr = np.meshgrid(dd, dd)
    return (dr * dr + dc * dc) <= radius_px * radius_px


def dilate(mask, radius_px):
    """Morphological dilation with a Euclidean disc (5-pixel plus at r=1)."""
    if radius_px < 1:
        raise ValueError("radius_px must be >= 1")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=_disc_footprint(radius_px))


def border_ring(mask, radius_px=DEFAULT_BORDER_RADIUS_PX):
    """Ring around a mask: dilation minus the mask itself."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros_like(mask)
    return dilate(mask, radius_px) & ~mask


def pixel_to_world(r, c, cell_mm=CELL_MM):
    """World (x, y) in meters of a (possibly fractional) pixel coordinate."""
    m = cell_mm / 1000.0
    return (c + 0.5) * m, (r + 0.5) * m


def world_to_pixel(x, y, cell_mm=CELL_MM):
    """Pixel (row, col) containing a world point (meters)."""
    m = cell_mm / 1000.0
    return int(math.floor(y / m)), int(math.floor(x / m))


def rect_polygon(anchor, angle, s_range, t_range, corner_anchor=False):
    """World-frame corner points (4x2, meters) of an oriented pixel-space box."""
    r, c = anchor
    shift = 0.5 if corner_anchor else 0.0
    ax, ay = c + shift, r + shift  # continuous pixel coordinates
    ux, uy = math.cos(angle), math.sin(angle)
    vx, vy = -math.sin(angle), math.cos(angle)
    s_lo, s_hi = s_range
    t_lo, t_hi = t_range
    corners = []
    for s, t in ((s_lo, t_lo), (s_hi, t_lo), (s_hi, t_hi), (s_lo, t_hi)):
        px = ax + s * ux + t * vx
        py = ay + s * uy + t * vy
        corners.append(pixel_to_world(py, px))
    return np.array(corners, dtype=np.float64)


# ---------------------------------------------------------------------------
# Binary grid container ("GEHM"): magic, version u16, dims u16 x2,
# cell_size_mm f32, then row-major little-endian payload. Heightmaps are f32
# meters, bit masks are packed bits (np.packbits row order), action masks
# raw f32 values.
# ---------------------------------------------------------------------------

GRID_MAGIC = b"GEHM"
GRID_VERSION = 1
_HEADER = struct.Struct("<4sHHHf")


def _pack_header(rows, cols, cell_size_mm):
    return _HEADER.pack(GRID_MAGIC, GRID_VERSION, rows, cols, cell_size_mm)


def _unpack_header(buf, offset=0):
    magic, version, rows, cols, cell_size = _HEADER.unpack_from(buf, offset)
    if magic != GRID_MAGIC:
        raise ValueError(f"bad grid magic {magic!r}")
    if version != GRID_VERSION:
        raise ValueError(f"unsupported grid version {version}")
    return rows, cols, cell_size, offset + _HEADER.size


def pack_heightmap(hm: Heightmap) -> bytes:
    meters = (hm.cells.astype(np.float64) / 10_000.0).astype("<f4")
    return _pack_header(*hm.cells.shape, hm.cell_size_mm) + meters.tobytes()


def unpack_heightmap(buf, offset=0):
    rows, cols, cell_size, offset = _unpack_header(buf, offset)
    n = rows * cols * 4
    meters = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=offset)
    cells = np.rint(meters.astype(np.float64) * 10_000.0).astype(np.int32)
    hm = Heightmap(cells.reshape(rows, cols), cell_size_mm=cell_size)
    return hm, offset + n


def pack_bitmask(mask, cell_size_mm=CELL_MM) -> bytes:
    mask = np.asarray(mask, dtype=bool)
    return _pack_header(*mask.shape, cell_size_mm) + np.packbits(mask).tobytes()


def unpack_bitmask(buf, offset=0):
    rows, cols, _, offset = _unpack_header(buf, offset)
    n = (rows * cols + 7) // 8
    bits = np.frombuffer(buf, dtype=np.uint8, count=n, offset=offset)
    mask = np.unpackbits(bits, count=rows * cols).astype(bool).reshape(rows, cols)
    return mask, offset + n


def pack_float_grid(values, cell_size_mm=CELL_MM) -> bytes:
    values = np.asarray(values, dtype="<f4")
    return _pack_header(*values.shape, cell_size_mm) + values.tobytes()


def unpack_float_grid(buf, offset=0):
    rows, cols, _, offset = _unpack_header(buf, offset)
    n = rows * cols * 4
    values = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=offset)
    return values.reshape(rows, cols).astype(np.float32), offset + n


def save_heightmap(path, hm: Heightmap):
    with open(path, "wb") as f:
        f.write(pack_heightmap(hm))


def load_heightmap(path) -> Heightmap:
    with open(path, "rb") as f:
        hm, _ = unpack_heightmap(f.read())
    return hm


def save_bitmask(path, mask):
    with open(path, "wb") as f:
        f.write(pack_bitmask(mask))


def load_bitmask(path):
    with open(path, "rb") as f:
        mask, _ = unpack_bitmask(f.read())
    return mask
