"""Ground-truth 2.5D tabletop world with quasi-static push/grasp dynamics.

Blocks are extruded convex footprints resting at integer tenth-mm support
heights. Dynamics are deliberately simple and fully deterministic:

* pushing sweeps a 12 px wide, 62 px long band; table-level blocks in the
  band translate along the push direction until they clear the band front,
  displacing further table-level blocks in a bounded contact chain;
* grasping descends two fingertip zones, closes along the long axis and
  lifts the widest qualifying cross-section;
* stacked blocks whose support slides away (>= 20 mm) or vanishes settle
  back onto whatever remains beneath them.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np
from shapely.geometry import Polygon
from shapely import affinity

from .grid import (
    CELL_MM,
    GRASP_CORRIDOR_S_RANGE,
    GRASP_CENTER_S_RANGE,
    GRASP_FINGER_S_RANGES,
    GRASP_T_RANGE,
    GRID_SIZE,
    PUSH_S_RANGE,
    PUSH_T_RANGE,
    Heightmap,
    grasp_angle,
    rect_offsets,
    rect_polygon,
)

WORKSPACE_M = GRID_SIZE * CELL_MM / 1000.0  # 0.448 m
CELL_M = CELL_MM / 1000.0

PUSH_FRONT_M = 61.5 * CELL_M  # band front along the push axis
MAX_CHAIN_DEPTH = 5
SUPPORT_SLIP_MM = 20.0  # support displacement that drops a stacked block
FINGER_CLEARANCE_TENTHS = 250  # fingers descend 25 mm below the local top
MIN_GRIP_PX = 6.0  # minimum cross-section the jaws can hold
_AREA_EPS = 1e-10  # m^2; below this two footprints do not "touch"

# Strictly-inside margin for the per-pixel collision oracle, in pixel units.
# Keeping the oracle's pixel set a subset of any half-open zone rasterization
# makes "SCT passed but oracle fired" structurally impossible.
_ORACLE_INSET_PX = 1e-6


class MissingTargetError(KeyError):
    """The scene has no block with the requested target id."""


class SpawnFailureError(RuntimeError):
    """Random placement failed to terminate within the attempt budget."""


class Outcome(str, Enum):
    PICKED_TARGET = "picked_target"
    PICKED_NONTARGET = "picked_nontarget"
    EMPTY = "empty"
    COLLISION = "collision"


@dataclass(frozen=True)
class GraspOutcome:
    kind: Outcome
    block_id: int | None = None


@dataclass(frozen=True)
class Block:
    """Extruded convex footprint. Vertices are block-local meters; heights tenths of mm."""

    id: int
    shape: str
    vertices: tuple  # ((x, y), ...) local frame, m
    height_tenths: int
    pose: tuple  # (x, y, yaw) world, m / rad
    base_tenths: int = 0
    graspable: bool = True
    color: str = "gray"

    def __post_init__(self):
        if not (100 <= self.height_tenths <= 1200):
            raise ValueError("block height must be in [10, 120] mm")
        if self.base_tenths < 0:
            raise ValueError("block base must be >= 0")

    @property
    def top_tenths(self):
        return self.base_tenths + self.height_tenths

    def world_vertices(self):
        x, y, yaw = self.pose
        c, s = math.cos(yaw), math.sin(yaw)
        out = []
        for vx, vy in self.vertices:
            out.append((x + c * vx - s * vy, y + s * vx + c * vy))
        return np.array(out, dtype=np.float64)

    def polygon(self) -> Polygon:
        return Polygon(self.world_vertices())


@dataclass(frozen=True)
class Scene:
    blocks: tuple
    target_id: int
    rng_seed: int = 0

    def __post_init__(self):
        # target_id may dangle after the target has been picked up
        ids = [b.id for b in self.blocks]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate block ids")

    def block(self, block_id) -> Block:
        for b in self.blocks:
            if b.id == block_id:
                return b
        raise MissingTargetError(block_id)

    @property
    def target(self) -> Block:
        return self.block(self.target_id)

    def has_target(self):
        return any(b.id == self.target_id for b in self.blocks)


# ---------------------------------------------------------------------------
# Rasterization of footprints
# ---------------------------------------------------------------------------


def _ccw(verts):
    area = 0.0
    n = len(verts)
    for i in range(n):
        x0, y0 = verts[i]
        x1, y1 = verts[(i + 1) % n]
        area += x0 * y1 - x1 * y0
    return verts if area > 0 else verts[::-1]


def _polygon_mask(verts_m, inset_px=0.0):
    """Boolean grid of pixels whose centers lie inside a convex polygon.

    ``inset_px`` > 0 demands centers at least that many pixels inside every
    edge (used by the collision oracle to stay clear of boundary ties).
    """
    verts = _ccw(np.asarray(verts_m, dtype=np.float64))
    xmin, ymin = verts.min(axis=0)
    xmax, ymax = verts.max(axis=0)
    c0 = max(0, int(math.floor(xmin / CELL_M - 0.5)))
    c1 = min(GRID_SIZE - 1, int(math.ceil(xmax / CELL_M)))
    r0 = max(0, int(math.floor(ymin / CELL_M - 0.5)))
    r1 = min(GRID_SIZE - 1, int(math.ceil(ymax / CELL_M)))
    mask = np.zeros((GRID_SIZE, GRID_SIZE), dtype=bool)
    if c1 < c0 or r1 < r0:
        return mask
    cols = np.arange(c0, c1 + 1)
    rows = np.arange(r0, r1 + 1)
    px = (cols + 0.5) * CELL_M
    py = (rows + 0.5) * CELL_M
    X, Y = np.meshgrid(px, py)
    inside = np.ones(X.shape, dtype=bool)
    margin_m = inset_px * CELL_M
    n = len(verts)
    for i in range(n):
        ax, ay = verts[i]
        bx, by = verts[(i + 1) % n]
        cross = (bx - ax) * (Y - ay) - (by - ay) * (X - ax)
        edge_len = math.hypot(bx - ax, by - ay)
        inside &= cross >= margin_m * edge_len
    mask[r0 : r1 + 1, c0 : c1 + 1] = inside
    return mask


def render_heightmap(scene: Scene) -> Heightmap:
    """Per-pixel max of block tops; 0 where the table shows."""
    cells = np.zeros((GRID_SIZE, GRID_SIZE), dtype=np.int32)
    for b in scene.blocks:
        cover = _polygon_mask(b.world_vertices())
        np.maximum(cells, np.where(cover, np.int32(b.top_tenths), np.int32(0)), out=cells)
    return Heightmap(cells)


def target_mask(scene: Scene):
    """Pixels where the target is the topmost surface (what a camera would see)."""
    if not scene.has_target():
        raise MissingTargetError(scene.target_id)
    tgt = scene.target
    cover = _polygon_mask(tgt.world_vertices())
    others_top = np.zeros((GRID_SIZE, GRID_SIZE), dtype=np.int32)
    for b in scene.blocks:
        if b.id == tgt.id:
            continue
        c = _polygon_mask(b.world_vertices())
        np.maximum(others_top, np.where(c, np.int32(b.top_tenths), np.int32(0)), out=others_top)
    return cover & (others_top < tgt.top_tenths)


def collision_oracle(scene: Scene, footprint_polygons, descent_height_mm, heightmap=None):
    """True iff any surface inside any polygon exceeds the descent height.

    Exhaustive per-pixel check over pixels strictly inside each polygon.
    ``footprint_polygons`` is a list of (n, 2) world-frame vertex arrays.
    """
    hm = heightmap if heightmap is not None else render_heightmap(scene)
    thresh = int(round(descent_height_mm * 10.0))
    for poly in footprint_polygons:
        mask = _polygon_mask(poly, inset_px=_ORACLE_INSET_PX)
        if mask.any() and int(hm.cells[mask].max()) > thresh:
            return True
    return False


# ---------------------------------------------------------------------------
# Spawning
# ---------------------------------------------------------------------------

_SHAPES = ("cuboid", "cylinder", "triangle", "halfcyl")


def _shape_vertices(shape, rng):
    if shape == "cuboid":
        w = rng.integers(30, 71) / 1000.0
        l = rng.integers(30, 71) / 1000.0
        return (
            (-w / 2, -l / 2),
            (w / 2, -l / 2),
            (w / 2, l / 2),
            (-w / 2, l / 2),
        )
    if shape == "cylinder":
        radius = rng.integers(15, 33) / 1000.0
        pts = []
        for k in range(16):
            a = 2 * math.pi * k / 16
            pts.append((radius * math.cos(a), radius * math.sin(a)))
        return tuple(pts)
    if shape == "triangle":
        side = rng.integers(40, 76) / 1000.0
        h = side * math.sqrt(3) / 2
        return ((-side / 2, -h / 3), (side / 2, -h / 3), (0.0, 2 * h / 3))
    if shape == "halfcyl":
        radius = rng.integers(20, 39) / 1000.0
        pts = [(radius * math.cos(math.pi * k / 8), radius * math.sin(math.pi * k / 8)) for k in range(9)]
        return tuple(pts)
    raise ValueError(f"unknown shape {shape!r}")


def _base_under(polygon, blocks):
    """Support height for a footprint dropped onto existing blocks (tenths)."""
    base = 0
    for b in blocks:
        if polygon.intersection(b.polygon()).area > _AREA_EPS:
            base = max(base, b.top_tenths)
    return base


def spawn_random_clutter(n_blocks, seed, drop_radius_m=0.15, max_stack_mm=150) -> Scene:
    """Drop ``n_blocks`` random blocks in a central disc, stacking on overlap.

    Deterministic for a given seed. Raises SpawnFailureError if a block
    cannot be placed within 1,000 attempts.
    """
    if not 1 <= n_blocks <= 30:
        raise ValueError("n_blocks must be in [1, 30]")
    rng = np.random.default_rng(seed)
    cx = cy = WORKSPACE_M / 2
    blocks = []
    for bid in range(n_blocks):
        placed = False
        for _ in range(1000):
            shape = _SHAPES[rng.integers(0, len(_SHAPES))]
            verts = _shape_vertices(shape, rng)
            height = int(rng.integers(20, 61)) * 10
            rr = drop_radius_m * math.sqrt(rng.uniform())
            phi = rng.uniform(0.0, 2 * math.pi)
            yaw = rng.uniform(0.0, 2 * math.pi)
            pose = (cx + rr * math.cos(phi), cy + rr * math.sin(phi), yaw)
            cand = Block(
                id=bid,
                shape=shape,
                vertices=verts,
                height_tenths=height,
                pose=pose,
                color=f"c{bid % 8}",
            )
            wv = cand.world_vertices()
            if wv.min() < 2 * CELL_M or wv.max() > WORKSPACE_M - 2 * CELL_M:
                continue
            base = _base_under(cand.polygon(), blocks)
            if base + height > max_stack_mm * 10:
                continue
            blocks.append(replace(cand, base_tenths=base))
            placed = True
            break
        if not placed:
            raise SpawnFailureError(f"could not place block {bid} in 1000 attempts")

    scene = Scene(blocks=tuple(blocks), target_id=blocks[0].id, rng_seed=int(seed))
    target_id = _pick_target(scene, rng)
    return replace(scene, target_id=target_id)


def _pick_target(scene: Scene, rng):
    """Prefer a well-visible block as the target; fall back gracefully."""
    visible = {}
    for b in scene.blocks:
        probe = replace(scene, target_id=b.id)
        visible[b.id] = int(np.count_nonzero(target_mask(probe)))
    good = sorted(bid for bid, n in visible.items() if n >= 40)
    if not good:
        good = sorted(bid for bid, n in visible.items() if n > 0)
    if not good:
        good = sorted(visible)
    return int(good[rng.integers(0, len(good))])


# ---------------------------------------------------------------------------
# Push dynamics
# ---------------------------------------------------------------------------


def _s_interval(poly: Polygon, origin, u):
    xs = np.asarray(poly.exterior.coords, dtype=np.float64)
    s = (xs[:, 0] - origin[0]) * u[0] + (xs[:, 1] - origin[1]) * u[1]
    return float(s.min()), float(s.max())


def _overlaps(pa: Polygon, pb: Polygon):
    return pa.intersection(pb).area > _AREA_EPS


def _contact_clamp(poly: Polygon, other: Polygon, u, delta):
    """Largest shift in [0, delta] along u that keeps ``poly`` off ``other``."""
    if not _overlaps(affinity.translate(poly, u[0] * delta, u[1] * delta), other):
        return delta
    lo, hi = 0.0, delta  # lo is known clear (pre-move state had no overlap)
    for _ in range(24):
        mid = 0.5 * (lo + hi)
        if _overlaps(affinity.translate(poly, u[0] * mid, u[1] * mid), other):
            hi = mid
        else:
            lo = mid
    return lo


def _in_workspace(poly: Polygon):
    c = poly.centroid
    return 0.0 <= c.x <= WORKSPACE_M and 0.0 <= c.y <= WORKSPACE_M


def simulate_push(scene: Scene, start, angle) -> Scene:
    """Sweep the closed gripper 62 px from ``start`` along ``angle``.

    Table-level blocks hit by the band translate until they clear the band
    front; contacts propagate through at most MAX_CHAIN_DEPTH table-level
    blocks (deeper blocks act as walls and clamp the push). Blocks whose
    centroid leaves the workspace are removed. Stacked blocks fall when
    their support slides >= 20 mm or disappears, settling onto whatever
    remains beneath them.
    """
    r, c = start
    origin = ((c + 0.5) * CELL_M, (r + 0.5) * CELL_M)
    u = (math.cos(angle), math.sin(angle))
    band = Polygon(rect_polygon(start, angle, PUSH_S_RANGE, PUSH_T_RANGE))

    cur = {b.id: b for b in scene.blocks}
    polys = {b.id: b.polygon() for b in scene.blocks}
    displaced = {b.id: 0.0 for b in scene.blocks}
    removed = set()

    def table_ids():
        return [bid for bid in cur if bid not in removed and cur[bid].base_tenths == 0]

    def move(bid, target_smin, depth):
        if depth > MAX_CHAIN_DEPTH or bid in removed:
            return
        smin, _ = _s_interval(polys[bid], origin, u)
        delta = target_smin - smin
        if delta <= 1e-12:
            return
        moved = affinity.translate(polys[bid], u[0] * delta, u[1] * delta)
        hit = [oid for oid in table_ids() if oid != bid and _overlaps(moved, polys[oid])]
        hit.sort(key=lambda oid: (-_s_interval(polys[oid], origin, u)[0], oid))
        if depth < MAX_CHAIN_DEPTH:
            _, new_smax = _s_interval(moved, origin, u)
            for oid in hit:
                move(oid, new_smax, depth + 1)
        # whatever still stands in the way clamps this block
        for oid in table_ids():
            if oid == bid or bid in removed:
                continue
            delta = _contact_clamp(polys[bid], polys[oid], u, delta)
        if delta <= 1e-12:
            return
        b = cur[bid]
        x, y, yaw = b.pose
        cur[bid] = replace(b, pose=(x + u[0] * delta, y + u[1] * delta, yaw))
        polys[bid] = cur[bid].polygon()
        displaced[bid] += delta
        if not _in_workspace(polys[bid]):
            removed.add(bid)

    primaries = [bid for bid in table_ids() if _overlaps(polys[bid], band)]
    primaries.sort(key=lambda bid: (-_s_interval(polys[bid], origin, u)[0], bid))
    for bid in primaries:
        move(bid, PUSH_FRONT_M, 1)

    survivors = _settle_supports(scene.blocks, cur, displaced, removed)
    return replace(scene, blocks=survivors)


def _settle_supports(old_blocks, cur, displaced, removed):
    """Re-settle stacked blocks after displacements/removals; drop removed ones."""
    old_by_id = {b.id: b for b in old_blocks}
    old_polys = {b.id: b.polygon() for b in old_blocks}
    slip_m = SUPPORT_SLIP_MM / 1000.0

    order = sorted((bid for bid in cur if bid not in removed), key=lambda i: (old_by_id[i].base_tenths, i))
    settled = {}
    fell = set()
    for bid in order:
        b = cur[bid]
        if old_by_id[bid].base_tenths == 0:
            settled[bid] = b
            continue
        old_base = old_by_id[bid].base_tenths
        supporters = [
            oid
            for oid in old_by_id
            if oid != bid
            and old_by_id[oid].top_tenths == old_base
            and old_polys[oid].intersection(old_polys[bid]).area > _AREA_EPS
        ]
        disturbed = (
            not supporters
            or any(oid in removed for oid in supporters)
            or any(displaced.get(oid, 0.0) >= slip_m for oid in supporters)
            or any(oid in fell for oid in supporters)
        )
        if not disturbed:
            settled[bid] = b
            continue
        poly = b.polygon()
        new_base = 0
        for oid, ob in settled.items():
            if ob.top_tenths <= old_base and poly.intersection(ob.polygon()).area > _AREA_EPS:
                new_base = max(new_base, ob.top_tenths)
        if new_base != b.base_tenths:
            fell.add(bid)
        settled[bid] = replace(b, base_tenths=new_base)
    return tuple(settled[bid] for bid in sorted(settled))


# ---------------------------------------------------------------------------
# Grasp dynamics
# ---------------------------------------------------------------------------


def grasp_zone_polygons(center, orientation_idx):
    """World polygons of the two fingertip descent zones."""
    angle = grasp_angle(orientation_idx)
    return [
        rect_polygon(center, angle, s_range, GRASP_T_RANGE, corner_anchor=True)
        for s_range in GRASP_FINGER_S_RANGES
    ]


def grasp_center_height(heightmap: Heightmap, center, orientation_idx):
    """Max height (tenths) over the central 12x12 px zone of the jaw."""
    angle = grasp_angle(orientation_idx)
    dr, dc, _ = rect_offsets(angle, GRASP_CENTER_S_RANGE, GRASP_T_RANGE, corner_anchor=True)
    rr = dr + center[0]
    cc = dc + center[1]
    ok = (rr >= 0) & (rr < GRID_SIZE) & (cc >= 0) & (cc < GRID_SIZE)
    if not ok.any():
        return 0
    return int(heightmap.cells[rr[ok], cc[ok]].max())


def simulate_grasp(scene: Scene, center, orientation_idx):
    """Top-down parallel-jaw grasp at a pixel center and 22.5-degree orientation.

    Returns (new_scene, GraspOutcome). All failure modes are outcomes.
    """
    hm = render_heightmap(scene)
    h_center = grasp_center_height(hm, center, orientation_idx)
    descent = max(0, h_center - FINGER_CLEARANCE_TENTHS)
    finger_polys = grasp_zone_polygons(center, orientation_idx)
    if collision_oracle(scene, finger_polys, descent / 10.0, heightmap=hm):
        return scene, GraspOutcome(Outcome.COLLISION)

    angle = grasp_angle(orientation_idx)
    corridor = Polygon(
        rect_polygon(center, angle, GRASP_CORRIDOR_S_RANGE, GRASP_T_RANGE, corner_anchor=True)
    )
    r, c = center
    origin = ((c + 1.0) * CELL_M, (r + 1.0) * CELL_M)  # corner anchor, world frame
    u = (math.cos(angle), math.sin(angle))

    best = None  # (extent_px, id)
    for b in scene.blocks:
        if b.top_tenths < descent + FINGER_CLEARANCE_TENTHS:
            continue
        inter = b.polygon().intersection(corridor)
        if inter.area <= _AREA_EPS:
            continue
        smin, smax = _s_interval(inter, origin, u)
        extent_px = (smax - smin) / CELL_M
        if extent_px < MIN_GRIP_PX:
            continue
        if best is None or extent_px > best[0] or (extent_px == best[0] and b.id < best[1]):
            best = (extent_px, b.id)

    if best is None:
        return scene, GraspOutcome(Outcome.EMPTY)
    picked = scene.block(best[1])
    if not picked.graspable:
        return scene, GraspOutcome(Outcome.EMPTY, block_id=picked.id)

    cur = {b.id: b for b in scene.blocks if b.id != picked.id}
    displaced = {picked.id: math.inf}
    survivors = _settle_supports(scene.blocks, cur, displaced, removed={picked.id})
    kind = Outcome.PICKED_TARGET if picked.id == scene.target_id else Outcome.PICKED_NONTARGET
    return replace(scene, blocks=survivors), GraspOutcome(kind, block_id=picked.id)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def scene_to_dict(scene: Scene) -> dict:
    return {
        "target_id": scene.target_id,
        "rng_seed": scene.rng_seed,
        "blocks": [
            {
                "id": b.id,
                "shape": b.shape,
                "vertices": [[float(x), float(y)] for x, y in b.vertices],
                "height_mm": b.height_tenths / 10.0,
                "base_mm": b.base_tenths / 10.0,
                "pose": [float(v) for v in b.pose],
                "graspable": bool(b.graspable),
                "color": b.color,
                "target": b.id == scene.target_id,
            }
            for b in scene.blocks
        ],
    }


def scene_from_dict(d: dict) -> Scene:
    blocks = []
    target_id = d.get("target_id")
    for entry in d["blocks"]:
        blocks.append(
            Block(
                id=int(entry["id"]),
                shape=str(entry.get("shape", "cuboid")),
                vertices=tuple((float(x), float(y)) for x, y in entry["vertices"]),
                height_tenths=int(round(float(entry["height_mm"]) * 10)),
                pose=tuple(float(v) for v in entry["pose"]),
                base_tenths=int(round(float(entry.get("base_mm", 0.0)) * 10)),
                graspable=bool(entry.get("graspable", True)),
                color=str(entry.get("color", "gray")),
            )
        )
        if entry.get("target"):
            target_id = entry["id"]
    if target_id is None:
        raise ValueError("scene has no target block")
    return Scene(blocks=tuple(blocks), target_id=int(target_id), rng_seed=int(d.get("rng_seed", 0)))


def save_scene(path, scene: Scene):
    with open(path, "w") as f:
        json.dump(scene_to_dict(scene), f, indent=2, sort_keys=True)
        f.write("\n")


def load_scene(path) -> Scene:
    with open(path) as f:
        return scene_from_dict(json.load(f))


def scene_digest(scene: Scene) -> str:
    payload = json.dumps(scene_to_dict(scene), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()
