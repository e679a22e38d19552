"""Plates, bricks and the press-fit connections between them.

Plate frame: x runs along plate columns, y along plate rows, z up; cell
(row, col) is the lower-left knob of a footprint. A brick with orientation
0 has its length along x; orientation 90 swaps the footprint axes.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .kinematics import Pose, rot_z
from .seeding import derive_seed

PLATE = "plate"


class WorldError(Exception):
    pass


class UnknownBrick(WorldError, KeyError):
    pass


class PlacementError(WorldError):
    pass


@dataclass(frozen=True, order=True)
class BrickKind:
    width_knobs: int
    length_knobs: int

    def __post_init__(self):
        if self.width_knobs not in (1, 2) or self.length_knobs not in (2, 4):
            raise ValueError(f"unsupported brick {self.width_knobs}x{self.length_knobs}")
        if self.width_knobs > self.length_knobs:
            raise ValueError("width must not exceed length")

    @classmethod
    def parse(cls, text: str) -> "BrickKind":
        w, l = text.lower().split("x")
        return cls(int(w), int(l))

    @property
    def name(self) -> str:
        return f"{self.width_knobs}x{self.length_knobs}"

    @property
    def n_knobs(self) -> int:
        return self.width_knobs * self.length_knobs

    def __str__(self):
        return self.name


ALL_KINDS = (BrickKind(1, 2), BrickKind(1, 4), BrickKind(2, 2), BrickKind(2, 4))


@dataclass(frozen=True)
class BrickDims:
    knob_pitch: float = 8.0
    brick_height: float = 9.6
    knob_height: float = 1.7
    top_lever: float = 7.8
    side_lever: float = 3.2

    def __post_init__(self):
        for name in ("knob_pitch", "brick_height", "knob_height", "top_lever", "side_lever"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def half_length(self, kind: BrickKind) -> float:
        return kind.length_knobs * self.knob_pitch / 2.0


@dataclass(frozen=True)
class TightnessModel:
    """Per-knob release thresholds in N*mm of peel moment."""

    tau_min: float = 8.0
    tau_max: float = 20.0
    position_offset: float = 2.0
    hollow_exponent: float = 0.5
    stochastic: bool = True

    def __post_init__(self):
        if not 0 < self.tau_min < self.tau_max:
            raise ValueError("need 0 < tau_min < tau_max")

    def offset_for_position(self, position_index: int | None) -> float:
        if not self.stochastic or position_index is None or self.position_offset == 0:
            return 0.0
        rng = np.random.default_rng(derive_seed(0, "position-offset", position_index))
        return float(rng.uniform(-self.position_offset, self.position_offset))

    def sample(self, n: int, seed: int, offset: float) -> tuple[float, ...]:
        if not self.stochastic:
            mid = 0.5 * (self.tau_min + self.tau_max)
            return (mid,) * n
        rng = np.random.default_rng(seed)
        vals = rng.uniform(self.tau_min, self.tau_max, size=n) + offset
        return tuple(float(v) for v in np.maximum(vals, 1e-3))


@dataclass(frozen=True)
class PlateGrid:
    rows: int = 48
    cols: int = 48
    origin: Pose = field(default_factory=Pose.identity)

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("plate needs at least one row and column")
        if not np.allclose(self.origin.rotation, np.eye(3), atol=1e-9):
            raise ValueError("flat plates need an identity origin rotation")


@dataclass(frozen=True)
class StructureStyle:
    support: str = "solid"
    height_layers: int = 1

    def __post_init__(self):
        if self.support not in ("solid", "hollow"):
            raise ValueError(f"unknown support style {self.support!r}")
        if not 1 <= self.height_layers <= 10:
            raise ValueError("height_layers must be in 1..10")
        if self.support == "hollow" and self.height_layers < 2:
            raise ValueError("hollow support needs at least 2 layers")


@dataclass(frozen=True)
class Placement:
    """Where a brick goes: used for assembly targets and layout rows."""

    kind: BrickKind
    cell: tuple[int, int]
    layer: int = 1
    orientation: int = 0
    plate: str = "main"

    def __post_init__(self):
        if self.orientation not in (0, 90):
            raise ValueError("orientation must be 0 or 90")
        if self.layer < 1:
            raise ValueError("layer starts at 1")
        object.__setattr__(self, "cell", (int(self.cell[0]), int(self.cell[1])))

    def footprint(self) -> frozenset[tuple[int, int]]:
        r0, c0 = self.cell
        L, W = self.kind.length_knobs, self.kind.width_knobs
        if self.orientation == 0:
            return frozenset((r0 + j, c0 + i) for i in range(L) for j in range(W))
        return frozenset((r0 + i, c0 + j) for i in range(L) for j in range(W))


@dataclass(frozen=True)
class BrickInstance:
    id: int
    kind: BrickKind
    cell: tuple[int, int]
    layer: int
    orientation: int
    plate: str = "main"

    @property
    def placement(self) -> Placement:
        return Placement(self.kind, self.cell, self.layer, self.orientation, self.plate)

    def footprint(self) -> frozenset[tuple[int, int]]:
        return self.placement.footprint()


@dataclass(frozen=True)
class ConnectionState:
    """The press fit under one brick.

    ``lower`` holds the ids of supporting bricks, or ``(PLATE,)``.
    ``engaged`` lists the plate cells whose knobs are engaged; thresholds
    line up with it one-to-one.
    """

    upper: int
    lower: tuple
    engaged: tuple[tuple[int, int], ...]
    per_knob_tightness: tuple[float, ...]
    footprint_knobs: int
    hollow_exponent: float = 0.5

    def __post_init__(self):
        if len(self.engaged) != len(self.per_knob_tightness):
            raise ValueError("one tightness entry per engaged knob")
        if any(t <= 0 for t in self.per_knob_tightness):
            raise ValueError("tightness thresholds must be positive")

    @property
    def interface_id(self) -> tuple:
        return (self.upper, self.lower[0] if len(self.lower) == 1 else self.lower)

    @property
    def on_plate(self) -> bool:
        return self.lower == (PLATE,)

    def strength(self) -> float:
        """Peel moment at which the whole interface lets go.

        Mean per-knob threshold, derated when only part of the footprint is
        engaged (hollow support).
        """
        if not self.per_knob_tightness:
            return 0.0
        frac = len(self.engaged) / self.footprint_knobs
        return float(np.mean(self.per_knob_tightness)) * frac**self.hollow_exponent


class LegoWorld:
    """Mutable brick state for one episode. Copy it per attempt."""

    def __init__(
        self,
        plates: dict[str, PlateGrid] | None = None,
        dims: BrickDims | None = None,
        tightness: TightnessModel | None = None,
        seed: int = 0,
        position_index: int | None = None,
    ):
        self.plates = dict(plates) if plates else {"main": PlateGrid()}
        self.dims = dims or BrickDims()
        self.tightness = tightness or TightnessModel()
        self.seed = int(seed)
        self.tightness_offset = self.tightness.offset_for_position(position_index)
        self.bricks: dict[int, BrickInstance] = {}
        self.connections: dict[int, ConnectionState] = {}
        self.hollow_cells: dict[str, set] = {}
        self._next_id = 1
        self._assemblies = 0

    def copy(self) -> "LegoWorld":
        return copy.deepcopy(self)

    # -- queries -----------------------------------------------------------
    def brick(self, brick_id: int) -> BrickInstance:
        try:
            return self.bricks[brick_id]
        except KeyError:
            raise UnknownBrick(f"no brick with id {brick_id}") from None

    def bricks_at_layer(self, plate: str, layer: int) -> list[BrickInstance]:
        return [b for b in self.bricks.values() if b.plate == plate and b.layer == layer]

    def find(self, placement: Placement) -> BrickInstance | None:
        for b in self.bricks.values():
            if b.placement == placement:
                return b
        return None

    def bricks_above(self, brick_id: int) -> list[BrickInstance]:
        b = self.brick(brick_id)
        fp = b.footprint()
        return [o for o in self.bricks_at_layer(b.plate, b.layer + 1) if o.footprint() & fp]

    def is_exposed(self, brick_id: int) -> bool:
        return not self.bricks_above(brick_id)

    def supports_for(self, placement: Placement) -> tuple[list[BrickInstance], frozenset]:
        """Bricks under ``placement`` and the cells whose knobs it would grip."""
        fp = placement.footprint()
        if placement.layer == 1:
            return [], fp
        below = [b for b in self.bricks_at_layer(placement.plate, placement.layer - 1) if b.footprint() & fp]
        cells = frozenset().union(*(b.footprint() & fp for b in below)) if below else frozenset()
        return below, cells

    def check_placement(self, placement: Placement) -> None:
        if placement.plate not in self.plates:
            raise PlacementError(f"unknown plate {placement.plate!r}")
        grid = self.plates[placement.plate]
        fp = placement.footprint()
        for r, c in fp:
            if not (0 <= r < grid.rows and 0 <= c < grid.cols):
                raise PlacementError(f"footprint of {placement} leaves the plate")
        for b in self.bricks_at_layer(placement.plate, placement.layer):
            if b.footprint() & fp:
                raise PlacementError(f"{placement} overlaps brick {b.id}")
        for b in self.bricks_at_layer(placement.plate, placement.layer + 1):
            if b.footprint() & fp:
                raise PlacementError(f"{placement} is covered by brick {b.id}")
        if placement.layer > 1 and not self.supports_for(placement)[0]:
            raise PlacementError(f"{placement} has nothing underneath")

    # -- mutation ----------------------------------------------------------
    def add_brick(self, placement: Placement, hollow: bool = False) -> int:
        """Press a brick onto the structure; samples fresh tightness."""
        self.check_placement(placement)
        below, cells = self.supports_for(placement)
        bid = self._next_id
        self._next_id += 1
        self.bricks[bid] = BrickInstance(bid, placement.kind, placement.cell, placement.layer, placement.orientation, placement.plate)
        engaged = sorted(cells)
        if hollow:
            engaged = sorted(_perimeter(placement, cells))
        seed = derive_seed(self.seed, "tightness", self._assemblies)
        self._assemblies += 1
        taus = self.tightness.sample(len(engaged), seed, self.tightness_offset)
        lower = tuple(sorted(b.id for b in below)) if below else (PLATE,)
        self.connections[bid] = ConnectionState(
            bid, lower, tuple(engaged), taus, placement.kind.n_knobs, self.tightness.hollow_exponent
        )
        return bid

    def remove_brick(self, brick_id: int) -> BrickInstance:
        b = self.brick(brick_id)
        if not self.is_exposed(brick_id):
            raise PlacementError(f"brick {brick_id} is buried")
        del self.bricks[brick_id]
        del self.connections[brick_id]
        return b

    # -- geometry ----------------------------------------------------------
    def brick_pose(self, placement: Placement | BrickInstance) -> Pose:
        """Pose of the brick's base center: x along length, z up."""
        if isinstance(placement, BrickInstance):
            placement = placement.placement
        p = self.dims.knob_pitch
        L, W = placement.kind.length_knobs, placement.kind.width_knobs
        r0, c0 = placement.cell
        if placement.orientation == 0:
            cx, cy, R = (c0 + L / 2) * p, (r0 + W / 2) * p, np.eye(3)
        else:
            cx, cy, R = (c0 + W / 2) * p, (r0 + L / 2) * p, rot_z(math.pi / 2)
        cz = (placement.layer - 1) * self.dims.brick_height
        local = Pose(R, [cx, cy, cz])
        return self.plates[placement.plate].origin @ local

    def snapshot(self) -> tuple:
        """Brick set without ids or tightness, for round-trip comparisons."""
        return tuple(sorted((b.plate, b.kind.name, b.cell, b.layer, b.orientation) for b in self.bricks.values()))

    def interface_topology(self) -> tuple:
        keyed = {b.id: (b.plate, b.kind.name, b.cell, b.layer, b.orientation) for b in self.bricks.values()}
        out = []
        for c in self.connections.values():
            low = tuple(PLATE if x == PLATE else keyed[x] for x in c.lower)
            out.append((keyed[c.upper], low, c.engaged))
        return tuple(sorted(out, key=repr))

    def to_dict(self) -> dict:
        return {
            "bricks": [
                {"id": b.id, "kind": b.kind.name, "plate": b.plate, "cell": list(b.cell), "layer": b.layer, "orientation": b.orientation}
                for b in sorted(self.bricks.values(), key=lambda b: b.id)
            ],
            "interfaces": [
                {
                    "upper": c.upper,
                    "lower": list(c.lower),
                    "engaged": [list(x) for x in c.engaged],
                    "tightness": [float(f"{t:.9g}") for t in c.per_knob_tightness],
                }
                for c in sorted(self.connections.values(), key=lambda c: c.upper)
            ],
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _perimeter(placement: Placement, cells) -> set:
    """Knobs in the two end rows of the footprint along its length."""
    r0, c0 = placement.cell
    L = placement.kind.length_knobs
    ends = {0, L - 1}
    out = set()
    for r, c in cells:
        i = (c - c0) if placement.orientation == 0 else (r - r0)
        if i in ends:
            out.add((r, c))
    return out


def build_structure(
    plate: PlateGrid,
    kind: BrickKind,
    style: StructureStyle,
    cell: tuple[int, int],
    seed: int,
    *,
    dims: BrickDims | None = None,
    tightness: TightnessModel | None = None,
    orientation: int = 0,
    position_index: int | None = None,
) -> LegoWorld:
    """Stack ``style.height_layers`` identical bricks at ``cell``.

    With hollow support every interface under the top brick grips only the
    end knob rows.
    """
    world = LegoWorld({"main": plate}, dims, tightness, seed, position_index)
    top = style.height_layers
    for layer in range(1, top + 1):
        hollow = style.support == "hollow" and layer < top
        world.add_brick(Placement(kind, cell, layer, orientation), hollow=hollow)
    return world


def knob_world_pose(world: LegoWorld, brick_id: int, knob_index: int) -> Pose:
    b = world.brick(brick_id)
    n = b.kind.n_knobs
    if not 0 <= knob_index < n:
        raise UnknownBrick(f"brick {brick_id} has no knob {knob_index}")
    L, W = b.kind.length_knobs, b.kind.width_knobs
    p = world.dims.knob_pitch
    ix, iy = knob_index % L, knob_index // L
    local = Pose(np.eye(3), [(ix + 0.5) * p - L * p / 2, (iy + 0.5) * p - W * p / 2, world.dims.brick_height])
    return world.brick_pose(b) @ local


def interface_below(world: LegoWorld, brick_id: int) -> ConnectionState:
    world.brick(brick_id)
    return world.connections[brick_id]


def evaluation_positions(plate: PlateGrid, n_side: int = 5, margin: int = 4) -> list[tuple[int, int]]:
    """n_side x n_side grid of cells over the plate interior."""
    rows = np.linspace(margin, plate.rows - margin - 4, n_side).round().astype(int)
    cols = np.linspace(margin, plate.cols - margin - 4, n_side).round().astype(int)
    return [(int(r), int(c)) for r in rows for c in cols]


def load_world_config(path: str | Path) -> tuple[BrickDims, TightnessModel]:
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    return BrickDims(**doc.get("brick", {})), TightnessModel(**doc.get("tightness", {}))


def plates_from_dict(doc: dict) -> dict[str, PlateGrid]:
    out = {}
    for name, spec in doc.items():
        origin = Pose(np.eye(3), spec.get("origin_mm", [0.0, 0.0, 0.0]))
        out[name] = PlateGrid(int(spec.get("rows", 48)), int(spec.get("cols", 48)), origin)
    if "main" not in out:
        raise ValueError("scene needs a 'main' plate")
    return out


def load_plates(path: str | Path | None = None) -> dict[str, PlateGrid]:
    path = Path(path) if path else Path(__file__).parent / "data" / "scene.yaml"
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    return plates_from_dict(doc.get("plates", {}))
