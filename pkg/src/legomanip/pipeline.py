"""Success-rate sweeps and build/teardown planning between two plates."""
from __future__ import annotations

import io
import itertools
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .eoat import TwistSpec
from .learn import INITIAL_PARAMS, ParamVector, Scenario, Simulator, run_attempt, scenario_world
from .lego_world import (
    ALL_KINDS,
    BrickKind,
    LegoWorld,
    Placement,
    PlacementError,
    PlateGrid,
    evaluation_positions,
)
from .seeding import derive_seed
from .trajectory import CONTROLLERS

LAYOUT_DIR = Path(__file__).parent / "data" / "layouts"


class PipelineError(Exception):
    pass


class UnsatisfiableOrder(PipelineError):
    pass


class LayoutFormatError(PipelineError):
    pass


class SimulatorInvariantError(PipelineError):
    pass


def _param_for(params: dict, mode: str, controller: str) -> ParamVector:
    if (mode, controller) in params:
        return params[(mode, controller)]
    return params[mode]


# --------------------------------------------------------------------------
# success sweep


@dataclass(frozen=True)
class EvaluationConfig:
    kinds: tuple = ALL_KINDS
    heights: tuple = (1, 10)
    supports: tuple = ("solid", "hollow")
    controllers: tuple = CONTROLLERS
    modes: tuple = ("assemble", "disassemble")
    positions: tuple = ()  # (index, cell) pairs; empty means the 5x5 grid
    trials_per_position: int = 10
    params: dict = field(default_factory=lambda: dict(INITIAL_PARAMS))
    rng_seed: int = 0

    def __post_init__(self):
        if self.trials_per_position < 1:
            raise ValueError("need at least one trial per position")

    def resolved_positions(self, plate: PlateGrid) -> tuple:
        if self.positions:
            out = tuple(self.positions)
        else:
            out = tuple(enumerate(evaluation_positions(plate)))
        for _, (r, c) in out:
            if not (0 <= r < plate.rows and 0 <= c < plate.cols):
                raise ValueError(f"position {(r, c)} is off the plate")
        return out

    def rows(self) -> list[tuple]:
        """(kind, height, support, controller, mode) for every valid combination.

        Hollow support needs a tower, so it only pairs with heights above 1.
        """
        out = []
        for kind, h, sup, ctrl, mode in itertools.product(self.kinds, self.heights, self.supports, self.controllers, self.modes):
            if sup == "hollow" and h < 2:
                continue
            out.append((kind, h, sup, ctrl, mode))
        return out


@dataclass
class SuccessTable:
    rows: dict = field(default_factory=dict)  # key -> (successes, trials)

    def rate(self, key) -> float:
        s, n = self.rows[key]
        return s / n

    def rates(self) -> dict:
        return {k: self.rate(k) for k in self.rows}

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("brick,height,support,controller,mode,successes,trials,rate\n")
        for (kind, h, sup, ctrl, mode), (s, n) in self.rows.items():
            buf.write(f"{kind.name},{h},{sup},{ctrl},{mode},{s},{n},{s / n:.9g}\n")
        return buf.getvalue()


def _run_row(args):
    sim, cfg, key, positions = args
    kind, h, sup, ctrl, mode = key
    sc = Scenario(mode, kind, h, sup, ctrl)
    params = _param_for(cfg.params, mode, ctrl)
    plan_cache, seq_cache = {}, {}
    succ = n = 0
    for idx, cell in positions:
        for t in range(cfg.trials_per_position):
            wseed = derive_seed(cfg.rng_seed, "sweep-world", kind.name, h, sup, mode, idx, t)
            nseed = derive_seed(cfg.rng_seed, "sweep-noise", kind.name, h, sup, mode, idx, t)
            world, target = scenario_world(sim, sc, cell, wseed, idx)
            out, _, new_world = run_attempt(sim, sc, params, world, target, nseed, plan_cache, seq_cache)
            if out.success and mode == "disassemble":
                _check_one_piece(world, new_world, out)
            succ += int(out.success)
            n += 1
    return key, (succ, n)


def _check_one_piece(before: LegoWorld, after: LegoWorld, outcome) -> None:
    gone = set(before.bricks) - set(after.bricks)
    if len(outcome.bricks_moved) != 1 or gone != set(outcome.bricks_moved):
        raise SimulatorInvariantError(f"disassembly moved {outcome.bricks_moved}, removed {sorted(gone)}")
    for bid in after.bricks:
        if after.bricks[bid] != before.bricks[bid]:
            raise SimulatorInvariantError(f"brick {bid} moved during disassembly")


def run_success_sweep(cfg: EvaluationConfig, sim: Simulator, workers: int = 1) -> SuccessTable:
    """Success counts for every scenario row; each trial uses a fresh seeded world."""
    positions = cfg.resolved_positions(sim.plates["main"])
    jobs = [(sim, cfg, key, positions) for key in cfg.rows()]
    if workers and workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_row, jobs))
    else:
        results = [_run_row(j) for j in jobs]
    return SuccessTable(dict(results))


# --------------------------------------------------------------------------
# layouts and build/teardown plans


@dataclass(frozen=True)
class LayoutBrick:
    placement: Placement  # on the working plate
    storage_cell: tuple[int, int]

    @property
    def storage(self) -> Placement:
        return Placement(self.placement.kind, self.storage_cell, 1, 0, "storage")


@dataclass(frozen=True)
class LayoutDesign:
    name: str
    bricks: tuple[LayoutBrick, ...]
    main_size: tuple[int, int] = (48, 48)
    storage_size: tuple[int, int] = (24, 48)

    def validate(self) -> None:
        """Checks storage overlap and that a bottom-up order exists."""
        world = self.empty_world()
        for b in self.bricks:
            try:
                world.add_brick(b.storage)
            except PlacementError as exc:
                raise LayoutFormatError(f"storage slot for {b.placement}: {exc}") from exc
        for b in _bottom_up(self.bricks):
            try:
                world.check_placement(b.placement)
            except PlacementError as exc:
                raise UnsatisfiableOrder(str(exc)) from exc
            world.add_brick(b.placement)

    def empty_world(self, sim: Simulator | None = None, seed: int = 0) -> LegoWorld:
        plates = dict(sim.plates) if sim else {}
        main = plates.get("main", PlateGrid())
        store = plates.get("storage", PlateGrid())
        plates["main"] = PlateGrid(self.main_size[0], self.main_size[1], main.origin)
        plates["storage"] = PlateGrid(self.storage_size[0], self.storage_size[1], store.origin)
        if sim:
            return LegoWorld(plates, sim.dims, sim.tightness, seed)
        return LegoWorld(plates, seed=seed)

    def initial_world(self, sim: Simulator | None = None, seed: int = 0) -> LegoWorld:
        """All bricks loose on the storage plate, working plate empty."""
        world = self.empty_world(sim, seed)
        for b in self.bricks:
            world.add_brick(b.storage)
        return world


def _bottom_up(bricks) -> list[LayoutBrick]:
    return sorted(bricks, key=lambda b: (b.placement.layer, b.placement.cell, b.placement.kind.name))


_HEADER = re.compile(r"^\s*(name|working_plate|storage_plate)\s*:\s*(.+?)\s*$")


def parse_layout(text: str) -> LayoutDesign:
    """Layout text: ``key: value`` header lines, then one row per brick.

    Rows are ``layer row col kind orientation storage_row storage_col``;
    ``#`` starts a comment.
    """
    name, main, store = None, (48, 48), (24, 48)
    bricks = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = _HEADER.match(line)
        if m:
            key, val = m.groups()
            if key == "name":
                name = val
            else:
                try:
                    r, c = (int(v) for v in val.split())
                except ValueError as exc:
                    raise LayoutFormatError(f"line {lineno}: plate size needs two integers") from exc
                if key == "working_plate":
                    main = (r, c)
                else:
                    store = (r, c)
            continue
        parts = line.split()
        if len(parts) != 7:
            raise LayoutFormatError(f"line {lineno}: expected 7 fields, got {len(parts)}")
        try:
            layer, row, col = int(parts[0]), int(parts[1]), int(parts[2])
            kind = BrickKind.parse(parts[3])
            orient = int(parts[4])
            srow, scol = int(parts[5]), int(parts[6])
            pl = Placement(kind, (row, col), layer, orient, "main")
        except ValueError as exc:
            raise LayoutFormatError(f"line {lineno}: {exc}") from exc
        bricks.append(LayoutBrick(pl, (srow, scol)))
    if name is None:
        raise LayoutFormatError("layout has no name")
    if not bricks:
        raise LayoutFormatError("layout has no bricks")
    return LayoutDesign(name, tuple(bricks), main, store)


def load_layout(path: str | Path) -> LayoutDesign:
    with open(path) as fh:
        return parse_layout(fh.read())


def shipped_layouts() -> dict[str, LayoutDesign]:
    return {p.stem: load_layout(p) for p in sorted(LAYOUT_DIR.glob("*.txt"))}


@dataclass(frozen=True)
class Action:
    mode: str
    placement: Placement
    spec: TwistSpec
    horizon_T: float

    def to_row(self) -> str:
        p = self.placement
        vals = (self.mode, p.plate, p.kind.name, p.cell[0], p.cell[1], p.layer, p.orientation)
        nums = (self.horizon_T, self.spec.theta, self.spec.d_x, self.spec.d_z)
        return ",".join(map(str, vals)) + "," + ",".join(f"{v:.9g}" for v in nums)


ACTION_HEADER = "mode,plate,kind,row,col,layer,orientation,T,theta,d_x,d_z"


def _action(mode: str, placement: Placement, params: dict, controller: str) -> Action:
    p = _param_for(params, mode, controller)
    return Action(mode, placement, p.spec(mode), p.T)


def plan_build(design: LayoutDesign, params: dict | None = None, controller: str = "joint_jpc") -> list[Action]:
    """Pick each brick from storage and place it, bottom layer first."""
    params = params or dict(INITIAL_PARAMS)
    design.validate()
    out = []
    for b in _bottom_up(design.bricks):
        out.append(_action("disassemble", b.storage, params, controller))
        out.append(_action("assemble", b.placement, params, controller))
    return out


def plan_teardown(design: LayoutDesign, params: dict | None = None, controller: str = "joint_jpc") -> list[Action]:
    """Take the structure apart top layer first and return bricks to their storage slots."""
    params = params or dict(INITIAL_PARAMS)
    design.validate()
    out = []
    for b in reversed(_bottom_up(design.bricks)):
        out.append(_action("disassemble", b.placement, params, controller))
        out.append(_action("assemble", b.storage, params, controller))
    return out


@dataclass
class ActionResult:
    action: Action
    success: bool
    failure_mode: str
    peak_force: float


def execute_actions(sim: Simulator, world: LegoWorld, actions, controller: str = "joint_jpc", seed: int = 0,
                    max_retries: int = 0):
    """Replays an action list in the simulator. Returns (final world, [ActionResult]).

    A failed step is retried up to ``max_retries`` times with fresh noise and
    then aborts the replay with SimulatorInvariantError.
    """
    results = []
    for i, act in enumerate(actions):
        params = ParamVector(act.horizon_T, act.spec.theta, act.spec.d_x, act.spec.d_z)
        sc = Scenario(act.mode, act.placement.kind, act.placement.layer, "solid", controller)
        for attempt in range(max_retries + 1):
            if act.mode == "disassemble":
                found = world.find(act.placement)
                if found is None:
                    raise SimulatorInvariantError(f"step {i}: nothing to pick at {act.placement}")
                target = found.id
            else:
                target = act.placement
            nseed = derive_seed(seed, "action", i, attempt)
            out, _, new_world = run_attempt(sim, sc, params, world, target, nseed)
            results.append(ActionResult(act, out.success, out.failure_mode, out.peak_force))
            if out.success:
                if act.mode == "disassemble":
                    _check_one_piece(world, new_world, out)
                world = new_world
                break
        else:
            raise SimulatorInvariantError(f"step {i} ({act.mode} {act.placement}) failed: {out.failure_mode}")
    return world, results


@dataclass
class RoundTrip:
    design: str
    build: list
    teardown: list
    mismatches: int
    initial: tuple
    final: tuple

    @property
    def ok(self) -> bool:
        return self.mismatches == 0

    def verdict(self) -> str:
        return "round-trip OK" if self.ok else f"round-trip FAILED ({self.mismatches} mismatches)"


def snapshot_mismatches(a: tuple, b: tuple) -> int:
    return len(set(a) ^ set(b))


def prototype_round_trip(sim: Simulator, design: LayoutDesign, params: dict | None = None,
                         controller: str = "joint_jpc", seed: int = 0) -> RoundTrip:
    """Build the design from storage, tear it down again and compare snapshots."""
    world = design.initial_world(sim, derive_seed(seed, "prototype", design.name))
    start = world.snapshot()
    build = plan_build(design, params, controller)
    teardown = plan_teardown(design, params, controller)
    world, br = execute_actions(sim, world, build, controller, derive_seed(seed, "build"))
    built = {(p.kind.name, p.cell, p.layer, p.orientation) for p in (b.placement for b in design.bricks)}
    on_main = {(b.kind.name, b.cell, b.layer, b.orientation) for b in world.bricks.values() if b.plate == "main"}
    if built != on_main:
        raise SimulatorInvariantError("built structure does not match the design")
    world, tr = execute_actions(sim, world, teardown, controller, derive_seed(seed, "teardown"))
    end = world.snapshot()
    return RoundTrip(design.name, br, tr, snapshot_mismatches(start, end), start, end)


def actions_csv(results) -> str:
    buf = io.StringIO()
    buf.write(ACTION_HEADER + ",success,failure_mode,peak_force\n")
    for r in results:
        buf.write(f"{r.action.to_row()},{int(r.success)},{r.failure_mode},{r.peak_force:.9g}\n")
    return buf.getvalue()


def deterministic(sim: Simulator) -> Simulator:
    """Same simulator with tightness noise and position offsets switched off."""
    return sim.with_tightness(replace(sim.tightness, stochastic=False))
