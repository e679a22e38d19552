"""Safe manipulation learning: CMA-ES over (T, theta, d_x, d_z) inside box bounds.

The optimizer works in normalized coordinates where every parameter is
scaled to [0, 1] by its bound width, so one step size covers seconds,
degrees and millimetres alike. Out-of-bound samples are clipped.
"""
from __future__ import annotations

import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from . import cmaes
from .eoat import EoatConfig, PlanError, TwistSpec, load_eoat, plan_manipulation
from .kinematics import DEFAULT_IK, ArmModel, IKSettings, default_arm, load_arm
from .lego_world import (
    BrickDims,
    BrickKind,
    LegoWorld,
    PlateGrid,
    StructureStyle,
    TightnessModel,
    build_structure,
    evaluation_positions,
    load_plates,
    load_world_config,
)
from .seeding import derive_seed
from .surrogate_sim import AttemptOutcome, ForceModel, execute_attempt, load_force_model
from .trajectory import (
    CONTROLLERS,
    DEFAULT_DT,
    ControlLimits,
    TrajectoryError,
    control_effort,
    generate,
    joint_min_steps,
    load_limits,
)

DATA = Path(__file__).parent / "data"
PARAM_NAMES = ("T", "theta", "d_x", "d_z")


class LearnError(Exception):
    pass


@dataclass(frozen=True)
class ParamVector:
    T: float  # s
    theta: float  # deg
    d_x: float  # mm
    d_z: float  # mm

    def as_array(self) -> np.ndarray:
        return np.array([self.T, self.theta, self.d_x, self.d_z], dtype=float)

    @classmethod
    def from_array(cls, a) -> "ParamVector":
        a = np.asarray(a, dtype=float)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def spec(self, mode: str) -> TwistSpec:
        return TwistSpec(mode, self.d_x, self.d_z, self.theta)

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in PARAM_NAMES}


INITIAL_PARAMS = {
    "assemble": ParamVector(2.0, 15.0, 7.8, 0.0),
    "disassemble": ParamVector(2.0, 15.0, 0.0, 3.2),
}


@dataclass(frozen=True)
class Bounds:
    T: tuple[float, float] = (0.2, 8.0)
    theta: tuple[float, float] = (1.0, 25.0)
    d_x: tuple[float, float] = (0.0, 10.0)
    d_z: tuple[float, float] = (0.0, 10.0)

    def __post_init__(self):
        for k in PARAM_NAMES:
            lo, hi = getattr(self, k)
            if not lo < hi:
                raise ValueError(f"bound for {k} needs min < max")

    @property
    def lower(self) -> np.ndarray:
        return np.array([getattr(self, k)[0] for k in PARAM_NAMES])

    @property
    def upper(self) -> np.ndarray:
        return np.array([getattr(self, k)[1] for k in PARAM_NAMES])

    def contains(self, p: ParamVector, tol: float = 0.0) -> bool:
        a = p.as_array()
        return bool(np.all(a >= self.lower - tol) and np.all(a <= self.upper + tol))

    def clip(self, p: ParamVector) -> ParamVector:
        return ParamVector.from_array(np.clip(p.as_array(), self.lower, self.upper))

    def normalize(self, p: ParamVector) -> np.ndarray:
        return (p.as_array() - self.lower) / (self.upper - self.lower)

    def denormalize(self, u) -> ParamVector:
        u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
        return ParamVector.from_array(self.lower + u * (self.upper - self.lower))


@dataclass(frozen=True)
class CostWeights:
    alpha: float = 100.0
    beta: float = 10.0
    gamma: float = 100.0
    eta: float = 1.0
    infinity_value: float = 1e8

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.eta) < 0:
            raise ValueError("weights must be non-negative")
        if not self.infinity_value > 0:
            raise ValueError("infinity_value must be positive")

    @classmethod
    def for_controller(cls, controller: str) -> "CostWeights":
        return cls(eta=100.0) if controller == "cartesian_jpc" else cls()


def cost(outcome: AttemptOutcome, params: ParamVector, effort: float, weights: CostWeights) -> float:
    if not outcome.success:
        return weights.infinity_value
    w = weights
    return w.alpha * params.T + w.beta * params.theta + w.gamma * outcome.peak_force + w.eta * effort


# --------------------------------------------------------------------------
# simulator bundle


@dataclass(frozen=True, eq=False)
class Simulator:
    """Everything needed to turn parameters into an attempt outcome."""

    arm: ArmModel
    eoat: EoatConfig
    model: ForceModel
    limits: ControlLimits
    plates: dict
    dims: BrickDims = field(default_factory=BrickDims)
    tightness: TightnessModel = field(default_factory=TightnessModel)
    dt: float = DEFAULT_DT
    ik: IKSettings = DEFAULT_IK

    @classmethod
    def from_files(cls, arm=None, eoat=None, surrogate=None, limits=None, scene=None, dt: float = DEFAULT_DT) -> "Simulator":
        eo = load_eoat(eoat or DATA / "eoat.yaml")
        base = load_arm(arm) if arm else default_arm()
        dims, tight = load_world_config(surrogate or DATA / "surrogate.yaml")
        model = load_force_model(surrogate or DATA / "surrogate.yaml")
        with open(limits or DATA / "limits.yaml") as fh:
            lim = load_limits(yaml.safe_load(fh) or {})
        return cls(base.with_tool(eo.tool_pose()), eo, model, lim, load_plates(scene), dims, tight, dt)

    @classmethod
    def default(cls) -> "Simulator":
        return cls.from_files()

    def with_tightness(self, tightness: TightnessModel) -> "Simulator":
        return replace(self, tightness=tightness)


@dataclass(frozen=True)
class Scenario:
    """One structure on the working plate: a tower of ``height`` bricks whose top is the target."""

    mode: str
    kind: BrickKind
    height: int = 1
    support: str = "solid"
    controller: str = "joint_jpc"

    def __post_init__(self):
        if self.controller not in CONTROLLERS:
            raise ValueError(f"unknown controller {self.controller!r}")


def scenario_world(sim: Simulator, sc: Scenario, cell, world_seed: int, position_index: int | None):
    """(world before the attempt, target) for a scenario at ``cell``.

    For disassembly the target is the top brick id; for assembly the top
    brick is taken off again and its Placement is the target.
    """
    world = build_structure(
        sim.plates["main"], sc.kind, StructureStyle(sc.support, sc.height), tuple(cell), world_seed,
        dims=sim.dims, tightness=sim.tightness, position_index=position_index,
    )
    world.plates = dict(sim.plates)
    top = world.bricks_at_layer("main", sc.height)[0]
    if sc.mode == "disassemble":
        return world, top.id
    world.remove_brick(top.id)
    return world, top.placement


def failed(duration: float = 0.0) -> AttemptOutcome:
    return AttemptOutcome(False, "infeasible_trajectory", 0.0, duration)


def run_attempt(sim: Simulator, sc: Scenario, params: ParamVector, world: LegoWorld, target, noise_seed: int,
                plan_cache: dict | None = None, seq_cache: dict | None = None):
    """Plan, generate controls and execute once. Returns (outcome, effort, updated world).

    Planning and trajectory errors become ``infeasible_trajectory`` outcomes.
    """
    spec = params.spec(sc.mode)
    where = world.brick(target).placement if isinstance(target, int) else target
    key = (where, spec)
    try:
        plan = plan_cache.get(key) if plan_cache is not None else None
        if plan is None:
            plan = plan_manipulation(world, target, spec, sim.eoat, None, sim.arm, None, sim.ik)
            if plan_cache is not None:
                plan_cache[key] = plan
        skey = key + (sc.controller, params.T)
        seq = seq_cache.get(skey) if seq_cache is not None else None
        if seq is None:
            seq = generate(sc.controller, sim.arm, plan, params.T, sim.limits, sim.dt, sim.ik)
            if seq_cache is not None:
                seq_cache[skey] = seq
    except (PlanError, TrajectoryError, ValueError):
        return failed(params.T), 0.0, world
    outcome, new_world = execute_attempt(world, plan, seq, spec, sim.model, noise_seed)
    return outcome, control_effort(seq), new_world


# Twice the CMA-ES formula default (8 for four parameters). With 8 seeds the
# 50-epoch runs stalled in the theta/d_x trade-off valley on most seeds.
LEARN_POPULATION = 16


@dataclass(frozen=True)
class TaskConfig:
    mode: str = "disassemble"
    kind: BrickKind = field(default_factory=lambda: BrickKind(1, 2))
    controller: str = "joint_jpc"
    positions: tuple = ()
    epochs: int = 50
    population: int | None = LEARN_POPULATION
    sigma0: float = 0.005
    layers: int = 1
    support: str = "solid"

    def scenario(self) -> Scenario:
        return Scenario(self.mode, self.kind, self.layers, self.support, self.controller)


def training_positions(sim: Simulator, n: int = 8, seed: int = 0) -> tuple:
    """n distinct cells drawn from the 25-position evaluation grid."""
    grid = evaluation_positions(sim.plates["main"])
    rng = np.random.default_rng(derive_seed(seed, "training-positions"))
    idx = sorted(rng.choice(len(grid), size=n, replace=False).tolist())
    return tuple((i, grid[i]) for i in idx)


class CostFunction:
    """Mean cost over training positions; deterministic given the master seed.

    Each training position gets a fixed world seed and noise seed, so the
    objective is a plain function of the parameters (the grid oracle and the
    learner evaluate the same thing).
    """

    def __init__(self, sim: Simulator, task: TaskConfig, weights: CostWeights, seed: int, cache_plans: bool = False):
        self.sim, self.task, self.weights, self.seed = sim, task, weights, seed
        self.scenario = task.scenario()
        self.positions = task.positions or training_positions(sim, 8, seed)
        self.plan_cache = {} if cache_plans else None
        self.worlds = []
        for idx, cell in self.positions:
            wseed = derive_seed(seed, "train-world", idx)
            self.worlds.append(scenario_world(sim, self.scenario, cell, wseed, idx) + (derive_seed(seed, "train-noise", idx),))
        self.attempts = 0

    def evaluate(self, params: ParamVector) -> tuple[float, list]:
        costs, outcomes = [], []
        for world, target, nseed in self.worlds:
            out, eff, _ = run_attempt(self.sim, self.scenario, params, world, target, nseed, self.plan_cache)
            self.attempts += 1
            costs.append(cost(out, params, eff, self.weights))
            outcomes.append(out)
        return float(np.mean(costs)), outcomes

    def __call__(self, params: ParamVector) -> float:
        return self.evaluate(params)[0]

    def joint_paths(self, params: ParamVector) -> list | None:
        """IK solutions of every training plan for this geometry (None if any fails)."""
        spec = params.spec(self.task.mode)
        out = []
        for world, target, _ in self.worlds:
            where = world.brick(target).placement if isinstance(target, int) else target
            key = (where, spec)
            plan = self.plan_cache.get(key) if self.plan_cache is not None else None
            if plan is None:
                try:
                    plan = plan_manipulation(world, target, spec, self.sim.eoat, None, self.sim.arm, None, self.sim.ik)
                except (PlanError, ValueError):
                    return None
                if self.plan_cache is not None:
                    self.plan_cache[key] = plan
            out.append(plan.joint_path)
        return out


# --------------------------------------------------------------------------
# optimizer over ParamVector


def cmaes_init(mean0: ParamVector, sigma0: float, bounds: Bounds, lam: int | None = None) -> cmaes.OptimizerState:
    if not bounds.contains(mean0):
        raise LearnError(f"initial mean {mean0} outside bounds")
    return cmaes.cma_init(bounds.normalize(mean0), sigma0, lam, np.zeros(4), np.ones(4))


def ask(state: cmaes.OptimizerState, bounds: Bounds, rng: np.random.Generator) -> list[ParamVector]:
    return [bounds.denormalize(u) for u in cmaes.cma_ask(state, rng)]


def tell(state: cmaes.OptimizerState, bounds: Bounds, seeds: list[ParamVector], costs) -> cmaes.OptimizerState:
    return cmaes.cma_tell(state, np.array([bounds.normalize(s) for s in seeds]), costs)


def state_mean(state: cmaes.OptimizerState, bounds: Bounds) -> ParamVector:
    return bounds.denormalize(state.mean)


@dataclass(frozen=True)
class EpochRecord:
    generation: int
    mean: ParamVector
    mean_cost: float
    seeds: tuple[ParamVector, ...]
    costs: tuple[float, ...]
    best_cost: float
    best_params: ParamVector
    sigma: float = 0.0

    @property
    def population_best(self) -> float:
        return min(self.costs) if self.costs else math.inf

    @property
    def population_mean(self) -> float:
        return float(np.mean(self.costs)) if self.costs else math.inf


def _eval_job(args):
    fn, params = args
    return fn(params)


def run_learning(
    task: TaskConfig,
    sim: Simulator,
    weights: CostWeights | None = None,
    rng_seed: int = 0,
    bounds: Bounds | None = None,
    mean0: ParamVector | None = None,
    workers: int = 1,
    callback=None,
):
    """Algorithm loop. Returns (final mean ParamVector, [EpochRecord]).

    Record g holds the mean that generated epoch g's seeds and that mean's
    own cost; record 0's mean is the initial point. A final record with no
    seeds carries the mean after the last update.
    """
    weights = weights or CostWeights.for_controller(task.controller)
    bounds = bounds or Bounds()
    mean0 = mean0 or INITIAL_PARAMS[task.mode]
    fn = CostFunction(sim, task, weights, rng_seed)
    state = cmaes_init(mean0, task.sigma0, bounds, task.population)
    rng = np.random.default_rng(derive_seed(rng_seed, "cmaes", task.mode, task.controller))
    pool = ProcessPoolExecutor(workers) if workers and workers > 1 else None
    records: list[EpochRecord] = []
    best_cost, best_params = math.inf, mean0
    try:
        for gen in range(task.epochs):
            # the first record carries the initial point exactly, not its normalized round trip
            mean = mean0 if gen == 0 else state_mean(state, bounds)
            seeds = ask(state, bounds, rng)
            batch = [mean] + seeds
            if pool is not None:
                costs = list(pool.map(_eval_job, [(fn, p) for p in batch]))
                fn.attempts += len(batch) * len(fn.worlds)
            else:
                costs = [fn(p) for p in batch]
            mean_cost, seed_costs = costs[0], costs[1:]
            for p, c in zip(batch, costs):
                if c < best_cost:
                    best_cost, best_params = c, p
            records.append(EpochRecord(gen, mean, mean_cost, tuple(seeds), tuple(seed_costs), best_cost, best_params, state.sigma))
            if callback:
                callback(records[-1])
            state = tell(state, bounds, seeds, seed_costs)
            if np.any(np.linalg.eigvalsh(state.covariance) <= 0):
                raise LearnError("covariance lost positive definiteness")
        final = state_mean(state, bounds)
        fc = fn(final)
        if fc < best_cost:
            best_cost, best_params = fc, final
        records.append(EpochRecord(task.epochs, final, fc, (), (), best_cost, best_params, state.sigma))
    finally:
        if pool is not None:
            pool.shutdown()
    return final, records


# --------------------------------------------------------------------------
# history export

HISTORY_COLUMNS = ("generation", "row_type", "index", "T", "theta", "d_x", "d_z", "cost", "best_so_far")


def _fmt(x) -> str:
    return f"{x:.9g}" if isinstance(x, float) else str(x)


def history_csv(records: list[EpochRecord]) -> str:
    """Long-format history: one 'mean' row per record, one 'seed' row per proposal.

    The last record (after the final update) is tagged 'final'.
    """
    buf = io.StringIO()
    buf.write(",".join(HISTORY_COLUMNS) + "\n")
    for i, r in enumerate(records):
        kind = "final" if (i == len(records) - 1 and not r.seeds) else "mean"
        rows = [(kind, 0, r.mean, r.mean_cost)] + [("seed", j, s, c) for j, s, c in zip(range(len(r.seeds)), r.seeds, r.costs)]
        for rt, idx, p, c in rows:
            vals = [r.generation, rt, idx, p.T, p.theta, p.d_x, p.d_z, float(c), float(r.best_cost)]
            buf.write(",".join(_fmt(v) for v in vals) + "\n")
    return buf.getvalue()


def read_history(text: str) -> list[dict]:
    import csv

    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        raise LearnError("empty history")
    missing = set(HISTORY_COLUMNS) - set(rows[0])
    if missing:
        raise LearnError(f"history is missing columns {sorted(missing)}")
    out = []
    for r in rows:
        d = {"generation": int(r["generation"]), "row_type": r["row_type"], "index": int(r["index"])}
        for k in ("T", "theta", "d_x", "d_z", "cost", "best_so_far"):
            d[k] = float(r[k])
        out.append(d)
    return out


def initial_mean_from_history(text: str) -> ParamVector:
    for r in read_history(text):
        if r["generation"] == 0 and r["row_type"] == "mean":
            return ParamVector(r["T"], r["theta"], r["d_x"], r["d_z"])
    raise LearnError("history has no generation-0 mean")


# --------------------------------------------------------------------------
# exhaustive grid oracle


@dataclass(frozen=True)
class GridResult:
    params: ParamVector
    cost: float
    evaluated: int
    screened: int


def grid_axis(lo: float, hi: float, step: float) -> np.ndarray:
    n = int(math.floor((hi - lo) / step + 1e-9))
    return np.round(lo + step * np.arange(n + 1), 10)


def effort_bound_constant(joint_path: np.ndarray) -> float:
    """K with control_effort >= K / T**3 for any rest-to-rest joint trajectory through ``joint_path``.

    On a rest-to-rest segment of duration t moving joint j by D, the jerk's L1
    integral is the total variation of acceleration, at least 2 (A+ + A-) for
    peak accelerations A+ and A-. Reaching D needs A+ A- / (A+ + A-) >= 2 D / t**2,
    so the integral is at least 16 D / t**2 (bang-bang acceleration attains it).
    Summing over joints (c_s) and choosing the segment durations that minimize
    sum c_s / t_s**2 under sum t_s = T gives (sum c_s**(1/3))**3 / T**2;
    dividing by T for the per-step mean yields K = 16 (sum c_s**(1/3))**3.
    """
    c = np.abs(np.diff(joint_path, axis=0)).sum(axis=1)
    return 16.0 * float(np.sum(np.cbrt(c))) ** 3


def grid_search(fn: CostFunction, bounds: Bounds | None = None, resolution=(0.1, 1.0, 0.5, 0.5), log=None) -> GridResult:
    """Global minimum of ``fn`` over the bound grid, by best-first branch and bound.

    For a geometry (theta, d_x, d_z) success and contact force do not depend
    on T, so every geometry is screened once without trajectories. Its cost
    at horizon T is then bounded below by
    alpha*T + beta*theta + gamma*F + eta*K/T**3 (see effort_bound_constant;
    joint controller only, K = 0 otherwise). Geometries are opened in order of
    the T-free part of that bound and horizons evaluated in increasing bound
    order; both loops stop once the bound reaches the best cost found.
    """
    bounds = bounds or Bounds()
    w = fn.weights
    Ts = grid_axis(*bounds.T, resolution[0])
    ths = grid_axis(*bounds.theta, resolution[1])
    dxs = grid_axis(*bounds.d_x, resolution[2])
    dzs = grid_axis(*bounds.d_z, resolution[3])
    sc = fn.scenario
    sim = fn.sim
    geo = []
    for th in ths:
        for dx in dxs:
            for dz in dzs:
                spec = TwistSpec(sc.mode, float(dx), float(dz), float(th))
                forces = []
                for world, target, nseed in fn.worlds:
                    try:
                        plan = plan_manipulation(world, target, spec, sim.eoat)
                    except (PlanError, ValueError):
                        forces = None
                        break
                    out, _ = execute_attempt(world, plan, None, spec, sim.model, nseed)
                    if not out.success:
                        forces = None
                        break
                    forces.append(out.peak_force)
                if forces is not None:
                    geo.append((float(th), float(dx), float(dz), w.beta * th + w.gamma * float(np.mean(forces))))
    if log:
        log(f"{len(geo)} feasible geometries of {len(ths) * len(dxs) * len(dzs)}")
    geo.sort(key=lambda g: g[3])
    steps = np.round(Ts / sim.dt).astype(int)
    T_eff = np.maximum(steps, 1) * sim.dt
    best_cost, best = math.inf, None
    evaluated = opened = 0
    for th, dx, dz, g_lb in geo:
        if w.alpha * Ts[0] + g_lb >= best_cost:
            break
        opened += 1
        p0 = ParamVector(float(Ts[-1]), th, dx, dz)
        paths = fn.joint_paths(p0)
        if paths is None:
            continue
        if sc.controller == "joint_jpc":
            K = float(np.mean([effort_bound_constant(q) for q in paths]))
            n_min = max(joint_min_steps(q, sim.limits, sim.dt) for q in paths)
        else:
            K, n_min = 0.0, 0
        lb = w.alpha * Ts + g_lb + w.eta * K / T_eff**3
        for ti in np.argsort(lb, kind="stable"):
            if lb[ti] >= best_cost:
                break
            if steps[ti] < n_min:
                continue
            p = ParamVector(float(Ts[ti]), th, dx, dz)
            c = fn(p)
            evaluated += 1
            if c < best_cost:
                best_cost, best = c, p
                if log:
                    log(f"grid best {best_cost:.6g} at {best}")
    if log:
        log(f"opened {opened} geometries, {evaluated} full evaluations")
    if best is None:
        return GridResult(ParamVector(*bounds.lower), w.infinity_value, evaluated, len(geo))
    return GridResult(best, best_cost, evaluated, len(geo))
