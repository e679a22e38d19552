"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input parse error,
3 simulator invariant breach, 4 unsatisfiable layout.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

from .cmaes import CMAError
from .config import ConfigError, RunConfig, load_params, load_run_config, params_to_yaml, parse_kind
from .learn import (
    INITIAL_PARAMS,
    LEARN_POPULATION,
    LearnError,
    TaskConfig,
    history_csv,
    read_history,
    run_learning,
    training_positions,
)
from .lego_world import ALL_KINDS
from .pipeline import (
    LAYOUT_DIR,
    EvaluationConfig,
    LayoutFormatError,
    SimulatorInvariantError,
    UnsatisfiableOrder,
    actions_csv,
    load_layout,
    prototype_round_trip,
    run_success_sweep,
)
from .trajectory import CONTROLLERS

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INVARIANT = 3
EXIT_LAYOUT = 4

SERIES = ("cost_best", "cost_mean", "T", "theta", "d_x", "d_z")

log = logging.getLogger("legomanip")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def cmd_learn(cfg: RunConfig, mode: str, controller: str, workers: int = 1) -> int:
    sim = cfg.simulator()
    lc = cfg.learn
    kind = parse_kind(lc.get("kind", "1x2"))
    n_pos = int(lc.get("positions", 8))
    task = TaskConfig(
        mode=mode,
        kind=kind,
        controller=controller,
        positions=training_positions(sim, n_pos, cfg.seed),
        epochs=int(lc.get("epochs", 50)),
        population=int(lc.get("population", LEARN_POPULATION)),
        sigma0=float(lc.get("sigma0", 0.005)),
        layers=int(lc.get("layers", 1)),
    )
    lines = []

    def on_epoch(r):
        lines.append(
            f"epoch {r.generation}: mean_cost={r.mean_cost:.9g} pop_best={r.population_best:.9g} "
            f"best={r.best_cost:.9g} sigma={r.sigma:.9g}"
        )
        log.info(lines[-1])

    final, records = run_learning(task, sim, cfg.cost_weights(controller), cfg.seed, cfg.bounds, workers=workers, callback=on_epoch)
    out = cfg.output_dir
    tag = f"{mode}_{controller}"
    _write(out / f"params_{tag}.yaml", params_to_yaml({mode: final}, {"controller": controller, "seed": cfg.seed}))
    _write(out / f"history_{tag}.csv", history_csv(records))
    lines.append(f"final {final.to_dict()} cost={records[-1].mean_cost:.9g}")
    _write(out / f"epochs_{tag}.log", "\n".join(lines) + "\n")
    print(f"learned {mode}/{controller}: " + ", ".join(f"{k}={v:.4g}" for k, v in final.to_dict().items()))
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, params_files: list, workers: int = 1) -> int:
    params = dict(INITIAL_PARAMS)
    for f in params_files:
        params.update(load_params(f))
    ec = cfg.evaluate
    kinds = tuple(parse_kind(k) for k in ec["kinds"]) if "kinds" in ec else ALL_KINDS
    evc = EvaluationConfig(
        kinds=kinds,
        heights=tuple(ec.get("heights", (1, 10))),
        supports=tuple(ec.get("supports", ("solid", "hollow"))),
        controllers=tuple(ec.get("controllers", CONTROLLERS)),
        modes=tuple(ec.get("modes", ("assemble", "disassemble"))),
        trials_per_position=int(ec.get("trials", 10)),
        params=params,
        rng_seed=cfg.seed,
    )
    table = run_success_sweep(evc, cfg.simulator(), workers)
    _write(cfg.output_dir / "success_table.csv", table.to_csv())
    print(table.to_csv(), end="")
    return EXIT_OK


def _resolve_layout(arg: str) -> Path:
    p = Path(arg)
    if p.is_file():
        return p
    shipped = LAYOUT_DIR / f"{arg}.txt"
    if shipped.is_file():
        return shipped
    raise ConfigError(f"layout file not found: {arg}")


def cmd_prototype(cfg: RunConfig, layout: str, params_files: list, controller: str) -> int:
    params = dict(INITIAL_PARAMS)
    for f in params_files:
        params.update(load_params(f))
    design = load_layout(_resolve_layout(layout))
    rt = prototype_round_trip(cfg.simulator(), design, params, controller, cfg.seed)
    out = cfg.output_dir
    _write(out / f"actions_{design.name}.csv", actions_csv(rt.build + rt.teardown))
    _write(out / f"verdict_{design.name}.txt", rt.verdict() + "\n")
    print(f"{design.name}: {len(rt.build) + len(rt.teardown)} actions, {rt.verdict()}")
    return EXIT_OK if rt.ok else EXIT_INVARIANT


def plot_series(history_text: str) -> str:
    """Tidy per-epoch series (series, generation, value) from a history CSV.

    Costs are the population best and mean of each epoch's seeds; the four
    parameters are the search mean that generated them.
    """
    rows = read_history(history_text)
    gens = sorted({r["generation"] for r in rows if r["row_type"] == "seed"})
    if not gens:
        raise ValueError("history has no epochs")
    by_gen = {g: [r for r in rows if r["generation"] == g] for g in gens}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["series", "generation", "value"])
    for name in SERIES:
        for g in gens:
            seeds = [r["cost"] for r in by_gen[g] if r["row_type"] == "seed"]
            mean = next(r for r in by_gen[g] if r["row_type"] == "mean")
            if name == "cost_best":
                v = min(seeds)
            elif name == "cost_mean":
                v = sum(seeds) / len(seeds)
            else:
                v = mean[name]
            w.writerow([name, g, f"{v:.9g}"])
    return buf.getvalue()


def cmd_plot_data(cfg_out: Path | None, history: str) -> int:
    p = Path(history)
    if not p.is_file():
        raise ConfigError(f"history file not found: {p}")
    try:
        text = plot_series(p.read_text())
    except (ValueError, KeyError, LearnError) as exc:
        raise ConfigError(f"malformed history {p}: {exc}") from exc
    if cfg_out is not None:
        _write(cfg_out / f"plot_{p.stem}.csv", text)
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="legomanip", description="Lego insert-and-twist learning and evaluation")
    ap.add_argument("--config", help="YAML run config")
    ap.add_argument("--seed", type=int, help="master seed (overrides the config)")
    ap.add_argument("--out", help="output directory (overrides the config)")
    ap.add_argument("--workers", type=int, default=1, help="max worker processes")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("learn", help="learn twist parameters with CMA-ES")
    p.add_argument("--mode", choices=("assemble", "disassemble"), default="disassemble")
    p.add_argument("--controller", choices=CONTROLLERS, default="joint_jpc")

    p = sub.add_parser("evaluate", help="success-rate sweep")
    p.add_argument("--params", action="append", default=[], help="params file (repeatable)")

    p = sub.add_parser("prototype", help="build and tear down a layout")
    p.add_argument("layout", help="layout file or shipped name (ri, chair, stairs)")
    p.add_argument("--params", action="append", default=[], help="params file (repeatable)")
    p.add_argument("--controller", choices=CONTROLLERS, default="joint_jpc")

    p = sub.add_parser("plot-data", help="per-epoch series from a learning history")
    p.add_argument("history")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "plot-data":
            return cmd_plot_data(Path(args.out) if args.out else None, args.history)
        cfg = load_run_config(args.config, args.seed, args.out)
        if args.command == "learn":
            return cmd_learn(cfg, args.mode, args.controller, args.workers)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.params, args.workers)
        return cmd_prototype(cfg, args.layout, args.params, args.controller)
    except (ConfigError, LayoutFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UnsatisfiableOrder as exc:
        print(f"unsatisfiable layout: {exc}", file=sys.stderr)
        return EXIT_LAYOUT
    except (SimulatorInvariantError, LearnError, CMAError) as exc:
        print(f"simulator invariant breach: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
