"""Run configuration: file paths, bounds, weights and the master seed."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .learn import DATA, Bounds, CostWeights, ParamVector, Simulator
from .lego_world import BrickKind


class ConfigError(Exception):
    pass


def _path(base: Path, value, default: Path) -> Path:
    if value is None:
        return default
    p = Path(value)
    if not p.is_absolute():
        p = base / p
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return p


@dataclass(frozen=True)
class RunConfig:
    seed: int
    arm: Path = DATA / "arm.yaml"
    eoat: Path = DATA / "eoat.yaml"
    surrogate: Path = DATA / "surrogate.yaml"
    limits: Path = DATA / "limits.yaml"
    scene: Path = DATA / "scene.yaml"
    bounds: Bounds = field(default_factory=Bounds)
    weights: dict = field(default_factory=dict)  # controller -> CostWeights overrides
    learn: dict = field(default_factory=dict)
    evaluate: dict = field(default_factory=dict)
    output_dir: Path = Path("out")

    def simulator(self) -> Simulator:
        try:
            return Simulator.from_files(self.arm, self.eoat, self.surrogate, self.limits, self.scene)
        except (OSError, ValueError, TypeError, KeyError, yaml.YAMLError) as exc:
            raise ConfigError(f"could not load simulator files: {exc}") from exc

    def cost_weights(self, controller: str) -> CostWeights:
        base = CostWeights.for_controller(controller)
        over = self.weights.get(controller, {})
        try:
            return CostWeights(**{**base.__dict__, **over})
        except TypeError as exc:
            raise ConfigError(f"bad weights for {controller}: {exc}") from exc


def load_run_config(path: str | Path | None, seed: int | None = None, out: str | Path | None = None) -> RunConfig:
    """Reads a YAML run config. Relative paths resolve against the file's folder.

    ``seed`` and ``out`` override the file. A seed is required from one of them.
    """
    doc: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as fh:
                doc = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: expected a mapping at top level")
        base = path.parent
    if seed is None:
        seed = doc.get("seed")
    if seed is None:
        raise ConfigError("a seed is required (config 'seed' or --seed)")
    try:
        seed = int(seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"seed must be an integer, got {seed!r}") from exc
    files = doc.get("files", {}) or {}
    try:
        b = doc.get("bounds", {}) or {}
        bounds = Bounds(**{k: tuple(v) for k, v in b.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad bounds: {exc}") from exc
    return RunConfig(
        seed=seed,
        arm=_path(base, files.get("arm"), DATA / "arm.yaml"),
        eoat=_path(base, files.get("eoat"), DATA / "eoat.yaml"),
        surrogate=_path(base, files.get("surrogate"), DATA / "surrogate.yaml"),
        limits=_path(base, files.get("limits"), DATA / "limits.yaml"),
        scene=_path(base, files.get("scene"), DATA / "scene.yaml"),
        bounds=bounds,
        weights=doc.get("weights", {}) or {},
        learn=doc.get("learn", {}) or {},
        evaluate=doc.get("evaluate", {}) or {},
        output_dir=Path(out) if out is not None else Path(doc.get("output_dir", "out")),
    )


def params_to_yaml(params: dict, meta: dict | None = None) -> str:
    """Params file: one mapping per mode with the four named values."""
    doc = dict(meta or {})
    for mode, p in params.items():
        doc[mode] = {k: float(f"{v:.9g}") for k, v in p.to_dict().items()}
    return yaml.safe_dump(doc, sort_keys=False)


def load_params(path: str | Path) -> dict:
    """{mode: ParamVector} from a params file (see params_to_yaml)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"params file not found: {path}")
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    out = {}
    for mode in ("assemble", "disassemble"):
        if mode in doc:
            try:
                out[mode] = ParamVector(**{k: float(v) for k, v in doc[mode].items()})
            except (TypeError, ValueError, AttributeError) as exc:
                raise ConfigError(f"{path}: bad {mode} params: {exc}") from exc
    if not out:
        raise ConfigError(f"{path}: no assemble or disassemble params")
    return out


def parse_kind(text: str) -> BrickKind:
    try:
        return BrickKind.parse(text)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
