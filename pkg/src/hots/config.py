"""YAML run configuration: defaults, validation with line diagnostics, and builders."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml

from .cells import theta_grid
from .geometry import CellGeometry, ThreeScaleGeometry
from .macro import BoundaryData
from .materials import TABLE1, VARTHETA_MODES, MaterialModel, configure, material_from_mapping
from .mesh import SIDES, Region, TriMesh, build_rect_mesh
from .reconstruction import VARIANTS

STAGES = ("offline", "online", "reconstruct", "reference", "compare")

DEFAULTS: dict[str, Any] = {
    "materials": "table1",
    "coupling": {"mode": "reference", "gamma": 0.0},
    "reference_temperature": 373.15,
    "micro_cells": {
        "micro": {"matrix": "material1", "inclusions": [{"tag": "material2", "shape": "square", "center": [0.5, 0.5], "size": 0.5}]},
    },
    "meso_cell": {"matrix": "micro", "inclusions": [{"tag": "material3", "shape": "square", "center": [0.5, 0.5], "size": 0.5}]},
    "scales": {"meso": "1/3", "micro": "1/9"},
    "theta_grid": {"min": 373.15, "max": 373.15, "margin": 200.0, "samples": 11},
    "offline": {"micro_resolution": 8, "meso_resolution": 12},
    "macro": {
        "domain": [0.0, 1.0, 0.0, 1.0],
        "mesh": 24,
        "dt": 0.01,
        "t_end": 0.2,
        "heat_source": 10000.0,
        "body_force": [-8000.0, -8000.0],
        "initial_temperature": 373.15,
        "boundary": {
            "temperature": {s: 373.15 for s in SIDES},
            "displacement": {s: [0.0, 0.0] for s in SIDES},
            "heat_flux": {},
            "traction": {},
        },
        "store_every": 1,
    },
    "solver": {"tol_theta": 1e-6, "tol_u": 1e-6, "max_iter": 50, "omega": 1.0},
    "reference": {"cells_per_micro": 8, "max_dofs": 300000},
    "reconstruction": {"variants": list(VARIANTS), "line": {"start": [0.0, 0.5], "end": [1.0, 0.5], "n_points": 401}},
    "output": "hots_out",
    "cache": None,
    "stages": list(STAGES),
}


class ConfigError(ValueError):
    """Every problem found in a config, one per line."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid configuration:\n  " + "\n  ".join(problems))


def _merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, Mapping) and isinstance(out.get(key), dict) and key not in ("micro_cells",):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _line_index(text: str) -> dict[str, int]:
    """Dotted key path -> 1-based line of each mapping key in the YAML source."""
    lines: dict[str, int] = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                path = f"{prefix}.{k.value}" if prefix else str(k.value)
                lines[path] = k.start_mark.line + 1
                walk(v, path)

    root = yaml.compose(text)
    if root is not None:
        walk(root, "")
    return lines


def parse_fraction(value, name: str) -> Fraction:
    try:
        if isinstance(value, str):
            f = Fraction(value.strip())
        else:
            f = Fraction(value).limit_denominator(10**6)
    except (ValueError, TypeError, ZeroDivisionError):
        raise ValueError(f"{name}: cannot read {value!r} as a number") from None
    return f


def check_scale_ratios(meso: Fraction, micro: Fraction) -> list[str]:
    problems = []
    if meso <= 0 or micro <= 0:
        return ["scales: periods must be positive"]
    if (1 / meso).denominator != 1:
        problems.append(f"scales.meso: 1/meso = {1 / meso} is not an integer")
    ratio = meso / micro
    if ratio.denominator != 1 or ratio <= 1:
        problems.append(f"scales: meso/micro = {ratio} is not an integer greater than one")
    return problems


@dataclass
class RunConfig:
    data: dict
    source: Path | None = None

    # --- resolved values ---
    @property
    def meso_period(self) -> float:
        return float(parse_fraction(self.data["scales"]["meso"], "scales.meso"))

    @property
    def micro_period(self) -> float:
        return float(parse_fraction(self.data["scales"]["micro"], "scales.micro"))

    @property
    def output(self) -> Path:
        return Path(self.data["output"])

    def materials(self) -> dict[str, MaterialModel]:
        lib = _material_library(self.data["materials"])
        cp = self.data["coupling"]
        return configure(lib, cp["mode"], float(self.data["reference_temperature"]), float(cp.get("gamma", 0.0)))

    def geometry(self) -> ThreeScaleGeometry:
        micro = {name: _cell(spec) for name, spec in self.data["micro_cells"].items()}
        return ThreeScaleGeometry(_cell(self.data["meso_cell"]), micro, self.meso_period, self.micro_period)

    def thetas(self) -> np.ndarray:
        g = self.data["theta_grid"]
        return theta_grid(float(g["min"]), float(g["max"]), float(g["margin"]), int(g["samples"]))

    def macro_mesh(self) -> TriMesh:
        m = self.data["macro"]
        n = m["mesh"]
        nx, ny = (n, n) if isinstance(n, int) else n
        return build_rect_mesh(tuple(float(v) for v in m["domain"]), int(nx), int(ny))

    def boundary(self) -> BoundaryData:
        b = self.data["macro"]["boundary"]
        return BoundaryData(
            {k: float(v) for k, v in b.get("temperature", {}).items()},
            {k: tuple(float(x) for x in v) for k, v in b.get("displacement", {}).items()},
            {k: float(v) for k, v in b.get("heat_flux", {}).items()},
            {k: tuple(float(x) for x in v) for k, v in b.get("traction", {}).items()},
        )

    # --- hashing ---
    def offline_key(self) -> str:
        """Hash of everything the offline tables depend on."""
        d = self.data
        payload = {k: d[k] for k in ("materials", "coupling", "reference_temperature", "micro_cells", "meso_cell", "theta_grid", "offline")}
        return _digest(payload)

    def hash(self) -> str:
        return _digest(self.data)

    def echo(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _material_library(spec) -> dict[str, MaterialModel]:
    if isinstance(spec, str):
        if spec.lower() != "table1":
            raise ValueError(f"materials: unknown built-in library {spec!r}")
        return dict(TABLE1)
    return {name: material_from_mapping(name, entry) for name, entry in spec.items()}


def _cell(spec: Mapping) -> CellGeometry:
    regions = tuple(
        Region(r["tag"], r["shape"], tuple(float(c) for c in r["center"]), tuple(float(s) for s in r["size"]) if isinstance(r["size"], list) else float(r["size"]))
        for r in spec.get("inclusions", [])
    )
    return CellGeometry(str(spec["matrix"]), regions)


def validate(data: dict, lines: Mapping[str, int] | None = None) -> list[str]:
    """All invariant violations, each prefixed by its dotted path and source line when known."""
    lines = lines or {}
    problems: list[str] = []

    def report(path: str, msg: str):
        line = lines.get(path) or lines.get(path.split(".")[0])
        problems.append(f"{path}{f' (line {line})' if line else ''}: {msg}")

    unknown = set(data) - set(DEFAULTS)
    for key in sorted(unknown):
        report(key, "unknown section")

    try:
        lib = _material_library(data["materials"])
    except (KeyError, ValueError, TypeError) as exc:
        report("materials", str(exc).strip("'\""))
        lib = {}
    mode = data["coupling"].get("mode")
    if mode not in VARTHETA_MODES:
        report("coupling.mode", f"must be one of {VARTHETA_MODES}, got {mode!r}")

    try:
        meso = parse_fraction(data["scales"]["meso"], "scales.meso")
        micro = parse_fraction(data["scales"]["micro"], "scales.micro")
        for msg in check_scale_ratios(meso, micro):
            report("scales", msg.split(": ", 1)[1])
    except ValueError as exc:
        report("scales", str(exc))

    micro_names = set(data["micro_cells"])
    cell_specs = [(f"micro_cells.{n}", s, set()) for n, s in data["micro_cells"].items()]
    cell_specs.append(("meso_cell", data["meso_cell"], micro_names))
    for path, spec, allowed_cells in cell_specs:
        try:
            cell = _cell(spec)
        except (KeyError, TypeError, ValueError) as exc:
            report(path, f"malformed cell: {exc}")
            continue
        for phase in sorted(cell.phases()):
            if phase not in lib and phase not in allowed_cells:
                report(path, f"references undefined material {phase!r}")

    g = data["theta_grid"]
    if not float(g["max"]) >= float(g["min"]):
        report("theta_grid", "max must not be below min")
    if int(g["samples"]) < 2:
        report("theta_grid.samples", "need at least two samples")
    if float(g["margin"]) < 0:
        report("theta_grid.margin", "must be non-negative")

    m = data["macro"]
    if not float(m["dt"]) > 0:
        report("macro.dt", "must be positive")
    if float(m["t_end"]) < 0:
        report("macro.t_end", "must be non-negative")
    for kind in ("temperature", "displacement", "heat_flux", "traction"):
        for tag in m["boundary"].get(kind, {}) or {}:
            if tag not in SIDES:
                report(f"macro.boundary.{kind}", f"unknown side {tag!r}; expected one of {SIDES}")
    s = data["solver"]
    for key in ("tol_theta", "tol_u"):
        if not float(s[key]) > 0:
            report(f"solver.{key}", "must be positive")
    if int(s["max_iter"]) < 1:
        report("solver.max_iter", "must be at least one")

    for v in data["reconstruction"]["variants"]:
        if v not in VARIANTS:
            report("reconstruction.variants", f"unknown variant {v!r}")
    for st in data["stages"]:
        if st not in STAGES:
            report("stages", f"unknown stage {st!r}")
    return problems


def load_config(source: Mapping | None = None, path: Path | None = None, lines: Mapping[str, int] | None = None) -> RunConfig:
    """Merge ``source`` over the defaults and validate."""
    source = dict(source or {})
    try:
        data = _merge(DEFAULTS, source)
    except AttributeError as exc:
        raise ConfigError([f"malformed section: {exc}"]) from None
    try:
        problems = validate(data, lines)
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        problems = [f"schema violation: {exc!r}"]
    if problems:
        raise ConfigError(problems)
    return RunConfig(data, path)


def parse_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} does not exist")
    text = path.read_text()
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError([f"YAML syntax: {exc}"]) from None
    if not isinstance(raw, dict):
        raise ConfigError(["top level must be a mapping of sections"])
    return load_config(raw, path, _line_index(text))
