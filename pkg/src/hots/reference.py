"""Resolved-mesh reference solve, relative error norms and comparison reports."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .fem import h1_seminorm, l2_norm
from .geometry import ThreeScaleGeometry, retag
from .macro import MacroProblem, MacroRun, material_provider, run
from .materials import MaterialModel
from .mesh import TriMesh, build_rect_mesh

log = logging.getLogger(__name__)

REPORT_HEADER = ("t", "variant", "field", "norm", "value")


class ResolutionError(ValueError):
    pass


def resolved_mesh(
    geometry: ThreeScaleGeometry,
    domain=(0.0, 1.0, 0.0, 1.0),
    cells_per_micro: int = 8,
    max_dofs: int = 300_000,
) -> TriMesh:
    """Crossed mesh of the macro domain with every micro inclusion resolved, tagged by constituent."""
    x0, x1, y0, y1 = domain
    nx = round((x1 - x0) / geometry.micro_period * cells_per_micro)
    ny = round((y1 - y0) / geometry.micro_period * cells_per_micro)
    n_nodes = (nx + 1) * (ny + 1) + nx * ny
    if 3 * n_nodes > max_dofs:
        raise ResolutionError(
            f"resolved mesh needs {3 * n_nodes} dofs (cap {max_dofs}); use coarser scale periods or raise the cap"
        )
    mesh = build_rect_mesh(domain, nx, ny)
    return retag(mesh, geometry.material_at(mesh.centroids))


def reference_problem(template: MacroProblem, mesh: TriMesh, materials: Mapping[str, MaterialModel]) -> MacroProblem:
    """Same data as ``template`` on the resolved mesh with constituent coefficients."""
    init = template.initial_temperature
    if isinstance(init, np.ndarray):
        raise ValueError("nodal initial temperature cannot be transferred; use a constant")
    return replace(template, mesh=mesh, coefficients=material_provider(mesh, materials), initial_displacement=None, initial_velocity=None)


def solve_reference(template: MacroProblem, mesh: TriMesh, materials: Mapping[str, MaterialModel]) -> MacroRun:
    return run(reference_problem(template, mesh, materials))


def relative_error(mesh: TriMesh, reference: np.ndarray, approx: np.ndarray, norm: str) -> float:
    """Relative error in ``l2`` or ``h1`` (seminorm); absolute when the reference norm vanishes."""
    fn = {"l2": l2_norm, "h1": h1_seminorm}[norm]
    num = fn(mesh, np.asarray(approx) - np.asarray(reference))
    den = fn(mesh, reference)
    if den == 0.0:
        log.warning("reference %s norm is zero; reporting the absolute error", norm)
        return num
    return num / den


@dataclass
class ErrorReport:
    rows: list[tuple[float, str, str, str, float]] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, t: float, variant: str, field_name: str, norm: str, value: float) -> None:
        if not value >= 0.0:
            raise ValueError(f"error value must be non-negative, got {value}")
        self.rows.append((float(t), variant, field_name, norm, float(value)))

    def value(self, variant: str, field_name: str, norm: str, t: float | None = None) -> float:
        rows = [r for r in self.rows if r[1] == variant and r[2] == field_name and r[3] == norm]
        if t is None:
            t = max(r[0] for r in rows)
        for r in rows:
            if abs(r[0] - t) <= 1e-12 * max(1.0, abs(t)):
                return r[4]
        raise KeyError((variant, field_name, norm, t))

    def times(self) -> list[float]:
        return sorted({r[0] for r in self.rows})


def compute_errors(
    mesh: TriMesh,
    times: Sequence[float],
    reference: Mapping[float, tuple[np.ndarray, np.ndarray]],
    families: Mapping[float, Mapping[str, tuple[np.ndarray, np.ndarray]]],
) -> ErrorReport:
    """Relative temperature (``T``) and displacement (``D``) errors per time and variant.

    ``reference[t]`` and ``families[t][variant]`` hold nodal ``(theta, u)`` on ``mesh``.
    """
    rep = ErrorReport()
    for t in times:
        ref_theta, ref_u = reference[t]
        for variant, (theta, u) in families[t].items():
            for norm in ("l2", "h1"):
                rep.add(t, variant, "T", norm, relative_error(mesh, ref_theta, theta, norm))
                rep.add(t, variant, "D", norm, relative_error(mesh, ref_u, u, norm))
    return rep


ORDER = ("hots", "lots", "sots", "homogenized")


def ordering_holds(rep: ErrorReport, field_name: str, norm: str, strict: bool, slack: float = 0.05, t: float | None = None) -> bool:
    """``hots < lots < sots < homogenized`` (strict) or ``<=`` up to a relative ``slack``."""
    vals = [rep.value(v, field_name, norm, t) for v in ORDER]
    for lo, hi in zip(vals, vals[1:]):
        if strict and not lo < hi:
            return False
        if not strict and not lo <= hi * (1.0 + slack):
            return False
    return True


def ordering_summary(rep: ErrorReport) -> dict[str, bool]:
    if not rep.rows:
        return {}
    return {
        "T_h1": ordering_holds(rep, "T", "h1", strict=True),
        "T_l2": ordering_holds(rep, "T", "l2", strict=False),
        "D_h1": ordering_holds(rep, "D", "h1", strict=True),
        "D_l2": ordering_holds(rep, "D", "l2", strict=False),
    }


def emit_report(rep: ErrorReport, out_dir: str | Path, manifests: Mapping | None = None) -> str:
    """Write ``errors.csv`` and ``summary.txt``; return the summary text."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "errors.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for t, variant, fld, norm, val in rep.rows:
            w.writerow([repr(t), variant, fld, norm, repr(val)])
    lines = []
    if rep.rows:
        t_final = rep.times()[-1]
        lines.append(f"final time {t_final:g}")
        for fld in ("T", "D"):
            for norm in ("l2", "h1"):
                vals = ", ".join(f"{v}={rep.value(v, fld, norm, t_final):.4e}" for v in reversed(ORDER))
                lines.append(f"{fld} {norm}: {vals}")
        for key, ok in ordering_summary(rep).items():
            lines.append(f"ordering {key}: {'held' if ok else 'violated'}")
    else:
        lines.append("no time levels")
    for key, val in {**rep.metadata, **(manifests or {})}.items():
        lines.append(f"{key}: {val}")
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    return text
