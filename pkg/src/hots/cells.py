"""Offline stage: unit-cell corrector problems and temperature-tabulated homogenized coefficients.

Two unit cells are involved. The micro cell carries the constituents. The meso
cell is made of regions that are either a plain constituent or a
micro-composite filled with the micro cell's homogenized ("meso") coefficients.
Correctors are solved on every sample of a temperature grid, temperature
derivatives of tabulated quantities come from finite differences across that
grid, and the macro coefficients are averages over the meso cell.

Field arrays keep the node axis first. Index layout per corrector family:

* ``heat[node, a]`` scalar, one per direction ``a``
* ``thermal[node, i]`` vector
* ``elastic[node, i, m, a]`` vector component ``i`` of the corrector for unit strain ``(m, a)``

Second-order families append their own indices; those driven by macroscopic
gradients of temperature carry a trailing direction index ``n`` that is
contracted with the temperature gradient during reconstruction.
"""

from __future__ import annotations

import csv
import logging
import pickle
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .fem import CellSolver, element_gradients
from .geometry import CellGeometry, ThreeScaleGeometry, retag
from .materials import MaterialModel, RangeWarning
from .mesh import TriMesh, write_field_csv, write_mesh
from .tensors import symmetry_defect

log = logging.getLogger(__name__)

MICRO_SECOND_ORDER = (
    "heat2", "elastic2", "capacity", "capacity_strain", "heat_x", "heat_theta", "coupling",
    "inertia", "elastic_x", "thermal_x", "thermal2", "elastic_theta", "thermal_theta",
)
MESO_SECOND_ORDER = (
    "heat2", "elastic2", "capacity", "heat_x", "coupling", "inertia", "elastic_x", "thermal_x",
    "thermal2", "heat_nonlinear", "thermal_nonlinear", "elastic_nonlinear",
)


class CellProblemError(RuntimeError):
    pass


# ---------------------------------------------------------------- coefficient sets


@dataclass
class Coefficients:
    """Coefficient set of the coupled system; leading axes are free (elements, samples)."""

    capacity: np.ndarray
    density: np.ndarray
    conductivity: np.ndarray
    thermal_modulus: np.ndarray
    coupling: np.ndarray
    stiffness: np.ndarray

    def map(self, fn: Callable, *others: "Coefficients") -> "Coefficients":
        return Coefficients(**{f.name: fn(getattr(self, f.name), *(getattr(o, f.name) for o in others)) for f in dc_fields(self)})

    def take(self, idx) -> "Coefficients":
        return self.map(lambda a: np.asarray(a)[idx])

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in dc_fields(self)}

    @staticmethod
    def stack(items: list["Coefficients"], axis: int = 0) -> "Coefficients":
        names = [f.name for f in dc_fields(Coefficients)]
        return Coefficients(**{n: np.stack([getattr(c, n) for c in items], axis=axis) for n in names})


def material_coefficients(model: MaterialModel, theta) -> Coefficients:
    pc = model.evaluate(theta)
    return Coefficients(pc.rho * pc.c, pc.rho, pc.k, pc.beta, pc.vartheta, pc.C)


def material_dcoefficients(model: MaterialModel, theta) -> Coefficients:
    """Exact temperature derivatives of a constituent's coefficients."""
    pc = model.evaluate(theta)
    d = model.dtheta_coefficients(theta)
    return Coefficients(d.rho * pc.c + pc.rho * d.c, d.rho, d.k, d.beta, d.vartheta, d.C)


def assign_by_tag(tags: np.ndarray, lookup: Mapping[str, Coefficients]) -> Coefficients:
    """Per-element coefficients from per-tag values (tags must all be known)."""
    missing = set(tags.tolist()) - set(lookup)
    if missing:
        raise KeyError(f"no coefficients for region(s) {sorted(missing)}")
    names = sorted(set(tags.tolist()))
    idx = np.array([names.index(t) for t in tags.tolist()])
    return Coefficients.stack([lookup[n] for n in names]).take(idx)


# ---------------------------------------------------------------- corrector problems


def _means(mesh: TriMesh, values: np.ndarray) -> np.ndarray:
    return np.asarray(values)[mesh.triangles].mean(axis=1)


def _solve_grid(solver: CellSolver, shape: tuple[int, ...], rhs: Callable) -> np.ndarray:
    """Solve one problem per multi-index; ``rhs(idx)`` returns ``(vol, flux)``."""
    n = solver.mesh.n_nodes
    out = np.zeros((n,) + ((2,) if solver.vector else ()) + shape)
    for idx in np.ndindex(*shape):
        vol, flux = rhs(*idx)
        out[(slice(None),) * (2 if solver.vector else 1) + idx] = solver.solve(vol, flux)
    return out


@dataclass
class CellSolvers:
    scalar: CellSolver
    vector: CellSolver

    @classmethod
    def build(cls, mesh: TriMesh, coefs: Coefficients, periodic_y: bool = False) -> "CellSolvers":
        return cls(CellSolver(mesh, coefs.conductivity, False, periodic_y), CellSolver(mesh, coefs.stiffness, True, periodic_y))


def first_order_correctors(mesh: TriMesh, c: Coefficients, solvers: CellSolvers) -> dict[str, np.ndarray]:
    """Heat, thermal-stress and elastic correctors with zero trace on the cell boundary."""
    ss, vs = solvers.scalar, solvers.vector
    return {
        "heat": _solve_grid(ss, (2,), lambda a: (None, -c.conductivity[:, :, a])),
        "thermal": vs.solve(None, -c.thermal_modulus),
        "elastic": _solve_grid(vs, (2, 2), lambda m, a: (None, -c.stiffness[:, :, :, m, a])),
    }


def homogenize(mesh: TriMesh, c: Coefficients, f: Mapping[str, np.ndarray]) -> Coefficients:
    """Cell averages of the coefficients corrected by the first-order fields."""
    w = mesh.areas / mesh.areas.sum()
    gR = element_gradients(mesh, f["heat"])  # [e, a, j]
    gO = element_gradients(mesh, f["thermal"])  # [e, k, l]
    gT = element_gradients(mesh, f["elastic"])  # [e, k, m, a, l]
    k, C, v = c.conductivity, c.stiffness, c.coupling
    avg = lambda a: np.einsum("e,e...->...", w, a)
    return Coefficients(
        capacity=avg(c.capacity - np.einsum("eij,eij->e", v, gO)),
        density=avg(c.density),
        conductivity=avg(k + np.einsum("eik,ejk->eij", k, gR)),
        thermal_modulus=avg(c.thermal_modulus + np.einsum("eijkl,ekl->eij", C, gO)),
        coupling=avg(v + np.einsum("eij,eiabj->eab", v, gT)),
        stiffness=avg(C + np.einsum("eijpn,epkln->eijkl", C, gT)),
    )


def second_order_correctors(
    mesh: TriMesh,
    solvers: CellSolvers,
    c: Coefficients,
    dc: Coefficients,
    avg: Coefficients,
    davg: Coefficients,
    f: Mapping[str, np.ndarray],
    df: Mapping[str, np.ndarray],
    scale: str,
) -> dict[str, np.ndarray]:
    """Second-order correctors on a cell.

    ``c``/``dc`` are the local per-element coefficients and their temperature
    derivatives, ``avg``/``davg`` the corresponding cell averages, ``f``/``df``
    the first-order correctors and their temperature derivatives. ``scale``
    selects the extra families: ``"micro"`` adds the pure temperature-derivative
    problems, ``"meso"`` the quadratic temperature-gradient problems.
    """
    ss, vs = solvers.scalar, solvers.vector
    k, C, b, v = c.conductivity, c.stiffness, c.thermal_modulus, c.coupling
    dk, dC, db = dc.conductivity, dc.stiffness, dc.thermal_modulus
    gR, mR = element_gradients(mesh, f["heat"]), _means(mesh, f["heat"])
    gO, mO = element_gradients(mesh, f["thermal"]), _means(mesh, f["thermal"])
    gT, mT = element_gradients(mesh, f["elastic"]), _means(mesh, f["elastic"])
    gdR, mdR = element_gradients(mesh, df["heat"]), _means(mesh, df["heat"])
    gdO, mdO = element_gradients(mesh, df["thermal"]), _means(mesh, df["thermal"])
    gdT, mdT = element_gradients(mesh, df["elastic"]), _means(mesh, df["elastic"])
    eye = np.eye(2)
    out: dict[str, np.ndarray] = {}

    out["heat2"] = _solve_grid(ss, (2, 2), lambda a1, a2: (
        avg.conductivity[a1, a2] - k[:, a1, a2] - np.einsum("ej,ej->e", k[:, a1], gR[:, a2]),
        -k[:, :, a1] * mR[:, a2, None],
    ))
    out["elastic2"] = _solve_grid(vs, (2, 2, 2), lambda m, a1, a2: (
        avg.stiffness[:, a1, m, a2] - C[:, :, a1, m, a2] - np.einsum("eikj,ekj->ei", C[:, :, a1], gT[:, :, m, a2]),
        -np.einsum("eijk,ek->eij", C[..., a1], mT[:, :, m, a2]),
    ))
    out["capacity"] = ss.solve(c.capacity - avg.capacity - np.einsum("eij,eij->e", v, gO), None)
    out["heat_x"] = _solve_grid(ss, (2, 2), lambda a, n: (
        davg.conductivity[n, a] - dk[:, n, a] - np.einsum("ej,ej->e", dk[:, n], gR[:, a]) - np.einsum("ej,ej->e", k[:, n], gdR[:, a]),
        -k[:, :, n] * mdR[:, a, None],
    ))
    out["coupling"] = _solve_grid(ss, (2, 2), lambda a1, a2: (
        avg.coupling[a1, a2] - v[:, a1, a2] - np.einsum("eij,eij->e", v, gT[:, :, a1, a2]),
        None,
    ))
    out["inertia"] = _solve_grid(vs, (2,), lambda a: ((c.density - avg.density)[:, None] * eye[a], None))
    out["elastic_x"] = _solve_grid(vs, (2, 2, 2), lambda m, a, n: (
        davg.stiffness[:, n, m, a] - dC[:, :, n, m, a]
        - np.einsum("eikl,ekl->ei", dC[:, :, n], gT[:, :, m, a])
        - np.einsum("eikl,ekl->ei", C[:, :, n], gdT[:, :, m, a]),
        -np.einsum("eijk,ek->eij", C[..., n], mdT[:, :, m, a]),
    ))
    out["thermal_x"] = _solve_grid(vs, (2,), lambda n: (
        davg.thermal_modulus[:, n] - db[:, :, n]
        - np.einsum("eikl,ekl->ei", dC[:, :, n], gO)
        - np.einsum("eikl,ekl->ei", C[:, :, n], gdO),
        -np.einsum("eijk,ek->eij", C[..., n], mdO),
    ))
    out["thermal2"] = _solve_grid(vs, (2,), lambda a: (
        avg.thermal_modulus[:, a] - b[:, :, a] - np.einsum("eikj,ekj->ei", C[:, :, a], gO),
        -np.einsum("eijk,ek->eij", C[..., a], mO) - b * mR[:, a, None, None],
    ))

    if scale == "micro":
        out["capacity_strain"] = _solve_grid(ss, (2, 2), lambda m, a: (
            avg.coupling[m, a] - v[:, m, a] - np.einsum("eij,eij->e", v, gT[:, :, m, a]),
            None,
        ))
        out["heat_theta"] = _solve_grid(ss, (2,), lambda a: (None, dk[:, :, a]))
        out["elastic_theta"] = _solve_grid(vs, (2, 2), lambda m, n: (None, dC[..., m, n]))
        out["thermal_theta"] = vs.solve(None, db)
    elif scale == "meso":
        out["heat_nonlinear"] = _solve_grid(ss, (2, 2), lambda a1, a2: (
            None,
            mR[:, a1, None] * (dk[:, :, a2] + np.einsum("eij,ej->ei", dk, gR[:, a2]) + k[:, :, a2] + np.einsum("eij,ej->ei", k, gR[:, a2])),
        ))
        out["thermal_nonlinear"] = _solve_grid(vs, (2,), lambda a: (
            None,
            mR[:, a, None, None] * (db + np.einsum("eijkl,ekl->eij", dC, gO) + b + np.einsum("eijkl,ekl->eij", C, gO)),
        ))
        out["elastic_nonlinear"] = _solve_grid(vs, (2, 2, 2), lambda m, a1, a2: (
            None,
            mR[:, a1, None, None] * (
                dC[..., m, a2] + np.einsum("eijkl,ekl->eij", dC, gT[:, :, m, a2])
                + C[..., m, a2] + np.einsum("eijkl,ekl->eij", C, gT[:, :, m, a2])
            ),
        ))
    else:
        raise ValueError(f"unknown scale {scale!r}")
    return out


# ---------------------------------------------------------------- temperature tables


def theta_grid(theta_min: float, theta_max: float, margin: float = 200.0, samples: int = 11) -> np.ndarray:
    if samples < 2:
        raise ValueError("need at least two temperature samples")
    if not theta_max >= theta_min:
        raise ValueError("theta_max must not be below theta_min")
    hi = theta_max + margin
    if hi <= theta_min:
        raise ValueError("empty temperature range")
    return np.linspace(theta_min, hi, samples)


def interpolation_weights(thetas: np.ndarray, theta) -> tuple[np.ndarray, np.ndarray]:
    """Left sample index and weight of the right sample for linear interpolation, clamped."""
    t = np.asarray(theta, dtype=float)
    lo, hi = thetas[0], thetas[-1]
    if np.any((t < lo - 1e-9 * abs(lo)) | (t > hi + 1e-9 * abs(hi))):
        warnings.warn(f"temperature outside table range [{lo}, {hi}], clamped", RangeWarning, stacklevel=3)
        log.warning("temperature outside table range [%s, %s]; clamped", lo, hi)
    t = np.clip(t, lo, hi)
    i = np.clip(np.searchsorted(thetas, t, side="right") - 1, 0, len(thetas) - 2)
    w = (t - thetas[i]) / (thetas[i + 1] - thetas[i])
    return i, w


def interpolate_samples(thetas: np.ndarray, data: np.ndarray, theta) -> np.ndarray:
    """Linear interpolation of ``data`` (leading axis = samples) at scalar or array ``theta``."""
    i, w = interpolation_weights(thetas, theta)
    w = np.asarray(w).reshape(np.shape(w) + (1,) * (data.ndim - 1))
    return (1.0 - w) * data[i] + w * data[i + 1]


def theta_derivative(thetas: np.ndarray, data: np.ndarray) -> np.ndarray:
    """Central differences inside the grid, one-sided at its ends."""
    return np.gradient(data, thetas, axis=0, edge_order=2 if len(thetas) > 2 else 1)


@dataclass
class CellTable:
    """Correctors of one unit cell tabulated over the temperature grid (leading axis)."""

    name: str
    mesh: TriMesh
    thetas: np.ndarray
    fields: dict[str, np.ndarray]
    averaged: Coefficients
    daveraged: Coefficients
    local: Coefficients | None = None
    dlocal: Coefficients | None = None
    dfields: dict[str, np.ndarray] = field(default_factory=dict)

    def field_at(self, key: str, theta: float) -> np.ndarray:
        return interpolate_samples(self.thetas, self.fields[key], theta)

    def averaged_at(self, theta) -> Coefficients:
        return self.averaged.map(lambda a: interpolate_samples(self.thetas, a, theta))

    def daveraged_at(self, theta) -> Coefficients:
        return self.daveraged.map(lambda a: interpolate_samples(self.thetas, a, theta))

    def sample(self, key: str, theta: np.ndarray, elem: np.ndarray, bary: np.ndarray, derivative: bool = False) -> np.ndarray:
        """Field values at located points with per-point temperatures."""
        data = (self.dfields if derivative else self.fields)[key]
        i, w = interpolation_weights(self.thetas, theta)
        nodes = self.mesh.triangles[elem]
        lo = np.einsum("pa,pa...->p...", bary, data[i[:, None], nodes])
        hi = np.einsum("pa,pa...->p...", bary, data[i[:, None] + 1, nodes])
        w = w.reshape(w.shape + (1,) * (lo.ndim - 1))
        return (1.0 - w) * lo + w * hi


def _map_samples(fn: Callable[[int], object], n: int, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(fn, range(n)))
    return [fn(s) for s in range(n)]


def _stack_fields(per_sample: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    return {key: np.stack([d[key] for d in per_sample]) for key in per_sample[0]}


def build_cell_table(
    name: str,
    mesh: TriMesh,
    local_at: Callable[[float], Coefficients],
    thetas: np.ndarray,
    scale: str,
    threads: int = 1,
    periodic_y: bool = False,
) -> CellTable:
    """Solve first- and second-order correctors on every temperature sample.

    Temperature derivatives of local coefficients, averages and fields are all
    differenced across the grid so that they stay mutually consistent.
    """
    thetas = np.asarray(thetas, dtype=float)
    if thetas.ndim != 1 or len(thetas) < 2 or np.any(np.diff(thetas) <= 0):
        raise ValueError("temperature grid must be ascending with at least two samples")
    local = Coefficients.stack([local_at(t) for t in thetas])
    dlocal = local.map(lambda a: theta_derivative(thetas, a))

    def first(s):
        try:
            c = local.take(s)
            solvers = CellSolvers.build(mesh, c, periodic_y)
            f = first_order_correctors(mesh, c, solvers)
            return solvers, f, homogenize(mesh, c, f)
        except Exception as exc:
            raise CellProblemError(f"{name}: first-order problems failed at theta={thetas[s]}: {exc}") from exc

    stage1 = _map_samples(first, len(thetas), threads)
    fields1 = _stack_fields([r[1] for r in stage1])
    averaged = Coefficients.stack([r[2] for r in stage1])
    dfields = {key: theta_derivative(thetas, val) for key, val in fields1.items()}
    daveraged = averaged.map(lambda a: theta_derivative(thetas, a))

    def second(s):
        try:
            return second_order_correctors(
                mesh, stage1[s][0], local.take(s), dlocal.take(s), averaged.take(s), daveraged.take(s),
                {k: v[s] for k, v in fields1.items()}, {k: v[s] for k, v in dfields.items()}, scale,
            )
        except Exception as exc:
            raise CellProblemError(f"{name}: second-order problems failed at theta={thetas[s]}: {exc}") from exc

    fields2 = _stack_fields(_map_samples(second, len(thetas), threads))
    all_fields = {**fields1, **fields2}
    for key in fields2:
        dfields[key] = theta_derivative(thetas, fields2[key])
    return CellTable(name, mesh, thetas, all_fields, averaged, daveraged, local, dlocal, dfields)


# ---------------------------------------------------------------- full offline stage


@dataclass
class OfflineResult:
    thetas: np.ndarray
    micro: dict[str, CellTable]
    meso: CellTable
    geometry: ThreeScaleGeometry

    @property
    def macro(self) -> Coefficients:
        return self.meso.averaged

    def macro_at(self, theta) -> Coefficients:
        return self.meso.averaged_at(theta)

    def dmacro_at(self, theta) -> Coefficients:
        return self.meso.daveraged_at(theta)


def run_offline(
    geometry: ThreeScaleGeometry,
    materials: Mapping[str, MaterialModel],
    thetas: np.ndarray,
    micro_resolution: int = 16,
    meso_resolution: int = 16,
    threads: int = 1,
) -> OfflineResult:
    """Micro tables for every named micro cell, then the meso table whose averages are the macro coefficients."""
    thetas = np.asarray(thetas, dtype=float)
    unknown = geometry.meso.phases() - set(materials) - set(geometry.micro)
    if unknown:
        raise KeyError(f"meso region(s) {sorted(unknown)} are neither materials nor micro cells")
    micro: dict[str, CellTable] = {}
    for name, cell in geometry.micro.items():
        mesh = cell.mesh(micro_resolution)
        missing = set(mesh.tag_names()) - set(materials)
        if missing:
            raise KeyError(f"micro cell {name!r} references unknown material(s) {sorted(missing)}")
        local = lambda t, mesh=mesh: assign_by_tag(mesh.region_tag, {g: material_coefficients(materials[g], t) for g in mesh.tag_names()})
        log.info("micro cell %s: %d nodes, %d samples", name, mesh.n_nodes, len(thetas))
        micro[name] = build_cell_table(name, mesh, local, thetas, "micro", threads)

    ymesh = geometry.meso.mesh(meso_resolution)
    index = {float(t): s for s, t in enumerate(thetas)}

    def local(t):
        lookup = {}
        for phase in ymesh.tag_names():
            if phase in micro:
                lookup[phase] = micro[phase].averaged.take(index[float(t)])
            else:
                lookup[phase] = material_coefficients(materials[phase], t)
        return assign_by_tag(ymesh.region_tag, lookup)

    log.info("meso cell: %d nodes", ymesh.n_nodes)
    meso = build_cell_table("meso", ymesh, local, thetas, "meso", threads)
    return OfflineResult(thetas, micro, meso, geometry)


# ---------------------------------------------------------------- checks


def coefficient_report(coefs: Coefficients) -> dict[str, float]:
    """Symmetry defects and smallest eigenvalues of the tabulated tensors."""
    k, C = coefs.conductivity, coefs.stiffness
    rep = {
        "conductivity_asym": float(np.max(np.abs(k - np.swapaxes(k, -1, -2))) / np.max(np.abs(k))),
        "stiffness_asym": symmetry_defect(C),
        "conductivity_min_eig": float(np.min(np.linalg.eigvalsh(0.5 * (k + np.swapaxes(k, -1, -2))))),
    }
    Cv = C[..., [0, 1, 0], [0, 1, 1], :, :][..., [0, 1, 0], [0, 1, 1]]
    rep["stiffness_min_eig"] = float(np.min(np.linalg.eigvalsh(0.5 * (Cv + np.swapaxes(Cv, -1, -2)))))
    return rep


def resolved_meso_hats(
    geometry: ThreeScaleGeometry,
    materials: Mapping[str, MaterialModel],
    theta: float,
    ratio: float,
    cells_per_micro: int = 8,
    max_nodes: int = 60000,
) -> Coefficients:
    """Macro coefficients from first-order meso problems with the micro pattern resolved."""
    periods = round(1.0 / ratio)
    if abs(periods * ratio - 1.0) > 1e-12:
        raise ValueError("ratio must be the reciprocal of an integer")
    n = periods * cells_per_micro
    if (n + 1) ** 2 + n * n > max_nodes:
        raise ValueError(f"resolved meso mesh with {n}x{n} cells exceeds the node guard {max_nodes}")
    mesh = geometry.meso.mesh(n)
    tags = geometry.resolved_meso_material(mesh.centroids, ratio)
    mesh = retag(mesh, tags)
    c = assign_by_tag(mesh.region_tag, {g: material_coefficients(materials[g], theta) for g in mesh.tag_names()})
    solvers = CellSolvers.build(mesh, c)
    return homogenize(mesh, c, first_order_correctors(mesh, c, solvers))


def verify_coefficient_closeness(
    geometry: ThreeScaleGeometry,
    materials: Mapping[str, MaterialModel],
    theta: float,
    ratios=(1 / 2, 1 / 3, 1 / 4),
    cells_per_micro: int = 8,
    meso_resolution: int = 24,
) -> list[dict[str, float]]:
    """Relative gaps between resolved-path and reiterated macro coefficients per scale ratio."""
    thetas = np.array([theta, theta + 1.0])
    reiter = run_first_order_only(geometry, materials, thetas, cells_per_micro, meso_resolution).take(0)
    rows = []
    for r in ratios:
        direct = resolved_meso_hats(geometry, materials, theta, r, cells_per_micro)
        row = {"ratio": float(r)}
        for key, val in direct.as_dict().items():
            ref = getattr(reiter, key)
            row[key] = float(np.linalg.norm(np.ravel(val - ref)) / max(np.linalg.norm(np.ravel(ref)), 1e-300))
        rows.append(row)
    return rows


def run_first_order_only(
    geometry: ThreeScaleGeometry,
    materials: Mapping[str, MaterialModel],
    thetas: np.ndarray,
    micro_resolution: int,
    meso_resolution: int,
) -> Coefficients:
    """Reiterated macro coefficients per sample without the second-order problems."""
    out = []
    ymesh = geometry.meso.mesh(meso_resolution)
    for t in thetas:
        lookup = {}
        for phase in geometry.meso.phases():
            if phase in geometry.micro:
                zmesh = geometry.micro[phase].mesh(micro_resolution)
                c = assign_by_tag(zmesh.region_tag, {g: material_coefficients(materials[g], t) for g in zmesh.tag_names()})
                lookup[phase] = homogenize(zmesh, c, first_order_correctors(zmesh, c, CellSolvers.build(zmesh, c)))
            else:
                lookup[phase] = material_coefficients(materials[phase], t)
        c = assign_by_tag(ymesh.region_tag, lookup)
        out.append(homogenize(ymesh, c, first_order_correctors(ymesh, c, CellSolvers.build(ymesh, c))))
    return Coefficients.stack(out)


def _component_names(prefix: str, shape: tuple[int, ...]) -> list[str]:
    return [prefix + "".join(f"_{i + 1}" for i in idx) for idx in np.ndindex(*shape)] if shape else [prefix]


def coefficient_columns(thetas: np.ndarray, coefs: Coefficients) -> tuple[list[str], np.ndarray]:
    """Flatten tabulated coefficients into one row per temperature sample."""
    names, cols = ["theta"], [np.asarray(thetas, dtype=float)]
    for key, arr in coefs.as_dict().items():
        arr = np.asarray(arr)
        names += _component_names(key, arr.shape[1:])
        cols.append(arr.reshape(len(thetas), -1))
    return names, np.column_stack(cols)


def write_coefficient_csv(path: str | Path, thetas: np.ndarray, coefs: Coefficients) -> None:
    names, data = coefficient_columns(thetas, coefs)
    np.savetxt(path, data, delimiter=",", header=",".join(names), comments="", fmt="%.17g")


def read_coefficient_csv(path: str | Path) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Columns of a coefficient CSV keyed by header name."""
    data = np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1))
    header = Path(path).read_text().splitlines()[0].split(",")
    return data[:, 0], {h: data[:, j] for j, h in enumerate(header)}


def write_table(table: CellTable, out_dir: str | Path) -> Path:
    """One CSV per (corrector family, temperature sample) plus a manifest and the averaged coefficients."""
    out = Path(out_dir) / table.name
    (out / "fields").mkdir(parents=True, exist_ok=True)
    mesh_hash = table.mesh.fingerprint()
    write_mesh(table.mesh, out / "mesh.txt")
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["problem", "indices", "sample", "theta", "mesh_hash", "file"])
        for key in sorted(table.fields):
            arr = table.fields[key]
            comp_shape = arr.shape[2:]
            for s, theta in enumerate(table.thetas):
                fname = f"fields/{key}_s{s:03d}.csv"
                flat = arr[s].reshape(arr.shape[1], -1)
                write_field_csv(table.mesh, out / fname, dict(zip(_component_names(key, comp_shape), flat.T)))
                w.writerow([key, "x".join(map(str, comp_shape)) or "scalar", s, repr(float(theta)), mesh_hash, fname])
    write_coefficient_csv(out / "coefficients.csv", table.thetas, table.averaged)
    return out


def write_offline(offline: OfflineResult, out_dir: str | Path) -> list[Path]:
    """Export every cell table; the meso coefficient CSV is also copied to ``macro_coefficients.csv``."""
    out = Path(out_dir)
    dirs = [write_table(t, out / "micro") for t in offline.micro.values()]
    dirs.append(write_table(offline.meso, out / "meso"))
    write_coefficient_csv(out / "macro_coefficients.csv", offline.thetas, offline.macro)
    return dirs


def save_offline(offline: OfflineResult, path: str | Path) -> None:
    """Binary cache of the full offline result for reuse across macro runs."""
    with open(path, "wb") as fh:
        pickle.dump(offline, fh, protocol=pickle.HIGHEST_PROTOCOL)


def load_offline(path: str | Path) -> OfflineResult:
    with open(path, "rb") as fh:
        obj = pickle.load(fh)
    if not isinstance(obj, OfflineResult):
        raise TypeError(f"{path} does not hold an offline result")
    return obj
