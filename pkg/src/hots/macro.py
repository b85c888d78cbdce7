"""Online stage: implicit time stepping of the homogenized thermo-mechanical system.

Each step decouples the system. The thermal equation sees the displacement
only through an extrapolated strain rate; the mechanical equation sees the
new temperature. Both are linearized by freezing the temperature-dependent
coefficients at the previous fixed-point iterate. The same stepper drives the
resolved reference solve when it is given per-element constituent
coefficients instead of homogenized ones.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse.linalg as spla

from .cells import Coefficients, OfflineResult, assign_by_tag, material_coefficients
from .fem import (
    SparseSystem,
    apply_dirichlet,
    assemble_divergence_rhs,
    assemble_elasticity_operator,
    assemble_load,
    assemble_mass,
    assemble_scalar_operator,
    element_gradients,
    recover_gradient,
    recover_hessian,
)
from .materials import MaterialModel
from .mesh import TriMesh

log = logging.getLogger(__name__)

CoefficientProvider = Callable[[np.ndarray], Coefficients]


class FixedPointError(RuntimeError):
    pass


def table_provider(offline: OfflineResult) -> CoefficientProvider:
    """Homogenized coefficients interpolated from the offline temperature table."""
    return offline.macro_at


def material_provider(mesh: TriMesh, materials: Mapping[str, MaterialModel]) -> CoefficientProvider:
    """Constituent coefficients per element, looked up by element tag."""
    tags = mesh.region_tag
    groups = {t: np.flatnonzero(tags == t) for t in mesh.tag_names()}
    missing = set(groups) - set(materials)
    if missing:
        raise KeyError(f"no material named {sorted(missing)}")

    def provide(theta_elem: np.ndarray) -> Coefficients:
        parts = {t: material_coefficients(materials[t], theta_elem[idx]) for t, idx in groups.items()}
        out = None
        for t, idx in groups.items():
            part = parts[t]
            if out is None:
                out = part.map(lambda a: np.zeros((len(tags),) + a.shape[1:]))
            for name, arr in out.as_dict().items():
                arr[idx] = getattr(part, name)
        return out

    return provide


def constant_provider(coefs: Coefficients) -> CoefficientProvider:
    return lambda theta_elem: coefs.map(lambda a: np.broadcast_to(a, theta_elem.shape + np.shape(a)))


@dataclass
class BoundaryData:
    """Boundary conditions by edge tag. Unlisted edges are traction/flux free."""

    temperature: dict[str, float] = field(default_factory=dict)
    displacement: dict[str, tuple[float, float]] = field(default_factory=dict)
    heat_flux: dict[str, float] = field(default_factory=dict)
    traction: dict[str, tuple[float, float]] = field(default_factory=dict)


SourceLike = float | Sequence[float] | Callable[[np.ndarray, float], np.ndarray]


@dataclass
class MacroProblem:
    mesh: TriMesh
    coefficients: CoefficientProvider
    heat_source: SourceLike
    body_force: SourceLike
    boundary: BoundaryData
    reference_temperature: float
    dt: float
    t_end: float
    initial_temperature: np.ndarray | float | None = None
    initial_displacement: np.ndarray | None = None
    initial_velocity: np.ndarray | None = None
    omega: float = 1.0
    tol_theta: float = 1e-6
    tol_u: float = 1e-6
    max_iter: int = 50
    store_every: int = 1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("time step must be positive")
        if self.t_end < 0:
            raise ValueError("final time must be non-negative")
        if not (self.tol_theta > 0 and self.tol_u > 0):
            raise ValueError("tolerances must be positive")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))


@dataclass(frozen=True)
class Snapshot:
    """Fields at one time level plus the two previous levels needed for time differences."""

    t: float
    dt: float
    theta: np.ndarray
    u: np.ndarray  # (N, 2)
    theta_prev: np.ndarray
    u_prev: np.ndarray
    u_prev2: np.ndarray
    iterations: int = 0
    residuals: tuple[tuple[float, float], ...] = ()

    @property
    def theta_rate(self) -> np.ndarray:
        return (self.theta - self.theta_prev) / self.dt

    @property
    def acceleration(self) -> np.ndarray:
        return (self.u - 2.0 * self.u_prev + self.u_prev2) / self.dt**2

    def derivatives(self, mesh: TriMesh) -> dict[str, np.ndarray]:
        """Recovered nodal spatial derivatives and backward time differences."""
        return {
            "theta": self.theta,
            "grad_theta": recover_gradient(mesh, self.theta),
            "hess_theta": recover_hessian(mesh, self.theta),
            "theta_rate": self.theta_rate,
            "u": self.u,
            "grad_u": recover_gradient(mesh, self.u),  # [n, m, a]
            "hess_u": recover_hessian(mesh, self.u),  # [n, m, a1, a2]
            "acceleration": self.acceleration,
            "grad_velocity": recover_gradient(mesh, (self.u - self.u_prev) / self.dt),
        }


def _nodal(source: SourceLike, mesh: TriMesh, t: float, ncomp: int) -> np.ndarray:
    if callable(source):
        out = np.asarray(source(mesh.nodes, t), dtype=float)
    else:
        out = np.broadcast_to(np.asarray(source, dtype=float), (mesh.n_nodes,) if ncomp == 1 else (mesh.n_nodes, ncomp))
    return out.reshape(mesh.n_nodes, ncomp) if ncomp > 1 else out.reshape(mesh.n_nodes)


def _edge_load(mesh: TriMesh, values: Mapping[str, float | tuple], ncomp: int) -> np.ndarray:
    """Lumped boundary integral of piecewise-constant data on tagged edges."""
    out = np.zeros((mesh.n_nodes, ncomp))
    for tag, val in values.items():
        sel = mesh.boundary_tag == tag
        if not np.any(sel):
            raise KeyError(f"unknown boundary tag {tag!r}")
        edges = mesh.boundary_edges[sel]
        length = np.linalg.norm(mesh.nodes[edges[:, 1]] - mesh.nodes[edges[:, 0]], axis=1)
        contrib = 0.5 * length[:, None] * np.broadcast_to(np.asarray(val, dtype=float), (ncomp,))
        for a in range(2):
            np.add.at(out, edges[:, a], contrib)
    return out.ravel() if ncomp > 1 else out[:, 0]


class MacroStepper:
    def __init__(self, problem: MacroProblem):
        self.p = problem
        mesh = problem.mesh
        self.mass = assemble_mass(mesh)
        self.vmass = assemble_mass(mesh, ncomp=2)
        b = problem.boundary
        self._theta_tags = list(b.temperature)
        self._u_tags = list(b.displacement)
        self._q = _edge_load(mesh, b.heat_flux, 1) if b.heat_flux else 0.0
        self._s = _edge_load(mesh, b.traction, 2) if b.traction else 0.0

    def initial(self) -> Snapshot:
        p, n = self.p, self.p.mesh.n_nodes
        th = p.initial_temperature
        theta = np.full(n, p.reference_temperature) if th is None else np.broadcast_to(np.asarray(th, dtype=float), (n,)).copy()
        u0 = np.zeros((n, 2)) if p.initial_displacement is None else np.asarray(p.initial_displacement, dtype=float).reshape(n, 2)
        u1 = np.zeros((n, 2)) if p.initial_velocity is None else np.asarray(p.initial_velocity, dtype=float).reshape(n, 2)
        um1 = u0 - p.dt * u1
        return Snapshot(0.0, p.dt, theta, u0, theta.copy(), um1, um1 - p.dt * u1)

    def _constrain(self, system: SparseSystem, tags: dict, vector: bool) -> SparseSystem:
        for tag, val in tags.items():
            system = apply_dirichlet(system, self.p.mesh, [tag], (lambda x, v=val: np.broadcast_to(np.asarray(v, float), (len(x), 2))) if vector else float(val))
        return system

    def _thermal(self, c: Coefficients, snap: Snapshot, t: float) -> np.ndarray:
        p, mesh = self.p, self.p.mesh
        S = assemble_mass(mesh, c.capacity / p.dt)
        A = S + assemble_scalar_operator(mesh, c.conductivity)
        strain_rate = element_gradients(mesh, snap.u - snap.u_prev) / p.dt
        coupling = -p.omega * np.einsum("eij,eij->e", c.coupling, strain_rate)
        rhs = S @ snap.theta + self.mass @ _nodal(p.heat_source, mesh, t, 1) + assemble_load(mesh, coupling) + self._q
        system = self._constrain(SparseSystem(A, rhs), p.boundary.temperature, False)
        return _direct(system)

    def _mechanical(self, c: Coefficients, theta: np.ndarray, snap: Snapshot, t: float) -> np.ndarray:
        p, mesh = self.p, self.p.mesh
        R = assemble_mass(mesh, c.density / p.dt**2, ncomp=2)
        A = R + assemble_elasticity_operator(mesh, c.stiffness)
        rise = theta[mesh.triangles].mean(axis=1) - p.reference_temperature
        rhs = (
            R @ (2.0 * snap.u - snap.u_prev).ravel()
            + self.vmass @ _nodal(p.body_force, mesh, t, 2).ravel()
            + assemble_divergence_rhs(mesh, c.thermal_modulus * rise[:, None, None])
            + self._s
        )
        system = self._constrain(SparseSystem(A, rhs), p.boundary.displacement, True)
        return _direct(system).reshape(-1, 2)

    def step(self, snap: Snapshot, order: str = "thermal_first") -> Snapshot:
        p, mesh = self.p, self.p.mesh
        t = snap.t + p.dt
        theta_it, u_it = snap.theta.copy(), snap.u.copy()
        history = []
        for it in range(1, p.max_iter + 1):
            c = p.coefficients(theta_it[mesh.triangles].mean(axis=1))
            if order == "thermal_first":
                theta_new = self._thermal(c, snap, t)
                u_new = self._mechanical(c, theta_new, snap, t)
            else:
                u_new = self._mechanical(c, theta_it, snap, t)
                theta_new = self._thermal(c, snap, t)
            if not (np.all(np.isfinite(theta_new)) and np.all(np.isfinite(u_new))):
                raise FixedPointError(f"non-finite iterate at t={t:.6g}, iteration {it}")
            res = (float(np.max(np.abs(theta_new - theta_it))), float(np.max(np.abs(u_new - u_it))))
            history.append(res)
            theta_it, u_it = theta_new, u_new
            if res[0] <= p.tol_theta and res[1] <= p.tol_u:
                break
        else:
            raise FixedPointError(
                f"fixed-point iteration did not converge in {p.max_iter} iterations at t={t:.6g}; "
                f"last residuals theta={history[-1][0]:.3e}, u={history[-1][1]:.3e}"
            )
        log.debug("t=%.6g converged in %d iterations, residuals %s", t, len(history), history[-1])
        return Snapshot(t, p.dt, theta_it, u_it, snap.theta, snap.u, snap.u_prev, len(history), tuple(history))


def _direct(system: SparseSystem) -> np.ndarray:
    A, b, _ = system.reduced()
    return system.expand(spla.spsolve(A.tocsc(), b))


@dataclass
class MacroRun:
    snapshots: list[Snapshot]
    iterations: list[int]
    max_residuals: list[tuple[float, float]]

    @property
    def final(self) -> Snapshot:
        return self.snapshots[-1]


def run(problem: MacroProblem, start: Snapshot | None = None, order: str = "thermal_first") -> MacroRun:
    """Step from ``start`` (or the initial data) to the final time."""
    stepper = MacroStepper(problem)
    snap = start if start is not None else stepper.initial()
    snaps = [snap]
    iters, res = [], []
    n_total = problem.n_steps
    n_done = int(round(snap.t / problem.dt))
    for k in range(n_done, n_total):
        snap = stepper.step(snap, order)
        iters.append(snap.iterations)
        res.append(snap.residuals[-1])
        if (k + 1) % problem.store_every == 0 or k + 1 == n_total:
            snaps.append(snap)
    if iters:
        log.info("%d steps, iterations per step min %d max %d", len(iters), min(iters), max(iters))
    return MacroRun(snaps, iters, res)


def with_boundary(problem: MacroProblem, boundary: BoundaryData) -> MacroProblem:
    return replace(problem, boundary=boundary)


def example_boundary(temperature: float) -> BoundaryData:
    """Fixed temperature and clamped displacement on every side of a rectangle."""
    sides = ("bottom", "right", "top", "left")
    return BoundaryData({s: temperature for s in sides}, {s: (0.0, 0.0) for s in sides})


__all__ = [
    "BoundaryData",
    "FixedPointError",
    "MacroProblem",
    "MacroRun",
    "MacroStepper",
    "Snapshot",
    "constant_provider",
    "example_boundary",
    "material_provider",
    "run",
    "table_provider",
    "with_boundary",
]
