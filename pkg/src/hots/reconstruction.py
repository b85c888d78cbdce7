"""Multiscale reconstruction of oscillatory temperature and displacement fields.

A macro point ``x`` maps to a meso coordinate ``y = frac(x / meso_period)`` and a
micro coordinate ``z = frac(x / micro_period)``. Meso correctors are looked up
at ``y``; micro correctors at ``z``, but only where ``y`` falls in a
micro-composite region of the meso cell (they are zero in pure regions).
Cell data depend on the local macro temperature through linear interpolation
in the offline temperature table. Derivatives of meso correctors with respect
to ``x`` arise only through that temperature dependence and are formed as
``d(field)/d(theta) * d(theta0)/dx``.

Expansion terms carry the weights

    order:  0   1    2    3              4      5          6
    weight: 1   z1   z2   z2**2 / z1     z1**2  z1 * z2    z2**2

with ``z1``/``z2`` the meso/micro periods. The variants keep terms
``homogenized`` {0}, ``sots`` {0, 1, 4}, ``lots`` {0, 1, 2} and ``hots`` {0..6}.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cells import CellTable, OfflineResult, interpolation_weights, theta_derivative
from .fem import recover_gradient, recover_hessian
from .macro import Snapshot
from .mesh import TriMesh

VARIANT_TERMS = {
    "homogenized": (0,),
    "sots": (0, 1, 4),
    "lots": (0, 1, 2),
    "hots": (0, 1, 2, 3, 4, 5, 6),
}
VARIANTS = tuple(VARIANT_TERMS)

MESO_KEYS = (
    "heat", "thermal", "elastic", "capacity", "heat2", "heat_x", "heat_nonlinear", "coupling", "inertia",
    "elastic2", "elastic_x", "thermal_x", "thermal2", "thermal_nonlinear", "elastic_nonlinear",
)
MESO_THETA_GRADIENT_KEYS = ("heat", "thermal", "elastic")
MICRO_SHAPES = {
    "heat": (2,), "thermal": (2,), "elastic": (2, 2, 2), "heat2": (2, 2), "elastic2": (2, 2, 2, 2),
    "capacity": (), "capacity_strain": (2, 2), "heat_x": (2, 2), "heat_theta": (2,), "coupling": (2, 2),
    "inertia": (2, 2), "elastic_x": (2, 2, 2, 2), "thermal_x": (2, 2), "thermal2": (2, 2),
    "elastic_theta": (2, 2, 2), "thermal_theta": (2,),
}


def term_weights(zeta1: float, zeta2: float) -> np.ndarray:
    return np.array([1.0, zeta1, zeta2, zeta2**2 / zeta1, zeta1**2, zeta1 * zeta2, zeta2**2])


def check_scales(zeta1: float, zeta2: float, domain=(0.0, 1.0, 0.0, 1.0)) -> None:
    if not (0.0 < zeta2 < zeta1 < 1.0):
        raise ValueError(f"need 0 < micro period < meso period < 1, got {zeta2}, {zeta1}")
    ratio = zeta1 / zeta2
    if abs(ratio - round(ratio)) > 1e-9 * ratio:
        raise ValueError(f"meso/micro period ratio {ratio:.6g} is not an integer")
    for length in (domain[1] - domain[0], domain[3] - domain[2]):
        n = length / zeta1
        if abs(n - round(n)) > 1e-9 * n:
            raise ValueError(f"domain side {length} is not a whole number of meso periods {zeta1}")


class _TableSampler:
    """Point sampling of a cell table with spatial derivatives precomputed per temperature sample."""

    def __init__(self, table: CellTable, keys, gradients: bool, theta_gradient_keys=()):
        self.table = table
        self.mesh = table.mesh
        self.keys = tuple(k for k in keys if k in table.fields)
        self.value = {k: table.fields[k] for k in self.keys}
        self.dvalue = {k: table.dfields[k] for k in self.keys}
        self.grad, self.hess, self.dgrad = {}, {}, {}
        if gradients:
            for k in self.keys:
                data = table.fields[k]
                self.grad[k] = np.stack([recover_gradient(self.mesh, d) for d in data])
                self.hess[k] = np.stack([recover_hessian(self.mesh, d) for d in data])
            for k in theta_gradient_keys:
                self.dgrad[k] = theta_derivative(table.thetas, self.grad[k])

    def locate(self, pts: np.ndarray, theta: np.ndarray):
        elem, bary = self.mesh.locate(pts)
        i, w = interpolation_weights(self.table.thetas, theta)
        return elem, bary, i, w

    def sample(self, data: np.ndarray, where) -> np.ndarray:
        elem, bary, i, w = where
        nodes = self.mesh.triangles[elem]
        lo = np.einsum("pa,pa...->p...", bary, data[i[:, None], nodes])
        hi = np.einsum("pa,pa...->p...", bary, data[i[:, None] + 1, nodes])
        w = w.reshape(w.shape + (1,) * (lo.ndim - 1))
        return (1.0 - w) * lo + w * hi

    def all(self, where, store: dict) -> dict[str, np.ndarray]:
        return {k: self.sample(v, where) for k, v in store.items()}


@dataclass
class MacroAtPoints:
    """Macro fields and derivatives at evaluation points."""

    theta: np.ndarray
    grad: np.ndarray
    hess: np.ndarray
    rate: np.ndarray
    u: np.ndarray
    grad_u: np.ndarray  # [p, m, a]
    hess_u: np.ndarray  # [p, m, a1, a2]
    acceleration: np.ndarray
    grad_velocity: np.ndarray  # [p, a1, a2] = d2 u_a1 / dx_a2 dt

    @classmethod
    def from_snapshot(cls, mesh: TriMesh, snap: Snapshot, pts: np.ndarray) -> "MacroAtPoints":
        d = snap.derivatives(mesh)
        elem, bary = mesh.locate(pts)
        nodes = mesh.triangles[elem]
        at = lambda v: np.einsum("pa,pa...->p...", bary, v[nodes])
        return cls(at(d["theta"]), at(d["grad_theta"]), at(d["hess_theta"]), at(d["theta_rate"]), at(d["u"]),
                   at(d["grad_u"]), at(d["hess_u"]), at(d["acceleration"]), at(d["grad_velocity"]))


class Reconstructor:
    """Evaluates the multiscale solution variants from a macro snapshot and offline tables.

    ``zero_micro``/``zero_meso_second``/``zero_meso_first`` switch off groups of
    cell functions, which turns higher variants into lower ones.
    """

    def __init__(
        self,
        offline: OfflineResult,
        reference_temperature: float,
        zero_micro: bool = False,
        zero_meso_second: bool = False,
        zero_meso_first: bool = False,
    ):
        geo = offline.geometry
        check_scales(geo.meso_period, geo.micro_period)
        self.offline = offline
        self.zeta1, self.zeta2 = geo.meso_period, geo.micro_period
        self.reference_temperature = reference_temperature
        self.meso = _TableSampler(offline.meso, MESO_KEYS, True, MESO_THETA_GRADIENT_KEYS)
        self.micro = {name: _TableSampler(t, tuple(t.fields), False) for name, t in offline.micro.items()}
        self.zero_micro = zero_micro
        self.zero_meso_second = zero_meso_second
        self.zero_meso_first = zero_meso_first

    # ------------------------------------------------------------ cell data

    def _meso_data(self, y: np.ndarray, theta: np.ndarray):
        s = self.meso
        where = s.locate(y, theta)
        v, g, h, dv, dg = (s.all(where, store) for store in (s.value, s.grad, s.hess, s.dvalue, s.dgrad))
        first = ("heat", "thermal", "elastic")
        for store in (v, g, h, dv, dg):
            for k in list(store):
                if (self.zero_meso_first and k in first) or (self.zero_meso_second and k not in first):
                    store[k] = np.zeros_like(store[k])
        return where, v, g, h, dv, dg

    def _micro_data(self, z: np.ndarray, theta: np.ndarray, phase: np.ndarray) -> dict[str, np.ndarray]:
        out = {k: np.zeros((len(z),) + shp) for k, shp in MICRO_SHAPES.items()}
        for name, s in self.micro.items():
            sel = np.flatnonzero(phase == name)
            if len(sel) == 0 or self.zero_micro:
                continue
            vals = s.all(s.locate(z[sel], theta[sel]), s.value)
            for k, val in vals.items():
                out[k][sel] = val
        return out

    # ------------------------------------------------------------ expansion terms

    def terms(self, mac: MacroAtPoints, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Temperature terms ``(7, P)`` and displacement terms ``(7, P, 2)`` at points ``x``."""
        x = np.atleast_2d(x)
        y = np.mod(x / self.zeta1, 1.0)
        z = np.mod(x / self.zeta2, 1.0)
        th = mac.theta
        where, v, gy, hy, dv, dgy = self._meso_data(y, th)
        phase = self.offline.meso.mesh.region_tag[where[0]]
        mi = self._micro_data(z, th, phase)
        g, H, rate = mac.grad, mac.hess, mac.rate
        Gu, Hu, acc, gv = mac.grad_u, mac.hess_u, mac.acceleration, mac.grad_velocity
        delta = th - self.reference_temperature
        es = np.einsum

        # meso fields: value, y-gradient (last axis), y-Hessian (last two axes)
        M, gM, hM, dM, dgM = v["heat"], gy["heat"], hy["heat"], dv["heat"], dgy["heat"]
        P, gP, hP, dP, dgP = v["thermal"], gy["thermal"], hy["thermal"], dv["thermal"], dgy["thermal"]
        N, gN, hN, dN, dgN = v["elastic"], gy["elastic"], hy["elastic"], dv["elastic"], dgy["elastic"]
        A0, gA0, hA0 = v["capacity"], gy["capacity"], hy["capacity"]
        M2, gM2, hM2 = v["heat2"], gy["heat2"], hy["heat2"]
        B0, gB0, hB0 = v["heat_nonlinear"], gy["heat_nonlinear"], hy["heat_nonlinear"]
        E0, gE0, hE0 = v["coupling"], gy["coupling"], hy["coupling"]
        F0, gF0, hF0 = v["inertia"], gy["inertia"], hy["inertia"]
        N2, gN2, hN2 = v["elastic2"], gy["elastic2"], hy["elastic2"]
        H0, gH0, hH0 = v["thermal2"], gy["thermal2"], hy["thermal2"]
        W0, gW0, hW0 = v["thermal_nonlinear"], gy["thermal_nonlinear"], hy["thermal_nonlinear"]
        J0, gJ0, hJ0 = v["elastic_nonlinear"], gy["elastic_nonlinear"], hy["elastic_nonlinear"]
        # temperature-gradient driven families contract their trailing direction with grad theta0
        C0 = es("pan,pn->pa", v["heat_x"], g)
        gC0 = es("pank,pn->pak", gy["heat_x"], g)
        hC0 = es("panij,pn->paij", hy["heat_x"], g)
        Z0 = es("piman,pn->pima", v["elastic_x"], g)
        gZ0 = es("pimank,pn->pimak", gy["elastic_x"], g)
        hZ0 = es("pimanqk,pn->pimaqk", hy["elastic_x"], g)
        Q0 = es("pin,pn->pi", v["thermal_x"], g)
        gQ0 = es("pink,pn->pik", gy["thermal_x"], g)
        hQ0 = es("pinqk,pn->piqk", hy["thermal_x"], g)

        # micro fields
        R, O, T = mi["heat"], mi["thermal"], mi["elastic"]
        R2, T2 = mi["heat2"], mi["elastic2"]
        Ast = mi["capacity"] + es("pma,pma->p", mi["capacity_strain"], gP)
        Dst = es("pan,pn->pa", mi["heat_x"], g)
        Rst, Est, Fst = mi["heat_theta"], mi["coupling"], mi["inertia"]
        U = es("piman,pn->pima", mi["elastic_x"], g)
        Qst = es("pin,pn->pi", mi["thermal_x"], g)
        V, Tst, Ost = mi["thermal2"], mi["elastic_theta"], mi["thermal_theta"]

        n = len(th)
        t = np.zeros((7, n))
        t[0] = th
        t[1] = es("pa,pa->p", M, g)
        t[2] = es("pa,pa->p", es("pk,pak->pa", R, gM) + R, g)
        t[3] = es("pa,pa->p", es("pij,paij->pa", R2, hM), g)
        t[4] = (A0 * rate + es("pab,pab->p", M2, H) + es("pa,pa->p", C0, g)
                - es("pab,pa,pb->p", B0, g, g) - es("pab,pab->p", E0, gv))
        t[5] = (
            es("pk,pk->p", R, gA0) * rate
            - es("pk,pabk,pab->p", R, gE0, gv)
            + es("pab,pab->p", es("pk,pabk->pab", R, gM2) + R[:, :, None] * M[:, None, :], H)
            + es("pa,pa->p", es("pk,pak->pa", R, gC0) + es("pk,pa,pk->pa", R, dM, g), g)
            - es("pab,pa,pb->p",
                 es("pk,pabk->pab", R, gB0) + M[:, :, None] * Rst[:, None, :] + M[:, :, None] * es("pk,pbk->pb", Rst, gM)[:, None, :],
                 g, g)
        )
        t[6] = (
            (es("pij,pij->p", R2, hA0) + Ast) * rate
            + es("pab,pab->p",
                 es("pij,pabij->pab", R2, hM2) + R2 + es("paj,pbj->pab", R2, gM) + es("pja,pbj->pab", R2, gM), H)
            + es("pa,pa->p",
                 es("pij,paij->pa", R2, hC0) + es("pij,pai,pj->pa", R2, dgM, g) + es("pij,paj,pi->pa", R2, dgM, g)
                 + Dst + es("pk,pak->pa", Dst, gM), g)
            - es("pab,pa,pb->p", es("pij,pabij->pab", R2, hB0), g, g)
            - es("pab,pab->p", es("pij,pabij->pab", R2, hE0) + Est + es("pqn,pqabn->pab", Est, gN), gv)
        )

        u = np.zeros((7, n, 2))
        u[0] = mac.u
        u[1] = es("pima,pma->pi", N, Gu) - P * delta[:, None]
        u[2] = (es("pima,pma->pi", es("pirn,prman->pima", T, gN) + T, Gu)
                + (es("pima,pma->pi", T, gP) + O) * delta[:, None])
        u[3] = (es("pima,pma->pi", es("pirqn,prmaqn->pima", T2, hN), Gu)
                - es("pimab,pmab->pi", T2, hP) * delta[:, None])
        u[4] = (es("pia,pa->pi", F0, acc) + es("pimab,pmab->pi", N2, Hu) + es("pima,pma->pi", Z0, Gu)
                - Q0 * delta[:, None] - es("pia,pa->pi", H0, g) + es("pia,pa->pi", W0, g) * delta[:, None]
                - es("pimab,pa,pmb->pi", J0, g, Gu))
        u[5] = (
            es("pimn,pman,pa->pi", T, gF0, acc)
            + es("pimab,pmab->pi", es("pirn,prmabn->pimab", T, gN2) + es("pira,prmb->pimab", T, N), Hu)
            + es("pima,pma->pi", es("pirn,prman->pima", T, gZ0) + es("pirn,prma,pn->pima", T, dN, g), Gu)
            - (es("pimn,pmn->pi", T, gQ0) + es("pimn,pm,pn->pi", T, dP, g)) * delta[:, None]
            - es("pia,pa->pi", es("pimn,pman->pia", T, gH0) + es("pima,pm->pia", T, P) + O[:, :, None] * M[:, None, :], g)
            + es("pia,pa->pi",
                 es("pimn,pman->pia", T, gW0) + M[:, None, :] * Ost[:, :, None] + es("pa,pimn,pmn->pia", M, Tst, gP), g) * delta[:, None]
            # the printed leading factor T_kp is read as T_ip, the only index-consistent choice
            - es("pimab,pa,pmb->pi",
                 es("pirn,prmabn->pimab", T, gJ0) + es("pa,pimb->pimab", M, Tst) + es("pa,pirn,prmbn->pimab", M, Tst, gN),
                 g, Gu)
        )
        u[6] = (
            es("pia,pa->pi", es("pimqn,pmaqn->pia", T2, hF0) + Fst, acc)
            + es("pimab,pmab->pi",
                 T2 + es("pirqn,prmabqn->pimab", T2, hN2) + es("piran,prmbn->pimab", T2, gN) + es("pirna,prmbn->pimab", T2, gN),
                 Hu)
            + es("pima,pma->pi",
                 U + es("pirqn,prmaqn->pima", T2, hZ0) + es("pirqn,prmaq,pn->pima", T2, dgN, g)
                 + es("pirqn,prman,pq->pima", T2, dgN, g) + es("pirn,prman->pima", U, gN), Gu)
            - (Qst + es("pimqn,pmqn->pi", T2, hQ0) + es("pimqn,pmn,pq->pi", T2, dgP, g)
               + es("pimn,pmn->pi", U, gP) + es("pimqn,pmq,pn->pi", T2, dgP, g)) * delta[:, None]
            - es("pia,pa->pi",
                 V + es("pimqn,pmaqn->pia", T2, hH0) + es("piman,pmn->pia", T2, gP) + es("pimna,pmn->pia", T2, gP)
                 + es("pin,pan->pia", V, gM), g)
            + es("pia,pa->pi", es("pimqn,pmaqn->pia", T2, hW0), g) * delta[:, None]
            - es("pimab,pa,pmb->pi", es("pirqn,prmabqn->pimab", T2, hJ0), g, Gu)
        )
        return t, u

    # ------------------------------------------------------------ public API

    def evaluate(self, omega_mesh: TriMesh, snap: Snapshot, pts: np.ndarray, variants=VARIANTS) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """Temperature ``(P,)`` and displacement ``(P, 2)`` per variant."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        x0, x1, y0, y1 = omega_mesh.domain
        tol = 1e-12 * max(x1 - x0, y1 - y0)
        if np.any((pts[:, 0] < x0 - tol) | (pts[:, 0] > x1 + tol) | (pts[:, 1] < y0 - tol) | (pts[:, 1] > y1 + tol)):
            raise ValueError("evaluation point outside the macro domain")
        mac = MacroAtPoints.from_snapshot(omega_mesh, snap, pts)
        t, u = self.terms(mac, pts)
        w = term_weights(self.zeta1, self.zeta2)
        out = {}
        for name in variants:
            idx = list(VARIANT_TERMS[name])
            out[name] = (np.einsum("k,kp->p", w[idx], t[idx]), np.einsum("k,kpi->pi", w[idx], u[idx]))
        return out


def sample_line(
    recon: Reconstructor,
    omega_mesh: TriMesh,
    snap: Snapshot,
    start,
    end,
    n_points: int,
    variants=VARIANTS,
) -> dict[str, np.ndarray]:
    """Columns ``s, x1, x2`` plus ``theta_<variant>, u1_<variant>, u2_<variant>`` along a segment."""
    s = np.linspace(0.0, 1.0, n_points) if n_points > 1 else np.zeros(1)
    a, b = np.asarray(start, dtype=float), np.asarray(end, dtype=float)
    pts = a[None, :] + s[:, None] * (b - a)[None, :]
    cols = {"s": s * np.linalg.norm(b - a), "x1": pts[:, 0], "x2": pts[:, 1]}
    for name, (th, u) in recon.evaluate(omega_mesh, snap, pts, variants).items():
        cols[f"theta_{name}"] = th
        cols[f"u1_{name}"] = u[:, 0]
        cols[f"u2_{name}"] = u[:, 1]
    return cols


def write_columns(path: str | Path, cols: dict[str, np.ndarray]) -> None:
    names = list(cols)
    data = np.column_stack([np.asarray(cols[k], dtype=float) for k in names])
    np.savetxt(path, data, delimiter=",", header=",".join(names), comments="", fmt="%.12e")
