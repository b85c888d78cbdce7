"""P1 finite-element kernels: assembly, Dirichlet elimination, solves, recovery, norms.

Coefficients are piecewise constant (one value per element), so every integral
assembled here is exact with one-point quadrature. Vector unknowns are stored
interleaved: dof ``2*node + component``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import TriMesh
from .tensors import symmetry_defect

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class CoefficientError(ValueError):
    pass


def _per_element(arr, mesh: TriMesh, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.asarray(arr, dtype=float)
    return np.broadcast_to(arr, (mesh.n_elements,) + shape)


def _scatter(mesh: TriMesh, Ke: np.ndarray, ncomp: int) -> sp.csr_matrix:
    tri = mesh.triangles
    if ncomp == 1:
        dofs = tri
    else:
        dofs = (ncomp * tri[:, :, None] + np.arange(ncomp)).reshape(len(tri), -1)
    nloc = dofs.shape[1]
    rows = np.repeat(dofs, nloc, axis=1).ravel()
    cols = np.tile(dofs, (1, nloc)).ravel()
    n = ncomp * mesh.n_nodes
    return sp.coo_matrix((Ke.reshape(-1), (rows, cols)), shape=(n, n)).tocsr()


def assemble_scalar_operator(mesh: TriMesh, k_field) -> sp.csr_matrix:
    """Stiffness matrix of ``-div(k grad w)`` for per-element 2x2 tensors ``k``."""
    k = _per_element(k_field, mesh, (2, 2))
    sym = 0.5 * (k + np.swapaxes(k, 1, 2))
    if np.max(np.abs(k - sym)) > 1e-12 * max(np.max(np.abs(k)), 1e-300):
        raise CoefficientError("conductivity tensor is not symmetric")
    tr = k[:, 0, 0] + k[:, 1, 1]
    det = k[:, 0, 0] * k[:, 1, 1] - k[:, 0, 1] * k[:, 1, 0]
    bad = np.flatnonzero((tr <= 0) | (det <= 0))
    if bad.size:
        raise CoefficientError(f"non-SPD conductivity on element {int(bad[0])}")
    G = mesh.shape_gradients
    Ke = np.einsum("e,eai,eij,ebj->eab", mesh.areas, G, k, G)
    return _scatter(mesh, Ke, 1)


def assemble_elasticity_operator(mesh: TriMesh, C_field) -> sp.csr_matrix:
    """Stiffness of ``-div(C : grad u)`` for full per-element tensors ``C[e,i,j,k,l]``."""
    C = _per_element(C_field, mesh, (2, 2, 2, 2))
    defect = symmetry_defect(C)
    if defect > 1e-12:
        raise CoefficientError(f"elasticity tensor symmetry violated (relative {defect:.3e})")
    G = mesh.shape_gradients
    Ke = np.einsum("e,eaj,eijkl,ebl->eaibk", mesh.areas, G, C, G)
    return _scatter(mesh, Ke.reshape(mesh.n_elements, 6, 6), 2)


def assemble_mass(mesh: TriMesh, coeff=1.0, ncomp: int = 1) -> sp.csr_matrix:
    """Consistent P1 mass matrix weighted by a per-element coefficient."""
    c = _per_element(coeff, mesh, ())
    local = (np.ones((3, 3)) + np.eye(3)) / 12.0
    Ke = (c * mesh.areas)[:, None, None] * local
    if ncomp > 1:
        Ke = np.einsum("eab,ij->eaibj", Ke, np.eye(ncomp)).reshape(mesh.n_elements, 3 * ncomp, 3 * ncomp)
    return _scatter(mesh, Ke, ncomp)


def assemble_load(mesh: TriMesh, source) -> np.ndarray:
    """``int f v`` for a per-element constant scalar ``(M,)`` or vector ``(M, 2)`` source.

    A constant vector source must be passed with shape ``(1, 2)``.
    """
    f = np.asarray(source, dtype=float)
    if f.ndim == 2:
        f = _per_element(f, mesh, (2,))
        out = np.zeros((mesh.n_nodes, 2))
        contrib = (mesh.areas / 3.0)[:, None] * f
        for a in range(3):
            np.add.at(out, mesh.triangles[:, a], contrib)
        return out.ravel()
    f = _per_element(f, mesh, ())
    out = np.zeros(mesh.n_nodes)
    for a in range(3):
        np.add.at(out, mesh.triangles[:, a], mesh.areas * f / 3.0)
    return out


def assemble_divergence_rhs(mesh: TriMesh, flux) -> np.ndarray:
    """``int g . grad v`` for per-element flux ``g`` of shape ``(M, 2)`` or ``(M, 2, 2)``.

    Pairing with a test function equals ``-int div(g) v`` for ``v`` vanishing on
    the boundary. For a vector flux ``g[e, i, j]`` the first index is the
    equation component and the second the derivative direction.
    """
    g = np.asarray(flux, dtype=float)
    G = mesh.shape_gradients
    if g.ndim >= 2 and g.shape[-2:] == (2, 2):
        g = _per_element(g, mesh, (2, 2))
        loc = np.einsum("e,eij,eaj->eai", mesh.areas, g, G)
        out = np.zeros((mesh.n_nodes, 2))
        for a in range(3):
            np.add.at(out, mesh.triangles[:, a], loc[:, a])
        return out.ravel()
    g = _per_element(g, mesh, (2,))
    loc = np.einsum("e,ej,eaj->ea", mesh.areas, g, G)
    out = np.zeros(mesh.n_nodes)
    for a in range(3):
        np.add.at(out, mesh.triangles[:, a], loc[:, a])
    return out


@dataclass
class SparseSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    fixed_dofs: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    fixed_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def free_dofs(self) -> np.ndarray:
        mask = np.ones(self.n, dtype=bool)
        mask[self.fixed_dofs] = False
        return np.flatnonzero(mask)

    def reduced(self) -> tuple[sp.csr_matrix, np.ndarray, np.ndarray]:
        """Symmetric elimination: ``A_ff x_f = b_f - A_fc g``."""
        free = self.free_dofs()
        A = self.matrix.tocsr()
        Aff = A[free][:, free]
        b = self.rhs[free].copy()
        if len(self.fixed_dofs):
            b -= A[free][:, self.fixed_dofs] @ self.fixed_values
        return Aff.tocsr(), b, free

    def expand(self, x_free: np.ndarray) -> np.ndarray:
        x = np.zeros(self.n)
        x[self.free_dofs()] = x_free
        x[self.fixed_dofs] = self.fixed_values
        return x


def dirichlet_dofs(mesh: TriMesh, tags: Sequence[str] | None, ncomp: int = 1, components: Sequence[int] | None = None) -> np.ndarray:
    nodes = mesh.boundary_nodes(tags)
    if ncomp == 1:
        return nodes
    comps = range(ncomp) if components is None else components
    return np.sort(np.concatenate([ncomp * nodes + c for c in comps]))


def apply_dirichlet(
    system: SparseSystem,
    mesh: TriMesh,
    tags: Sequence[str] | None,
    value_fn: Callable[[np.ndarray], np.ndarray] | float = 0.0,
    components: Sequence[int] | None = None,
) -> SparseSystem:
    """Constrain boundary dofs on edges with ``tags`` (all edges when ``None``).

    ``value_fn`` maps node coordinates ``(n, 2)`` to values ``(n,)`` or ``(n, ncomp)``.
    Constraints accumulate; later calls override earlier values on shared dofs.
    """
    ncomp = system.n // mesh.n_nodes
    nodes = mesh.boundary_nodes(tags)
    if callable(value_fn):
        vals = np.asarray(value_fn(mesh.nodes[nodes]), dtype=float)
    else:
        vals = np.full(len(nodes) if ncomp == 1 else (len(nodes), ncomp), float(value_fn))
    if ncomp == 1:
        dofs, dvals = nodes, vals.reshape(len(nodes))
    else:
        vals = np.broadcast_to(vals.reshape(len(nodes), -1), (len(nodes), ncomp))
        comps = list(range(ncomp)) if components is None else list(components)
        dofs = np.concatenate([ncomp * nodes + c for c in comps])
        dvals = np.concatenate([vals[:, c] for c in comps])
    merged = dict(zip(system.fixed_dofs.tolist(), system.fixed_values.tolist()))
    merged.update(zip(dofs.tolist(), dvals.tolist()))
    keys = np.array(sorted(merged), dtype=np.int64)
    return SparseSystem(system.matrix, system.rhs, keys, np.array([merged[k] for k in keys.tolist()]))


def solve_spd(system: SparseSystem, tol: float = 1e-10, max_iter: int | None = None, method: str = "cg") -> np.ndarray:
    """Solve the constrained SPD system; returns the full dof vector.

    ``method="cg"`` runs Jacobi-preconditioned conjugate gradients to relative
    residual ``tol``; ``method="direct"`` uses a sparse LU factorization.
    """
    A, b, _ = system.reduced()
    if A.shape[0] == 0:
        return system.expand(np.zeros(0))
    if method == "direct":
        x = spla.splu(A.tocsc()).solve(b)
        return system.expand(x)
    if method != "cg":
        raise ValueError(f"unknown solve method {method!r}")
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return system.expand(np.zeros_like(b))
    diag = A.diagonal()
    if np.any(diag <= 0):
        raise SolverError("matrix has non-positive diagonal entries; not SPD")
    Minv = spla.LinearOperator(A.shape, matvec=lambda r: r / diag, dtype=float)
    maxit = max_iter if max_iter is not None else 10 * A.shape[0]
    x, info = spla.cg(A, b, rtol=tol, atol=0.0, maxiter=maxit, M=Minv)
    res = np.linalg.norm(b - A @ x) / bnorm
    if info != 0 or res > tol * 1.0001:
        raise SolverError(f"CG did not converge in {maxit} iterations (relative residual {res:.3e})")
    return system.expand(x)


class CellSolver:
    """Factorized zero-Dirichlet operator on a unit cell, reused for many right-hand sides.

    ``solve(vol, flux)`` returns ``w`` with ``div(K grad w) = vol + div(flux)``
    in the cell and ``w = 0`` on the whole boundary. With ``periodic_y`` the
    bottom and top sides are tied instead of clamped, which turns a laminate
    stacked along the first axis into an exactly one-dimensional problem.
    """

    def __init__(self, mesh: TriMesh, coeff: np.ndarray, vector: bool, periodic_y: bool = False):
        self.mesh = mesh
        self.vector = vector
        self.ncomp = 2 if vector else 1
        A = assemble_elasticity_operator(mesh, coeff) if vector else assemble_scalar_operator(mesh, coeff)
        self._P = self._prolongation(mesh, periodic_y)
        Ar = (self._P.T @ A @ self._P).tocsc()
        self._lu = spla.splu(Ar)

    def _prolongation(self, mesh: TriMesh, periodic_y: bool) -> sp.csr_matrix:
        n = mesh.n_nodes
        target = np.arange(n)
        clamped = mesh.boundary_nodes(None if not periodic_y else ["left", "right"])
        keep = np.ones(n, dtype=bool)
        keep[clamped] = False
        if periodic_y:
            top = np.setdiff1d(mesh.boundary_nodes(["top"]), clamped)
            bottom = np.setdiff1d(mesh.boundary_nodes(["bottom"]), clamped)
            top = top[np.argsort(mesh.nodes[top, 0])]
            bottom = bottom[np.argsort(mesh.nodes[bottom, 0])]
            target[top] = bottom
            keep[top] = False
        masters = np.flatnonzero(keep)
        col = -np.ones(n, dtype=np.int64)
        col[masters] = np.arange(len(masters))
        rows = np.flatnonzero(keep[target] | (target != np.arange(n)))
        rows = rows[col[target[rows]] >= 0]
        P = sp.csr_matrix((np.ones(len(rows)), (rows, col[target[rows]])), shape=(n, len(masters)))
        if self.ncomp == 1:
            return P
        return sp.kron(P, sp.identity(self.ncomp), format="csr")

    def solve(self, vol=None, flux=None) -> np.ndarray:
        mesh = self.mesh
        rhs = np.zeros(self.ncomp * mesh.n_nodes)
        if vol is not None:
            rhs -= assemble_load(mesh, np.broadcast_to(vol, (mesh.n_elements, 2)) if self.vector else vol)
        if flux is not None:
            rhs += assemble_divergence_rhs(mesh, flux)
        x = self._P @ self._lu.solve(self._P.T @ rhs)
        return x.reshape(mesh.n_nodes, 2) if self.vector else x


def _recovery_matrix(mesh: TriMesh) -> sp.csr_matrix:
    if "recovery" not in mesh._cache:
        tri = mesh.triangles
        rows = tri.ravel()
        cols = np.repeat(np.arange(mesh.n_elements), 3)
        w = np.repeat(mesh.areas, 3)
        P = sp.coo_matrix((w, (rows, cols)), shape=(mesh.n_nodes, mesh.n_elements)).tocsr()
        tot = np.asarray(P.sum(axis=1)).ravel()
        mesh._cache["recovery"] = sp.diags(1.0 / tot) @ P
    return mesh._cache["recovery"]


def element_gradients(mesh: TriMesh, values: np.ndarray) -> np.ndarray:
    """Constant gradient per element; trailing axis is the derivative direction."""
    vals = np.asarray(values, dtype=float)
    return np.einsum("eaj,ea...->e...j", mesh.shape_gradients, vals[mesh.triangles])


def recover_gradient(mesh: TriMesh, values: np.ndarray) -> np.ndarray:
    """Area-weighted average of adjacent element gradients at each node."""
    eg = element_gradients(mesh, values)
    P = _recovery_matrix(mesh)
    flat = eg.reshape(mesh.n_elements, -1)
    return np.asarray(P @ flat).reshape((mesh.n_nodes,) + eg.shape[1:])


def recover_hessian(mesh: TriMesh, values: np.ndarray) -> np.ndarray:
    """Gradient recovery applied to the recovered gradient, then symmetrized."""
    H = recover_gradient(mesh, recover_gradient(mesh, values))
    return 0.5 * (H + np.swapaxes(H, -1, -2))


def l2_norm(mesh: TriMesh, values: np.ndarray) -> float:
    """Exact L2 norm of a P1 field; vector fields sum their components."""
    v = np.asarray(values, dtype=float).reshape(mesh.n_nodes, -1)
    M = assemble_mass(mesh) if "mass" not in mesh._cache else mesh._cache["mass"]
    mesh._cache["mass"] = M
    return float(np.sqrt(max(np.sum(v * (M @ v)), 0.0)))


def h1_seminorm(mesh: TriMesh, values: np.ndarray) -> float:
    eg = element_gradients(mesh, np.asarray(values, dtype=float).reshape(mesh.n_nodes, -1))
    return float(np.sqrt(np.sum(mesh.areas[:, None, None] * eg * eg)))
