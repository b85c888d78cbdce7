"""Unit-cell layouts and the resolved three-scale material map."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import Region, TriMesh, build_rect_mesh, tag_points


@dataclass(frozen=True)
class CellGeometry:
    """Unit cell ``[0,1]^2``: a matrix phase plus inclusions, each tagged with a phase name.

    A phase name refers either to a material or to a named micro cell (a
    micro-composite whose homogenized coefficients fill the region).
    """

    matrix: str
    inclusions: tuple[Region, ...] = ()

    def phases(self) -> set[str]:
        return {self.matrix, *(r.tag for r in self.inclusions)}

    def phase_at(self, pts: np.ndarray) -> np.ndarray:
        return tag_points(np.atleast_2d(pts), self.inclusions, self.matrix)

    def mesh(self, n: int) -> TriMesh:
        return build_rect_mesh((0.0, 1.0, 0.0, 1.0), n, n, self.inclusions, self.matrix)


def default_micro_cell() -> CellGeometry:
    return CellGeometry("material1", (Region("material2", "square", (0.5, 0.5), 0.5),))


def default_meso_cell(micro_name: str = "micro") -> CellGeometry:
    return CellGeometry(micro_name, (Region("material3", "square", (0.5, 0.5), 0.5),))


@dataclass(frozen=True)
class ThreeScaleGeometry:
    meso: CellGeometry
    micro: dict[str, CellGeometry] = field(default_factory=dict)
    meso_period: float = 1.0 / 12.0
    micro_period: float = 1.0 / 36.0

    def __post_init__(self):
        if not (0 < self.micro_period < self.meso_period):
            raise ValueError("micro period must be positive and smaller than the meso period")

    def material_at(self, x: np.ndarray) -> np.ndarray:
        """Constituent material name at physical points of the fully resolved structure."""
        x = np.atleast_2d(x)
        out = self.meso.phase_at(np.mod(x / self.meso_period, 1.0))
        for name, cell in self.micro.items():
            sel = out == name
            if np.any(sel):
                out[sel] = cell.phase_at(np.mod(x[sel] / self.micro_period, 1.0))
        return out

    def resolved_meso_material(self, y: np.ndarray, ratio: float) -> np.ndarray:
        """Material map of a meso cell whose composite regions tile micro cells of size ``ratio``."""
        y = np.atleast_2d(y)
        out = self.meso.phase_at(y)
        for name, cell in self.micro.items():
            sel = out == name
            if np.any(sel):
                out[sel] = cell.phase_at(np.mod(y[sel] / ratio, 1.0))
        return out


def retag(mesh: TriMesh, tags: np.ndarray) -> TriMesh:
    """Same mesh with new per-element tags."""
    return TriMesh(mesh.nodes, mesh.triangles, np.asarray(tags, dtype=object), mesh.boundary_edges, mesh.boundary_tag, mesh.domain, mesh.nx, mesh.ny)
