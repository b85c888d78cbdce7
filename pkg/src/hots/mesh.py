"""Structured crossed-triangle meshes with region and boundary tags."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

SIDES = ("bottom", "right", "top", "left")
_GEO_TOL = 1e-12


@dataclass(frozen=True)
class Region:
    """Axis-aligned square/rectangle or circle used to tag elements.

    ``size`` is the side length for squares, ``(width, height)`` for
    rectangles and the radius for circles.
    """

    tag: str
    shape: str
    center: tuple[float, float]
    size: float | tuple[float, float]

    def __post_init__(self):
        if self.shape not in ("square", "rect", "circle"):
            raise ValueError(f"unknown region shape {self.shape!r}")

    def half_extents(self) -> tuple[float, float]:
        if self.shape == "rect":
            w, h = self.size  # type: ignore[misc]
            return 0.5 * w, 0.5 * h
        s = float(self.size)  # type: ignore[arg-type]
        return (0.5 * s, 0.5 * s) if self.shape == "square" else (s, s)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        dx = pts[:, 0] - self.center[0]
        dy = pts[:, 1] - self.center[1]
        if self.shape == "circle":
            return dx * dx + dy * dy <= float(self.size) ** 2 + _GEO_TOL
        hx, hy = self.half_extents()
        return (np.abs(dx) <= hx + _GEO_TOL) & (np.abs(dy) <= hy + _GEO_TOL)

    def area(self) -> float:
        if self.shape == "circle":
            return float(np.pi * float(self.size) ** 2)
        hx, hy = self.half_extents()
        return 4.0 * hx * hy

    def bbox(self) -> tuple[float, float, float, float]:
        hx, hy = self.half_extents()
        return (self.center[0] - hx, self.center[0] + hx, self.center[1] - hy, self.center[1] + hy)


@dataclass
class TriMesh:
    nodes: np.ndarray
    triangles: np.ndarray
    region_tag: np.ndarray
    boundary_edges: np.ndarray
    boundary_tag: np.ndarray
    domain: tuple[float, float, float, float]
    nx: int
    ny: int
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.triangles.shape[0]

    @property
    def areas(self) -> np.ndarray:
        if "areas" not in self._cache:
            self._geometry()
        return self._cache["areas"]

    @property
    def shape_gradients(self) -> np.ndarray:
        """Constant gradients of the three P1 basis functions, shape (M, 3, 2)."""
        if "grads" not in self._cache:
            self._geometry()
        return self._cache["grads"]

    @property
    def centroids(self) -> np.ndarray:
        return self.nodes[self.triangles].mean(axis=1)

    def _geometry(self) -> None:
        p = self.nodes[self.triangles]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        if np.any(det <= 0):
            bad = int(np.argmin(det))
            raise ValueError(f"triangle {bad} has non-positive signed area")
        inv = np.empty((len(det), 2, 2))
        inv[:, 0, 0] = e2[:, 1] / det
        inv[:, 0, 1] = -e2[:, 0] / det
        inv[:, 1, 0] = -e1[:, 1] / det
        inv[:, 1, 1] = e1[:, 0] / det
        ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
        # grad(phi_a) = J^{-T} grad_ref(phi_a)
        self._cache["grads"] = np.einsum("ak,ekj->eaj", ref, inv)
        self._cache["areas"] = 0.5 * det

    def tag_names(self) -> list[str]:
        return sorted(set(self.region_tag.tolist()))

    def boundary_nodes(self, tags: Sequence[str] | None = None) -> np.ndarray:
        """Sorted unique node ids on the boundary edges carrying any of ``tags``."""
        if tags is None:
            mask = np.ones(len(self.boundary_tag), dtype=bool)
        else:
            unknown = set(tags) - set(self.boundary_tag.tolist())
            if unknown:
                raise KeyError(f"unknown boundary tag(s): {sorted(unknown)}")
            mask = np.isin(self.boundary_tag, list(tags))
        return np.unique(self.boundary_edges[mask])

    def locate(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Element index and barycentric weights for points in the domain.

        Uses the structured layout: bucket into the grid cell, then pick one of
        the four crossed triangles. Points are clipped into the domain.
        """
        x0, x1, y0, y1 = self.domain
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        sx = (np.clip(pts[:, 0], x0, x1) - x0) / (x1 - x0) * self.nx
        sy = (np.clip(pts[:, 1], y0, y1) - y0) / (y1 - y0) * self.ny
        i = np.minimum(np.floor(sx).astype(int), self.nx - 1)
        j = np.minimum(np.floor(sy).astype(int), self.ny - 1)
        u = sx - i
        v = sy - j
        # 0 bottom, 1 right, 2 top, 3 left
        quad = np.where(
            v <= np.minimum(u, 1.0 - u),
            0,
            np.where(u >= np.maximum(v, 1.0 - v), 1, np.where(v >= np.maximum(u, 1.0 - u), 2, 3)),
        )
        elem = 4 * (j * self.nx + i) + quad
        p = self.nodes[self.triangles[elem]]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        r = np.column_stack([np.clip(pts[:, 0], x0, x1), np.clip(pts[:, 1], y0, y1)]) - p[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        l1 = (r[:, 0] * e2[:, 1] - r[:, 1] * e2[:, 0]) / det
        l2 = (e1[:, 0] * r[:, 1] - e1[:, 1] * r[:, 0]) / det
        bary = np.column_stack([1.0 - l1 - l2, l1, l2])
        return elem, bary

    def interpolate(self, values: np.ndarray, pts: np.ndarray) -> np.ndarray:
        """P1 interpolation of nodal ``values`` (leading axis = nodes) at ``pts``."""
        elem, bary = self.locate(pts)
        vals = values[self.triangles[elem]]
        return np.einsum("pa,pa...->p...", bary, vals)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.nodes).tobytes())
        h.update(np.ascontiguousarray(self.triangles).tobytes())
        h.update("|".join(self.region_tag.tolist()).encode())
        return h.hexdigest()[:16]


def tag_points(pts: np.ndarray, regions: Sequence[Region], default_tag: str) -> np.ndarray:
    """Tag of the smallest region containing each point, else ``default_tag``."""
    tags = np.full(len(pts), default_tag, dtype=object)
    best = np.full(len(pts), np.inf)
    for reg in regions:
        inside = reg.contains(pts) & (reg.area() < best)
        tags[inside] = reg.tag
        best[inside] = reg.area()
    return tags


def build_rect_mesh(
    domain: tuple[float, float, float, float] = (0.0, 1.0, 0.0, 1.0),
    nx: int = 1,
    ny: int = 1,
    regions: Sequence[Region] = (),
    default_tag: str = "matrix",
) -> TriMesh:
    """Crossed-triangle mesh of a rectangle ``(x0, x1, y0, y1)``.

    Every grid cell is split into four triangles around an added center node.
    Each triangle takes the tag of the smallest region containing its centroid.
    """
    x0, x1, y0, y1 = map(float, domain)
    if nx < 1 or ny < 1:
        raise ValueError("nx and ny must be >= 1")
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"degenerate rectangle {domain}")
    for reg in regions:
        bx0, bx1, by0, by1 = reg.bbox()
        if bx0 < x0 - 1e-9 or bx1 > x1 + 1e-9 or by0 < y0 - 1e-9 or by1 > y1 + 1e-9:
            raise ValueError(f"region {reg.tag!r} lies outside the domain")

    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    gx, gy = np.meshgrid(xs, ys)
    corners = np.column_stack([gx.ravel(), gy.ravel()])
    cx = 0.5 * (xs[:-1] + xs[1:])
    cy = 0.5 * (ys[:-1] + ys[1:])
    hx, hy = np.meshgrid(cx, cy)
    centers = np.column_stack([hx.ravel(), hy.ravel()])
    nodes = np.vstack([corners, centers])

    jj, ii = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    ii = ii.ravel()
    jj = jj.ravel()
    v00 = jj * (nx + 1) + ii
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    c = (nx + 1) * (ny + 1) + jj * nx + ii
    tris = np.stack(
        [
            np.column_stack([v00, v10, c]),
            np.column_stack([v10, v11, c]),
            np.column_stack([v11, v01, c]),
            np.column_stack([v01, v00, c]),
        ],
        axis=1,
    ).reshape(-1, 3)

    tags = tag_points(nodes[tris].mean(axis=1), regions, default_tag)

    bottom = np.column_stack([np.arange(nx), np.arange(1, nx + 1)])
    top_row = ny * (nx + 1)
    top = np.column_stack([top_row + np.arange(1, nx + 1), top_row + np.arange(nx)])
    right = np.column_stack([np.arange(ny) * (nx + 1) + nx, np.arange(1, ny + 1) * (nx + 1) + nx])
    left = np.column_stack([np.arange(1, ny + 1) * (nx + 1), np.arange(ny) * (nx + 1)])
    edges = np.vstack([bottom, right, top, left])
    etags = np.array(["bottom"] * nx + ["right"] * ny + ["top"] * nx + ["left"] * ny, dtype=object)

    return TriMesh(
        nodes=nodes,
        triangles=tris.astype(np.int64),
        region_tag=tags,
        boundary_edges=edges.astype(np.int64),
        boundary_tag=etags,
        domain=(x0, x1, y0, y1),
        nx=nx,
        ny=ny,
    )


def write_mesh(mesh: TriMesh, path: str | Path) -> None:
    """Plain-text export: one record per line, prefixed N (node), E (element), B (boundary edge)."""
    lines = [f"# nodes {mesh.n_nodes} elements {mesh.n_elements} boundary_edges {len(mesh.boundary_edges)}"]
    lines += [f"N {i} {x:.17g} {y:.17g}" for i, (x, y) in enumerate(mesh.nodes)]
    lines += [f"E {e} {a} {b} {c} {t}" for e, ((a, b, c), t) in enumerate(zip(mesh.triangles, mesh.region_tag))]
    lines += [f"B {a} {b} {t}" for (a, b), t in zip(mesh.boundary_edges, mesh.boundary_tag)]
    Path(path).write_text("\n".join(lines) + "\n")


def write_field_csv(mesh: TriMesh, path: str | Path, columns: dict[str, np.ndarray]) -> None:
    """CSV with ``node_id,x1,x2`` followed by one column per named nodal array."""
    names = list(columns)
    data = [np.arange(mesh.n_nodes), mesh.nodes[:, 0], mesh.nodes[:, 1]] + [np.asarray(columns[n]) for n in names]
    header = ",".join(["node_id", "x1", "x2"] + names)
    np.savetxt(path, np.column_stack(data), delimiter=",", header=header, comments="", fmt="%.17g")
