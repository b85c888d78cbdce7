"""Matplotlib figures written next to the CSV artifacts."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.tri import Triangulation  # noqa: E402

from .mesh import TriMesh  # noqa: E402


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_nodal_field(mesh: TriMesh, values: np.ndarray, path: str | Path, title: str = "") -> Path:
    tri = Triangulation(mesh.nodes[:, 0], mesh.nodes[:, 1], mesh.triangles)
    fig, ax = plt.subplots(figsize=(5, 4.2))
    cs = ax.tripcolor(tri, values, shading="gouraud", cmap="inferno")
    fig.colorbar(cs, ax=ax)
    ax.set_aspect("equal")
    ax.set_title(title)
    return _save(fig, Path(path))


def plot_line(cols: Mapping[str, np.ndarray], path: str | Path, title: str = "") -> Path:
    """Temperature and both displacement components along a sampled segment, one curve per variant."""
    fig, axes = plt.subplots(3, 1, figsize=(7, 8), sharex=True)
    for ax, prefix in zip(axes, ("theta_", "u1_", "u2_")):
        for key, vals in cols.items():
            if key.startswith(prefix):
                ax.plot(cols["s"], vals, label=key[len(prefix):], lw=1.5 if "reference" in key else 1.0)
        ax.set_ylabel(prefix.rstrip("_"))
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=8)
    axes[0].set_title(title)
    axes[-1].set_xlabel("arc length")
    return _save(fig, Path(path))


def plot_errors(rows: list[tuple[float, str, str, str, float]], path: str | Path) -> Path:
    """Relative errors against time per variant, one panel per (field, norm)."""
    panels = [("T", "l2"), ("T", "h1"), ("D", "l2"), ("D", "h1")]
    fig, axes = plt.subplots(2, 2, figsize=(9, 7))
    for ax, (fld, norm) in zip(axes.ravel(), panels):
        variants = sorted({r[1] for r in rows if r[2] == fld and r[3] == norm})
        for v in variants:
            pts = sorted((r[0], r[4]) for r in rows if r[1] == v and r[2] == fld and r[3] == norm)
            t, e = zip(*pts)
            ax.semilogy(t, e, "o-", label=v, ms=3)
        ax.set_title(f"{fld} {norm}")
        ax.set_xlabel("t")
        ax.grid(alpha=0.3)
        if variants:
            ax.legend(fontsize=8)
    return _save(fig, Path(path))


def plot_coefficients(thetas: np.ndarray, series: Mapping[str, np.ndarray], path: str | Path) -> Path:
    fig, axes = plt.subplots(1, len(series), figsize=(3.2 * len(series), 3))
    for ax, (name, vals) in zip(np.atleast_1d(axes), series.items()):
        ax.plot(thetas, vals, "o-", ms=3)
        ax.set_title(name, fontsize=9)
        ax.set_xlabel("theta")
        ax.grid(alpha=0.3)
    return _save(fig, Path(path))
