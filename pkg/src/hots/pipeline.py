"""Stage orchestration: offline tables, macro run, reconstruction, resolved reference and comparison.

Each stage writes under ``<output>/<stage>/`` a deterministic ``manifest.json``
(config echo, input hashes, statistics) and a separate ``timing.json`` so that
reruns with an unchanged config reproduce identical manifests.
"""

from __future__ import annotations

import hashlib
import json
import logging
import pickle
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cells import OfflineResult, load_offline, run_offline, save_offline, write_offline
from .config import STAGES, RunConfig
from .macro import MacroProblem, MacroRun, Snapshot, run, table_provider
from .mesh import TriMesh, write_field_csv
from .plotting import plot_coefficients, plot_errors, plot_line, plot_nodal_field
from .reconstruction import Reconstructor, sample_line, write_columns
from .reference import compute_errors, emit_report, reference_problem, resolved_mesh

log = logging.getLogger(__name__)


class MissingArtifact(RuntimeError):
    """A stage's input has not been produced yet."""


class StageFailure(RuntimeError):
    """A solver error, re-raised with the stage that hit it."""


@dataclass
class Pipeline:
    config: RunConfig
    out: Path | None = None
    threads: int = 1
    cache_dir: Path | None = None
    events: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.out = Path(self.out or self.config.output)
        self.cache_dir = Path(self.cache_dir or self.config.data.get("cache") or self.out / "cache")
        self._offline: OfflineResult | None = None

    # --- helpers ---
    def stage_dir(self, stage: str) -> Path:
        d = self.out / stage
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _manifest(self, stage: str, extra: dict, wall: float) -> None:
        d = self.stage_dir(stage)
        body = {"stage": stage, "config_hash": self.config.hash(), "offline_key": self.config.offline_key(), **extra, "config": self.config.data}
        (d / "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True, default=_jsonable) + "\n")
        (d / "timing.json").write_text(json.dumps({"wall_seconds": wall}) + "\n")

    @property
    def cache_path(self) -> Path:
        return self.cache_dir / f"offline_{self.config.offline_key()}.pkl"

    def _load_run(self, stage: str) -> MacroRun:
        path = self.out / stage / "run.pkl"
        if not path.is_file():
            raise MissingArtifact(f"{stage} run {path} not found; run the '{stage}' stage first")
        with open(path, "rb") as fh:
            return pickle.load(fh)

    def offline_result(self) -> OfflineResult:
        if self._offline is None:
            if not self.cache_path.is_file():
                raise MissingArtifact(f"offline tables {self.cache_path} not found; run the 'offline' stage first")
            self._offline = load_offline(self.cache_path)
        return self._offline

    def macro_problem(self, mesh: TriMesh, provider) -> MacroProblem:
        d = self.config.data
        m, s = d["macro"], d["solver"]
        return MacroProblem(
            mesh,
            provider,
            float(m["heat_source"]),
            tuple(float(v) for v in m["body_force"]),
            self.config.boundary(),
            float(d["reference_temperature"]),
            float(m["dt"]),
            float(m["t_end"]),
            initial_temperature=float(m["initial_temperature"]),
            omega=float(s["omega"]),
            tol_theta=float(s["tol_theta"]),
            tol_u=float(s["tol_u"]),
            max_iter=int(s["max_iter"]),
            store_every=int(m["store_every"]),
        )

    # --- stages ---
    def offline(self) -> dict:
        t0 = time.perf_counter()
        hit = self.cache_path.is_file()
        if hit:
            self.events.append("offline cache hit")
            log.info("offline cache hit %s", self.cache_path)
            off = self.offline_result()
        else:
            self.events.append("offline solved")
            d = self.config.data["offline"]
            off = run_offline(self.config.geometry(), self.config.materials(), self.config.thetas(), int(d["micro_resolution"]), int(d["meso_resolution"]), self.threads)
            self.cache_dir.mkdir(parents=True, exist_ok=True)
            tmp = self.cache_path.with_suffix(".tmp")
            save_offline(off, tmp)
            tmp.replace(self.cache_path)
            self._offline = off
        d = self.stage_dir("offline")
        write_offline(off, d)
        plot_coefficients(
            off.thetas,
            {"conductivity 11": off.macro.conductivity[:, 0, 0], "stiffness 1111": off.macro.stiffness[:, 0, 0, 0, 0], "capacity": off.macro.capacity},
            d / "macro_coefficients.png",
        )
        stats = {
            "cache_hit": hit,
            "cache_file": self.cache_path.name,
            "dofs": self.dof_counts(off),
            "mesh_hashes": {t.name: t.mesh.fingerprint() for t in [*off.micro.values(), off.meso]},
        }
        self._manifest("offline", stats, time.perf_counter() - t0)
        return stats

    def dof_counts(self, off: OfflineResult | None = None) -> dict[str, int]:
        """Unknowns per mesh: three per node (temperature plus two displacements)."""
        off = off or self.offline_result()
        counts = {f"micro:{n}": 3 * t.mesh.n_nodes for n, t in off.micro.items()}
        counts["meso"] = 3 * off.meso.mesh.n_nodes
        counts["macro"] = 3 * self.config.macro_mesh().n_nodes
        return counts

    def online(self) -> dict:
        t0 = time.perf_counter()
        off = self.offline_result()
        mesh = self.config.macro_mesh()
        result = self._solve("online", self.macro_problem(mesh, table_provider(off)))
        stats = self._write_run("online", mesh, result)
        self._manifest("online", stats, time.perf_counter() - t0)
        return stats

    def reference(self) -> dict:
        t0 = time.perf_counter()
        r = self.config.data["reference"]
        mesh = resolved_mesh(self.config.geometry(), tuple(self.config.data["macro"]["domain"]), int(r["cells_per_micro"]), int(r["max_dofs"]))
        template = self.macro_problem(mesh, None)
        result = self._solve("reference", reference_problem(template, mesh, self.config.materials()))
        stats = self._write_run("reference", mesh, result)
        self._manifest("reference", stats, time.perf_counter() - t0)
        return stats

    def _solve(self, stage: str, problem: MacroProblem) -> MacroRun:
        try:
            return run(problem)
        except Exception as exc:
            raise StageFailure(f"{stage}: {type(exc).__name__}: {exc}") from exc

    def _write_run(self, stage: str, mesh: TriMesh, result: MacroRun) -> dict:
        d = self.stage_dir(stage)
        snaps = d / "snapshots"
        snaps.mkdir(exist_ok=True)
        for k, s in enumerate(result.snapshots):
            write_field_csv(mesh, snaps / f"snapshot_{k:05d}.csv", {"theta": s.theta, "u1": s.u[:, 0], "u2": s.u[:, 1]})
        with open(d / "run.pkl", "wb") as fh:
            pickle.dump(result, fh, protocol=pickle.HIGHEST_PROTOCOL)
        (d / "mesh.pkl").write_bytes(pickle.dumps(mesh, protocol=pickle.HIGHEST_PROTOCOL))
        final = result.final
        plot_nodal_field(mesh, final.theta, d / "theta_final.png", f"temperature, t={final.t:g}")
        plot_nodal_field(mesh, np.linalg.norm(final.u, axis=1), d / "displacement_final.png", f"|u|, t={final.t:g}")
        return {
            "nodes": mesh.n_nodes,
            "elements": mesh.n_elements,
            "dofs": 3 * mesh.n_nodes,
            "mesh_hash": mesh.fingerprint(),
            "times": [s.t for s in result.snapshots],
            "iterations": result.iterations,
            "max_iterations": max(result.iterations, default=0),
            "final_residual": result.max_residuals[-1] if result.max_residuals else None,
            "finite": bool(all(np.isfinite(s.theta).all() and np.isfinite(s.u).all() for s in result.snapshots)),
            "theta_range": [float(final.theta.min()), float(final.theta.max())],
            "max_displacement": float(np.abs(final.u).max()),
        }

    def _mesh(self, stage: str) -> TriMesh:
        path = self.out / stage / "mesh.pkl"
        if not path.is_file():
            raise MissingArtifact(f"{stage} mesh {path} not found; run the '{stage}' stage first")
        return pickle.loads(path.read_bytes())

    def reconstruct(self) -> dict:
        t0 = time.perf_counter()
        off = self.offline_result()
        online = self._load_run("online")
        mesh = self._mesh("online")
        rc = self.config.data["reconstruction"]
        recon = Reconstructor(off, float(self.config.data["reference_temperature"]))
        final = online.final
        cols = sample_line(recon, mesh, final, rc["line"]["start"], rc["line"]["end"], int(rc["line"]["n_points"]), tuple(rc["variants"]))
        ref_path = self.out / "reference" / "run.pkl"
        if ref_path.is_file():
            ref = self._load_run("reference")
            rmesh = self._mesh("reference")
            snap = _match(ref, final.t)
            if snap is not None:
                pts = np.column_stack([cols["x1"], cols["x2"]])
                cols["theta_reference"] = rmesh.interpolate(snap.theta, pts)
                u = rmesh.interpolate(snap.u, pts)
                cols["u1_reference"], cols["u2_reference"] = u[:, 0], u[:, 1]
        d = self.stage_dir("reconstruct")
        write_columns(d / "line.csv", cols)
        plot_line(cols, d / "line.png", f"t={final.t:g}")
        stats = {"t": final.t, "points": len(cols["s"]), "columns": list(cols)}
        self._manifest("reconstruct", stats, time.perf_counter() - t0)
        return stats

    def compare(self) -> dict:
        t0 = time.perf_counter()
        off = self.offline_result()
        online, ref = self._load_run("online"), self._load_run("reference")
        mesh, rmesh = self._mesh("online"), self._mesh("reference")
        variants = tuple(self.config.data["reconstruction"]["variants"])
        recon = Reconstructor(off, float(self.config.data["reference_temperature"]))
        times, reference, families = [], {}, {}
        for snap in online.snapshots[1:]:
            rsnap = _match(ref, snap.t)
            if rsnap is None:
                continue
            times.append(snap.t)
            reference[snap.t] = (rsnap.theta, rsnap.u)
            families[snap.t] = recon.evaluate(mesh, snap, rmesh.nodes, variants)
        rep = compute_errors(rmesh, times, reference, families)
        dofs = self.dof_counts(off)
        rep.metadata = {
            "reference dofs": 3 * rmesh.n_nodes,
            "multiscale dofs": sum(dofs.values()),
            "dof ratio": 3 * rmesh.n_nodes / sum(dofs.values()),
        }
        d = self.stage_dir("compare")
        text = emit_report(rep, d)
        if rep.rows:
            plot_errors(rep.rows, d / "errors.png")
        print(text, end="")
        stats = {"times": times, "rows": len(rep.rows), **rep.metadata}
        self._manifest("compare", stats, time.perf_counter() - t0)
        self.report = rep
        return stats

    def run_stage(self, stage: str) -> dict:
        if stage == "all":
            return {s: self.run_stage(s) for s in self.config.data["stages"]}
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        log.info("stage %s", stage)
        return getattr(self, stage)()


def _match(result: MacroRun, t: float) -> Snapshot | None:
    for s in result.snapshots:
        if abs(s.t - t) <= 1e-9 * max(1.0, abs(t)):
            return s
    return None


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    return str(obj)


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
