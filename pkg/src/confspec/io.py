"""Run configuration, run records and field export.

Configuration files are flat ``key = value`` text. Values are JSON literals
(``1e-4``, ``true``, ``[0.1, 0.2]``, ``"text"``, ``null``); a bare word such
as ``maximize`` is read as a string. ``#`` starts a comment.

A run directory holds ``config.echo``, ``trajectory.jsonl``,
``certificate.json`` and ``fields/``. Every file is written under a temporary
name and renamed into place, and a run is assembled in a sibling temporary
directory that is renamed only once complete.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from .exceptions import ConfigError
from .geometry import SimplicialManifold, read_mesh, write_mesh

__all__ = [
    "SCHEMA",
    "RunConfig",
    "parse_config",
    "load_config",
    "dump_config",
    "atomic_write",
    "RunDirectory",
    "load_record",
    "write_array",
    "read_array",
    "write_csv",
    "write_vtk",
    "read_vtk_cell_count",
]

FLOAT_FMT = "%.17g"

# key: (type, default, doc). type "float?" admits null.
SCHEMA: Dict[str, tuple] = {
    "mesh": ("str", "icosphere", "builder: icosphere | sphere3 | torus | file"),
    "mesh_level": ("int", 3, "icosphere subdivisions, sphere3 refinement or torus resolution"),
    "mesh_dim": ("int", 2, "torus dimension n"),
    "mesh_periods": ("list", None, "torus periods (default all ones)"),
    "mesh_path": ("str?", None, "mesh file for mesh = file"),
    "mode": ("str", "maximize", "maximize | nu | harmonic | certify"),
    "k": ("int", 1, "eigenvalue index, k >= 1"),
    "n": ("int?", None, "manifold dimension; checked against the mesh when given"),
    "init": ("str", "perturbed", "uniform | perturbed"),
    "init_amplitude": ("float", 0.2, "relative amplitude of the smooth initial perturbation"),
    "delta_stop": ("float?", None, "absolute pseudo-norm threshold (default rel_delta * lambar)"),
    "rel_delta": ("float", 1e-4, "relative pseudo-norm threshold"),
    "max_iters": ("int", 200, "ascent iteration cap"),
    "mult_tol": ("float", 1e-6, "relative gap for eigenvalue multiplicity groups"),
    "eig_tol": ("float", 1e-10, "eigenpair residual tolerance"),
    "h0": ("float", 0.5, "initial line-search step"),
    "budget": ("int", 200, "direction-finder gradient evaluations"),
    "cluster_tol": ("float", 1e-2, "initial ascent cluster width (relative)"),
    "cluster_min": ("float", 1e-4, "final ascent cluster width (relative)"),
    "step_direction": ("str", "fisher", "fisher | pseudo"),
    "alpha_norm": ("str", "functional", "functional | half"),
    "smoothing": ("bool", False, "one-ring averaging of the step direction"),
    "cert_cluster_tol": ("float", 1e-2, "eigenvalue group width used by the certificate"),
    "p": ("int?", None, "target sphere dimension (default: multiplicity - 1)"),
    "tau0": ("float?", None, "initial regularizer (default mean B)"),
    "J": ("int", 20, "number of tau halvings"),
    "harmonic_tol": ("float", 1e-8, "EL residual tolerance"),
    "ball_center": ("int", 0, "ball center vertex for harmonic replacement"),
    "ball_radius": ("float", 0.3, "ball radius for harmonic replacement"),
    "kappa0": ("float", 1.2, "embedding exponent"),
    "sobolev_radius": ("float", 0.3, "ball radius of the embedding probe"),
    "sobolev_samples": ("int", 4, "test functions per ball"),
    "radii": ("list", None, "concentration-scan radii (default 6 values from 2h to diam/4)"),
    "subsample": ("int", 64, "concentration-scan centers"),
    "scan": ("bool", True, "run the concentration scan"),
    "seed": ("int", 0, "seed of the single random generator"),
    "out": ("str?", None, "output directory (overridden by --out)"),
}

POSITIVE = {"init_amplitude", "rel_delta", "mult_tol", "eig_tol", "h0", "cluster_tol", "cluster_min",
            "cert_cluster_tol", "harmonic_tol", "ball_radius", "sobolev_radius"}
CHOICES = {
    "mesh": ("icosphere", "sphere3", "torus", "file"),
    "mode": ("maximize", "nu", "harmonic", "certify"),
    "init": ("uniform", "perturbed"),
    "step_direction": ("fisher", "pseudo"),
    "alpha_norm": ("functional", "half"),
}


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration; ``values`` maps every schema key to a typed value."""

    values: Dict[str, Any]

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    def replace(self, **kw) -> "RunConfig":
        v = dict(self.values)
        v.update(kw)
        return validate(v)


def _coerce(key, typ, raw):
    optional = typ.endswith("?")
    base = typ.rstrip("?")
    if raw is None:
        if optional or SCHEMA[key][1] is None:
            return None
        raise TypeError("null not allowed")
    if base == "int":
        if isinstance(raw, bool) or not isinstance(raw, (int, float)) or int(raw) != raw:
            raise TypeError("expected an integer")
        return int(raw)
    if base == "float":
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise TypeError("expected a number")
        return float(raw)
    if base == "bool":
        if not isinstance(raw, bool):
            raise TypeError("expected true or false")
        return raw
    if base == "str":
        if not isinstance(raw, str):
            raise TypeError("expected a string")
        return raw
    if base == "list":
        if not isinstance(raw, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in raw):
            raise TypeError("expected a list of numbers")
        return [float(x) for x in raw]
    raise TypeError(f"unknown type {typ}")  # pragma: no cover


def validate(values: Dict[str, Any]) -> RunConfig:
    """Type-check and range-check ``values``; raise ConfigError listing every bad key."""
    bad, msgs, out = [], [], {}
    for key in values:
        if key not in SCHEMA:
            bad.append(key)
            msgs.append(f"{key}: unknown key")
    for key, (typ, default, _) in SCHEMA.items():
        raw = values.get(key, default)
        try:
            out[key] = _coerce(key, typ, raw)
        except TypeError as exc:
            bad.append(key)
            msgs.append(f"{key}: {exc}")
    if not bad:
        if out["k"] < 1:
            bad.append("k")
            msgs.append("k: must satisfy k >= 1")
        for key in POSITIVE:
            if out[key] is not None and not out[key] > 0:
                bad.append(key)
                msgs.append(f"{key}: must be > 0")
        for key in ("delta_stop", "tau0"):
            if out[key] is not None and not out[key] > 0:
                bad.append(key)
                msgs.append(f"{key}: must be > 0")
        for key in ("max_iters", "budget", "J", "subsample", "sobolev_samples"):
            if out[key] < 0 or (key in ("budget", "subsample", "sobolev_samples") and out[key] == 0):
                bad.append(key)
                msgs.append(f"{key}: out of range")
        for key, allowed in CHOICES.items():
            if out[key] not in allowed:
                bad.append(key)
                msgs.append(f"{key}: must be one of {', '.join(allowed)}")
        if out["mesh"] == "file" and not out["mesh_path"]:
            bad.append("mesh_path")
            msgs.append("mesh_path: required for mesh = file")
        if out["mesh_level"] < 0:
            bad.append("mesh_level")
            msgs.append("mesh_level: must be >= 0")
        if out["mesh_dim"] not in (2, 3):
            bad.append("mesh_dim")
            msgs.append("mesh_dim: must be 2 or 3")
        if out["n"] is not None and out["n"] not in (2, 3):
            bad.append("n")
            msgs.append("n: must be 2 or 3")
        if out["p"] is not None and out["p"] < 1:
            bad.append("p")
            msgs.append("p: must be >= 1")
        if out["radii"] is not None and any(r <= 0 for r in out["radii"]):
            bad.append("radii")
            msgs.append("radii: must be positive")
        if out["mesh_periods"] is not None and any(x <= 0 for x in out["mesh_periods"]):
            bad.append("mesh_periods")
            msgs.append("mesh_periods: must be positive")
        if not 1.0 < out["kappa0"]:
            bad.append("kappa0")
            msgs.append("kappa0: must exceed 1")
    if bad:
        raise ConfigError("; ".join(msgs), keys=sorted(set(bad)))
    return RunConfig(out)


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` lines into a validated :class:`RunConfig`."""
    values, bad, msgs = {}, [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip() if not _in_string_comment(line) else line.strip()
        if not s:
            continue
        if "=" not in s:
            bad.append(f"line{lineno}")
            msgs.append(f"line {lineno}: expected key = value")
            continue
        key, raw = (x.strip() for x in s.split("=", 1))
        if key in values:
            bad.append(key)
            msgs.append(f"{key}: duplicate key")
            continue
        try:
            values[key] = json.loads(raw)
        except json.JSONDecodeError:
            values[key] = raw
    if bad:
        raise ConfigError("; ".join(msgs), keys=bad)
    return validate(values)


def _in_string_comment(line: str) -> bool:
    """True when a ``#`` occurs only inside a quoted value."""
    if "#" not in line or '"' not in line:
        return False
    head = line.split("#", 1)[0]
    return head.count('"') % 2 == 1


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError:
        raise
    return parse_config(text)


def dump_config(cfg: RunConfig) -> str:
    """Canonical ``key = value`` text (sorted keys, JSON values)."""
    lines = [f"{k} = {json.dumps(cfg.values[k])}" for k in sorted(cfg.values)]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# persistence

def atomic_write(path, data, mode: str = "w") -> None:
    """Write ``data`` to a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_array(path, a) -> None:
    """Whitespace-separated text, 17 significant digits, one row per line."""
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    lines = [" ".join(FLOAT_FMT % x for x in row) for row in a]
    atomic_write(path, "\n".join(lines) + "\n")


def read_array(path) -> np.ndarray:
    a = np.loadtxt(path, dtype=float, ndmin=2)
    return a[:, 0] if a.shape[1] == 1 else a


class RunDirectory:
    """Assemble a run in a temporary sibling directory and publish it by rename.

    ``trajectory.jsonl`` is appended line by line while the run progresses
    (inside the temporary directory); :meth:`commit` moves the finished
    directory to ``path``, replacing an older run there.
    """

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(dir=self.path.parent, prefix=f".{self.path.name}.", suffix=".partial"))
        (self.tmp / "fields").mkdir()
        self._traj = open(self.tmp / "trajectory.jsonl", "w")

    def append(self, record: dict) -> None:
        self._traj.write(json.dumps(record, sort_keys=True, default=_json_default) + "\n")
        self._traj.flush()

    def write_json(self, name: str, obj) -> None:
        atomic_write(self.tmp / name, json.dumps(obj, sort_keys=True, indent=1, default=_json_default) + "\n")

    def write_text(self, name: str, text: str) -> None:
        atomic_write(self.tmp / name, text)

    def write_field(self, name: str, a) -> None:
        write_array(self.tmp / "fields" / f"{name}.txt", a)

    def write_mesh(self, mesh: SimplicialManifold) -> None:
        write_mesh(mesh, self.tmp / "fields" / "mesh.txt")

    def commit(self) -> Path:
        self._traj.close()
        if self.path.exists():
            old = self.path.with_name(f".{self.path.name}.old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(self.path, old)
            os.replace(self.tmp, self.path)
            shutil.rmtree(old)
        else:
            os.replace(self.tmp, self.path)
        return self.path

    def abort(self) -> None:
        self._traj.close()
        shutil.rmtree(self.tmp, ignore_errors=True)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o)}")


def load_record(path) -> dict:
    """Read a run directory into a dict with the mesh and all stored fields."""
    path = Path(path)
    if not (path / "certificate.json").exists():
        raise FileNotFoundError(f"{path} is not a run directory")
    rec = json.loads((path / "certificate.json").read_text())
    traj = []
    tp = path / "trajectory.jsonl"
    if tp.exists():
        traj = [json.loads(line) for line in tp.read_text().splitlines() if line.strip()]
    fields = {}
    for f in sorted((path / "fields").glob("*.txt")):
        if f.stem != "mesh":
            fields[f.stem] = read_array(f)
    rec["trajectory"] = traj
    rec["fields"] = fields
    rec["mesh"] = read_mesh(path / "fields" / "mesh.txt")
    rec["config"] = parse_config((path / "config.echo").read_text()) if (path / "config.echo").exists() else None
    rec["path"] = str(path)
    return rec


# --------------------------------------------------------------------------
# field export

def write_csv(path, values) -> None:
    """``id,value`` CSV, one row per entity, 17 significant digits."""
    values = np.asarray(values, dtype=float).ravel()
    lines = ["id,value"] + [f"{i},{FLOAT_FMT % v}" for i, v in enumerate(values)]
    atomic_write(path, "\n".join(lines) + "\n")


_VTK_CELL = {2: 5, 3: 10}  # triangle, tetra


def write_vtk(path, mesh: SimplicialManifold, name: str, values, location: str) -> None:
    """Legacy ASCII VTK unstructured grid with one scalar field.

    ``location`` is ``"cell"`` or ``"point"``. Torus meshes are written in
    their fundamental-domain coordinates (cells crossing the seam appear
    stretched in viewers). Coordinates are padded to three components.
    """
    values = np.asarray(values, dtype=float).ravel()
    X = mesh.vertices
    if X.shape[1] < 3:
        X = np.c_[X, np.zeros((X.shape[0], 3 - X.shape[1]))]
    elif X.shape[1] > 3:
        X = X[:, :3]
    k = mesh.dim + 1
    out = ["# vtk DataFile Version 3.0", f"{name}", "ASCII", "DATASET UNSTRUCTURED_GRID",
           f"POINTS {mesh.n_vertices} double"]
    out += [" ".join(FLOAT_FMT % x for x in row) for row in X]
    out.append(f"CELLS {mesh.n_cells} {mesh.n_cells * (k + 1)}")
    out += [f"{k} " + " ".join(str(int(i)) for i in c) for c in mesh.cells]
    out.append(f"CELL_TYPES {mesh.n_cells}")
    out += [str(_VTK_CELL[mesh.dim])] * mesh.n_cells
    if location == "cell":
        if values.size != mesh.n_cells:
            raise ValueError("cell field size mismatch")
        out.append(f"CELL_DATA {mesh.n_cells}")
    elif location == "point":
        if values.size != mesh.n_vertices:
            raise ValueError("point field size mismatch")
        out.append(f"POINT_DATA {mesh.n_vertices}")
    else:
        raise ValueError("location must be 'cell' or 'point'")
    out += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
    out += [FLOAT_FMT % v for v in values]
    atomic_write(path, "\n".join(out) + "\n")


def read_vtk_cell_count(path) -> int:
    """Number of cells declared in a legacy VTK file."""
    for line in Path(path).read_text().splitlines():
        if line.startswith("CELLS "):
            return int(line.split()[1])
    raise ValueError("no CELLS section")
