"""Command line: ``confspec {mesh,run,export,compare,certify}``.

Exit codes: 0 ok, 2 invalid input, 3 solver failure, 4 I/O error, 1 for
anything unexpected. Errors are
printed to stderr as one JSON object ``{"error": ..., "message": ..., "keys": [...]}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .certify import (certify_state, concentration_scan, density_fields, normalized_view,
                      sobolev_embedding_check)
from .estimators import ConformalSpectrumMaximizer, initial_densities, smooth_perturbation
from .exceptions import ConfigError, ConfspecError, SolverFailure
from .geometry import (SimplicialManifold, build_flat_torus, build_icosphere, build_sphere3, geodesic_ball,
                       read_mesh, write_mesh)
from .io import RunConfig, RunDirectory, dump_config, load_config, load_record, write_csv, write_vtk
from .nharmonic import (SphereMap, bochner_check, el_residual, eps_regularity_check, harmonic_replacement,
                        tau_energy)
from .spectrum import DensityPair, compute_spectrum, normalized_eigenvalue

logger = logging.getLogger(__name__)

__all__ = ["main", "build_mesh", "execute", "export_field", "available_fields", "compare_records",
           "recertify"]

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4


# --------------------------------------------------------------------------
# orchestration

def build_mesh(cfg: RunConfig) -> SimplicialManifold:
    if cfg.mesh == "icosphere":
        mesh = build_icosphere(cfg.mesh_level)
    elif cfg.mesh == "sphere3":
        mesh = build_sphere3(cfg.mesh_level)
    elif cfg.mesh == "torus":
        mesh = build_flat_torus(cfg.mesh_dim, cfg.mesh_level, cfg.mesh_periods)
    else:
        mesh = read_mesh(cfg.mesh_path)
    if cfg.n is not None and cfg.n != mesh.dim:
        raise ConfigError(f"n: config says {cfg.n} but the mesh has dimension {mesh.dim}", keys=["n"])
    return mesh


def _radii(cfg, mesh):
    if cfg.radii is not None:
        return cfg.radii
    return list(np.geomspace(2 * mesh.h, 0.25 * mesh.diameter(), 6))


def _spectral_summary(mesh, cfg, densities, spectrum, rng, k):
    """Certificate, concentration scan and embedding probe of a final pair."""
    cert = certify_state(mesh, densities, spectrum, k, cfg.cert_cluster_tol)
    d, spec = normalized_view(mesh, densities, spectrum)
    out = dict(lambda_k=float(spec.values[k]), eigenvalues=[float(x) for x in spec.values],
               multiplicity=int(spec.multiplicity(k)), floor_influence=float(spectrum.floor_influence),
               certificate=cert.to_dict(), energy_gap_rel=cert.energy_gap_rel)
    if cfg.scan:
        rep = concentration_scan(mesh, d, float(spec.values[k]), _radii(cfg, mesh), cfg.subsample, rng)
        out["certificate"]["bad_points"] = [list(f) for f in rep.flagged]
        out["n_bad_points"] = len(rep.flagged)
        out["scan"] = dict(threshold=rep.threshold, scanned=len(rep.scanned), skipped=rep.skipped)
    n = mesh.dim
    if 1 < cfg.kappa0 < n / (n - 1):
        f = d.conformal_factor(n)
        out["sobolev_ratio"] = float(sobolev_embedding_check(mesh, f, cfg.kappa0, cfg.sobolev_radius,
                                                             cfg.sobolev_samples, rng=rng))
    fields = dict(alpha=d.alpha, beta=d.beta, eigenvectors=spec.vectors, Phi=cert.Phi)
    return out, fields


def _run_spectral(cfg, mesh, rd, rng, result):
    est = ConformalSpectrumMaximizer(
        k=cfg.k, mode="nu" if cfg.mode == "nu" else "maximize", init=cfg.init,
        init_amplitude=cfg.init_amplitude, delta_stop=cfg.delta_stop, rel_delta=cfg.rel_delta,
        max_iters=cfg.max_iters, mult_tol=cfg.mult_tol, eig_tol=cfg.eig_tol, h0=cfg.h0, budget=cfg.budget,
        cluster_tol=cfg.cluster_tol, cluster_min=cfg.cluster_min, step_direction=cfg.step_direction,
        alpha_norm=cfg.alpha_norm, smoothing=cfg.smoothing, cert_cluster_tol=cfg.cert_cluster_tol,
        random_state=rng)
    written = [0]

    def cb(state):
        for rec in state.history[written[0]:]:
            rd.append(rec)
        written[0] = len(state.history)

    est.fit(mesh, callback=cb)
    for rec in est.history_[written[0]:]:
        rd.append(rec)
    st = est.state_
    result.update(lambda_bar=st.lambda_bar, iterations=st.iteration, reason=st.reason,
                  pseudo_norm=st.pseudo_norm)
    if cfg.mode == "nu":
        n = mesh.dim
        result["nu"] = est.nu_
        result["volume_factor"] = mesh.total_volume ** ((n - 2) / n)
    summary, fields = _spectral_summary(mesh, cfg, st.densities, st.spectrum, rng, cfg.k)
    result.update(summary)
    return fields


def _run_certify(cfg, mesh, rd, rng, result):
    d0 = initial_densities(mesh, cfg.init, cfg.init_amplitude, rng).with_(alpha_norm=cfg.alpha_norm)
    spec = compute_spectrum(mesh, d0, cfg.k, tol=cfg.eig_tol, mult_tol=cfg.mult_tol)
    lb = normalized_eigenvalue(mesh, d0, spec, cfg.k)
    rd.append(dict(iter=0, lambda_bar=lb, multiplicity=int(spec.multiplicity(cfg.k))))
    result.update(lambda_bar=lb, iterations=0, reason="certify")
    summary, fields = _spectral_summary(mesh, cfg, d0, spec, rng, cfg.k)
    result.update(summary)
    return fields


def _initial_map(mesh, p, amplitude, rng):
    raw = np.zeros((mesh.n_vertices, p + 1))
    raw[:, p] = 1.0
    for i in range(p):
        raw[:, i] = amplitude * (2.0 * smooth_perturbation(mesh, rng) - 1.0)
    return SphereMap.normalized(raw)


def _run_harmonic(cfg, mesh, rd, rng, result):
    p = cfg.p if cfg.p is not None else mesh.dim
    init = _initial_map(mesh, p, cfg.init_amplitude, rng)
    ball = geodesic_ball(mesh, cfg.ball_center, cfg.ball_radius)
    sol = harmonic_replacement(mesh, init, ball, cfg.tau0, cfg.J, tol=cfg.harmonic_tol)
    for j, st in enumerate(sol.report["stages"]):
        rd.append(dict(iter=j, tau=st["tau"], energy=st["energies"][-1] if st["energies"] else None,
                       residual=st["residual"], iterations=st["iterations"], converged=st["converged"]))
    tau = sol.report["tau_final"]
    fixed = np.setdiff1d(np.arange(mesh.n_vertices), ball.interior)
    boch = bochner_check(mesh, SphereMap(sol.values, boundary=fixed), tau, rng=rng)
    radii = (0.4 * cfg.ball_radius, 0.55 * cfg.ball_radius, 0.7 * cfg.ball_radius)
    balls = [geodesic_ball(mesh, cfg.ball_center, r) for r in radii]
    eps = eps_regularity_check(mesh, sol, balls)
    result.update(tau0=sol.report["tau0"], tau_final=tau, converged=sol.report["converged"],
                  energy=tau_energy(mesh, sol, tau, ball).energy, residual=el_residual(mesh, sol, tau, ball)[1],
                  bochner_min_slack=boch.min_slack, bochner_nodes=int(boch.nodes.size), ellipticity_ok=boch.a_ok,
                  eps_max_ratio=eps["max_ratio"], eps_ratios=eps["ratios"], eps_notes=eps["notes"],
                  iterations=sum(s["iterations"] for s in sol.report["stages"]), h=mesh.h)
    if not sol.report["converged"]:
        raise SolverFailure("harmonic replacement did not converge at every tau stage",
                            residuals=[s["residual"] for s in sol.report["stages"]])
    return dict(psi=sol.values, psi_init=init.values)


def execute(cfg: RunConfig, out, seed=None) -> Path:
    """Run ``cfg`` and publish the run directory at ``out``.

    ``seed`` overrides ``cfg.seed``. Solver failures still publish the
    directory, with ``error`` set in ``certificate.json``, then re-raise.
    """
    if seed is not None:
        cfg = cfg.replace(seed=int(seed))
    if out is None:
        raise ConfigError("out: no output directory given", keys=["out"])
    cfg = cfg.replace(out=None)
    rng = np.random.default_rng(cfg.seed)
    mesh = build_mesh(cfg)
    rd = RunDirectory(out)
    t0 = time.perf_counter()
    result = dict(version=__version__, mode=cfg.mode, k=cfg.k, n=mesh.dim, seed=cfg.seed, mesh=mesh.name,
                  n_vertices=mesh.n_vertices, n_cells=mesh.n_cells, error=None)
    fields = {}
    failure = None
    try:
        rd.write_text("config.echo", dump_config(cfg))
        rd.write_mesh(mesh)
        runner = {"maximize": _run_spectral, "nu": _run_spectral, "certify": _run_certify,
                  "harmonic": _run_harmonic}[cfg.mode]
        fields = runner(cfg, mesh, rd, rng, result)
    except SolverFailure as exc:
        failure = exc
        result["error"] = dict(type="SolverFailure", message=str(exc),
                               residuals=[float(r) for r in np.ravel(exc.residuals)] if exc.residuals is not None else None)
    except BaseException:
        rd.abort()
        raise
    try:
        for name, a in fields.items():
            rd.write_field(name, a)
        result["timing"] = dict(wall_clock_s=time.perf_counter() - t0)
        rd.write_json("certificate.json", result)
        path = rd.commit()
    except BaseException:
        rd.abort()
        raise
    if failure is not None:
        raise failure
    return path


# --------------------------------------------------------------------------
# exports

def _record_fields(rec) -> dict:
    """Named scalar fields of a record: name -> (values, location)."""
    mesh = rec["mesh"]
    F = rec["fields"]
    out = {}
    for name in ("alpha", "beta"):
        if name in F:
            out[name] = (F[name], "cell")
    if "Phi" in F and "alpha" in F:
        d = DensityPair(F["alpha"], F["beta"])
        Phi = F["Phi"].reshape(mesh.n_vertices, -1)
        fl = density_fields(mesh, d, Phi, rec["certificate"]["lam"])
        for name, v in fl.items():
            out[name] = (v, "cell")
        for i in range(Phi.shape[1]):
            out[f"phi_{i}"] = (Phi[:, i], "point")
    if "eigenvectors" in F:
        E = F["eigenvectors"].reshape(mesh.n_vertices, -1)
        for i in range(E.shape[1]):
            out[f"eigenfunction_{i}"] = (E[:, i], "point")
    if "psi" in F:
        for i in range(F["psi"].shape[1]):
            out[f"psi_{i}"] = (F["psi"][:, i], "point")
    return out


def available_fields(record) -> list:
    rec = load_record(record) if not isinstance(record, dict) else record
    return sorted(_record_fields(rec))


def export_field(record, which: str, fmt: str = "csv", out=None) -> list:
    """Write field ``which`` of a run directory as CSV and/or legacy VTK.

    ``fmt`` is ``"csv"``, ``"vtk"`` or ``"both"``; files go to ``out``
    (default ``<record>/exports``) as ``<which>.csv`` / ``<which>.vtk``.
    """
    rec = load_record(record) if not isinstance(record, dict) else record
    table = _record_fields(rec)
    if which not in table:
        raise ConfigError(f"unknown field {which!r}; available: {', '.join(sorted(table))}", keys=["field"])
    if fmt not in ("csv", "vtk", "both"):
        raise ConfigError("format must be csv, vtk or both", keys=["format"])
    values, loc = table[which]
    out = Path(out) if out is not None else Path(rec["path"]) / "exports"
    paths = []
    if fmt in ("csv", "both"):
        paths.append(out / f"{which}.csv")
        write_csv(paths[-1], values)
    if fmt in ("vtk", "both"):
        paths.append(out / f"{which}.vtk")
        write_vtk(paths[-1], rec["mesh"], which, values, loc)
    return paths


# --------------------------------------------------------------------------
# comparison

_SCALARS = ("lambda_bar", "lambda_k", "nu", "energy", "residual", "bochner_min_slack", "eps_max_ratio",
            "sobolev_ratio")


def _same_topology(ma, mb) -> bool:
    return ma.dim == mb.dim and ma.cells.shape == mb.cells.shape and np.array_equal(ma.cells, mb.cells)


def compare_records(a, b, scalars_only: bool = False) -> dict:
    """Deltas ``B - A`` of final scalars and certificate residuals, and field differences.

    Field differences (L1 weighted by cell volume or lumped vertex mass of
    mesh A, and L-infinity) need identical topology; otherwise a
    ConfigError is raised unless ``scalars_only`` is set.
    """
    ra = load_record(a) if not isinstance(a, dict) else a
    rb = load_record(b) if not isinstance(b, dict) else b
    same = _same_topology(ra["mesh"], rb["mesh"])
    if not same and not scalars_only:
        raise ConfigError("records have different mesh topology (use scalars_only)", keys=["mesh"])
    report = dict(same_topology=same, scalars={}, residuals={}, fields={})
    for key in _SCALARS:
        if key in ra and key in rb and ra[key] is not None and rb[key] is not None:
            report["scalars"][key] = dict(a=ra[key], b=rb[key], delta=rb[key] - ra[key])
    ca, cb = ra.get("certificate"), rb.get("certificate")
    if ca and cb:
        for key in ("norm_dev", "conf_dev", "density_dev", "density_dev_inf", "energy_gap"):
            if key in ca and key in cb:
                report["residuals"][key] = dict(a=ca[key], b=cb[key], delta=cb[key] - ca[key])
    if same:
        mesh = ra["mesh"]
        ta, tb = _record_fields(ra), _record_fields(rb)
        for name in sorted(set(ta) & set(tb)):
            if name.startswith(("eigenfunction_", "phi_", "psi_")):
                continue  # defined up to rotation within eigenspaces
            (va, loc), (vb, _) = ta[name], tb[name]
            w = mesh.volumes if loc == "cell" else mesh.lumped_mass()
            diff = np.abs(vb - va)
            report["fields"][name] = dict(l1=float(w @ diff), linf=float(diff.max()))
    return report


def recertify(record) -> dict:
    """Recompute the certificate residuals from a run's stored fields."""
    rec = load_record(record) if not isinstance(record, dict) else record
    F = rec["fields"]
    if "alpha" not in F:
        raise ConfigError("record has no density fields", keys=["record"])
    mesh = rec["mesh"]
    d = DensityPair(F["alpha"], F["beta"])
    k = rec["k"]
    cfg = rec["config"]
    spec = compute_spectrum(mesh, d, k, tol=cfg.eig_tol if cfg else 1e-10)
    cert = certify_state(mesh, d, spec, k, cfg.cert_cluster_tol if cfg else 1e-2)
    return dict(record=rec["certificate"], recomputed=cert.to_dict())


# --------------------------------------------------------------------------
# entry point

def _threads(arg) -> int:
    if arg is not None:
        return int(arg)
    env = os.environ.get("CONFSPEC_THREADS")
    if env is None or env.strip() == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError("CONFSPEC_THREADS must be an integer", keys=["CONFSPEC_THREADS"]) from None


def _parser():
    p = argparse.ArgumentParser(prog="confspec", description="Conformal spectrum optimization runs.")
    p.add_argument("--version", action="version", version=f"confspec {__version__}")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, config_required):
        sp.add_argument("--config", required=config_required, help="key = value configuration file")
        sp.add_argument("--out", help="output path")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--threads", type=int, help="BLAS threads, 0 = library default")
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("mesh", help="build the configured mesh and write it"), True)
    common(sub.add_parser("run", help="execute the configured mode into a run directory"), True)
    ex = sub.add_parser("export", help="write a field of a run directory as CSV/VTK")
    ex.add_argument("record")
    ex.add_argument("--field")
    ex.add_argument("--format", default="both", choices=("csv", "vtk", "both"))
    ex.add_argument("--out")
    ex.add_argument("--list", action="store_true", help="only list available fields")
    cp = sub.add_parser("compare", help="diff two run directories")
    cp.add_argument("a")
    cp.add_argument("b")
    cp.add_argument("--scalars-only", action="store_true")
    cp.add_argument("--out")
    ce = sub.add_parser("certify", help="certify densities without ascent, or recheck a run directory")
    ce.add_argument("record", nargs="?")
    common(ce, False)
    return p


def _emit_error(kind, exc, keys=()):
    obj = dict(error=kind, message=str(exc), keys=list(keys))
    print(json.dumps(obj), file=sys.stderr)


def _dispatch(args):
    if args.verb == "export":
        if args.list:
            print(json.dumps(available_fields(args.record)))
            return
        if not args.field:
            raise ConfigError("--field is required (see --list)", keys=["field"])
        paths = export_field(args.record, args.field, args.format, args.out)
        print(json.dumps([str(p) for p in paths]))
        return
    if args.verb == "compare":
        rep = compare_records(args.a, args.b, args.scalars_only)
        text = json.dumps(rep, indent=1, sort_keys=True)
        if args.out:
            from .io import atomic_write
            atomic_write(args.out, text + "\n")
        print(text)
        return
    if args.verb == "certify" and args.record:
        print(json.dumps(recertify(args.record), indent=1, sort_keys=True))
        return
    if args.config is None:
        raise ConfigError("--config is required", keys=["config"])
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    out = args.out or cfg.out
    if args.verb == "mesh":
        mesh = build_mesh(cfg)
        if out is None:
            raise ConfigError("out: no output path given", keys=["out"])
        write_mesh(mesh, out)
        print(json.dumps(dict(path=str(out), n=mesh.dim, vertices=mesh.n_vertices, cells=mesh.n_cells,
                              volume=mesh.total_volume)))
        return
    if args.verb == "certify":
        cfg = cfg.replace(mode="certify")
    path = execute(cfg, out)
    print(json.dumps(dict(path=str(path))))


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_VALIDATION
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        n = _threads(getattr(args, "threads", None))
        if n < 0:
            raise ConfigError("--threads must be >= 0", keys=["threads"])
        if n > 0:
            with threadpool_limits(limits=n):
                _dispatch(args)
        else:
            _dispatch(args)
    except ConfigError as exc:
        _emit_error("validation", exc, exc.keys)
        return EXIT_VALIDATION
    except SolverFailure as exc:
        _emit_error("solver_failure", exc)
        return EXIT_SOLVER
    except OSError as exc:
        _emit_error("io", exc)
        return EXIT_IO
    except (ConfspecError, ValueError) as exc:
        _emit_error("validation", exc)
        return EXIT_VALIDATION
    except Exception as exc:  # unexpected: still report a JSON object
        _emit_error("internal", f"{type(exc).__name__}: {exc}")
        return 1
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
