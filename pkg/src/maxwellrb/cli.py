"""Command-line driver: meshes, truth and reduced solves, study pipelines.

Every command is deterministic for a fixed argument list: outputs carry no
timestamps, random test sets are seeded, and sweep parallelism preserves
input order. Exit codes: 0 success, 2 usage or configuration error,
3 solver failure, 4 violated certificate or convergence assertion.
"""

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import control as ctl
from . import estimator as est
from . import rbm
from .control import OcpError
from .estimator import CertificationError
from .fespace import TrivialSpaceError, eval_curl_field, eval_edge_field
from .mesh import MeshError, generate_cube_mesh, load_mesh, save_mesh
from .problem import (
    ConfigError,
    build_problem,
    fill_distance,
    gamma_exponent,
    load_problem_config,
)
from .truth import SolverError, build_truth_model, state_fields_for_export, write_vtk

log = logging.getLogger(__name__)

DEFAULT_LEDGER_STRIDE = 5


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared plumbing

def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _write_json(path, payload):
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def _echo_config(args, out_dir):
    """Normalized JSON copy of the effective run configuration."""
    skip = {"func"}
    payload = {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in sorted(vars(args).items())
        if k not in skip
    }
    _write_json(out_dir / "run_config.json", payload)


def _out_dir(args):
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.touch()
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory not writable: {out} ({exc})") from None
    return out


def _parse_floats(text, count, what):
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"{what} must be comma-separated numbers, got {text!r}") from None
    if count is not None and len(vals) != count:
        raise UsageError(f"{what} needs {count} components, got {len(vals)}")
    return vals


def _load_pipeline(args):
    if not Path(args.mesh).is_file():
        raise UsageError(f"mesh file not found: {args.mesh}")
    mesh = load_mesh(args.mesh)
    config = load_problem_config(args.problem)
    decomp, data = build_problem(config, mesh)
    truth = build_truth_model(mesh, decomp, data)
    return config, truth


def _parameter_list(args, decomp, config=None, default_from_test_sample=False):
    mus = []
    for text in args.mu or []:
        mus.append(_parse_floats(text, decomp.domain.dimension, "--mu"))
    if getattr(args, "mu_file", None):
        path = Path(args.mu_file)
        if not path.is_file():
            raise UsageError(f"parameter file not found: {path}")
        for line in path.read_text().splitlines():
            line = line.strip()
            if line and not line.startswith("#"):
                mus.append(_parse_floats(line, decomp.domain.dimension, "parameter row"))
    if not mus and default_from_test_sample:
        sample = (config or {}).get("parameters", {}).get("test_sample", {})
        count = getattr(args, "test_count", None)
        if count is None:
            count = sample.get("count")
        seed = getattr(args, "test_seed", None)
        if seed is None:
            seed = sample.get("seed")
        if count is not None:
            if int(count) < 1:
                raise UsageError("test sample needs at least one parameter")
            return decomp.domain.sample(int(count), seed)
    if not mus:
        raise UsageError("no parameters given; pass --mu or --mu-file")
    out = np.asarray(mus, dtype=float)
    for mu in out:
        decomp.domain.require(mu)
    return out


def _ledger_for(truth, stride):
    train = truth.decomp.domain.training_points()
    return est.build_ledger(truth, train[::max(int(stride), 1)])


def _load_archive(args, truth):
    if not Path(args.archive).is_file():
        raise UsageError(f"basis archive not found: {args.archive}")
    rb = rbm.load_basis(args.archive)
    if rb.config_hash != rbm._hash_config(truth):
        raise UsageError("basis archive was built for a different problem configuration")
    return rb


def _sweep(work, items, workers):
    """Order-preserving map over parameter indices, optionally threaded."""
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(work, items))
    return [work(item) for item in items]


# ---------------------------------------------------------------------------
# commands

def cmd_mesh_gen(args):
    d_box = tuple(_parse_floats(args.d_box, 6, "--d-box")) if args.d_box else None
    mesh = generate_cube_mesh(args.n, d_box=d_box)
    save_mesh(mesh, args.out)
    if args.vtk:
        write_vtk(args.vtk, mesh)
    print(f"mesh n={args.n}: {mesh.num_tets} tets, {mesh.num_edges} edges -> {args.out}")
    return 0


def cmd_truth_solve(args):
    out = _out_dir(args)
    _, truth = _load_pipeline(args)
    mus = _parameter_list(args, truth.decomp)
    _echo_config(args, out)

    def work(item):
        i, mu = item
        sol = ctl.solve_ocp(truth, mu, tol=args.tol, max_iter=args.max_iter,
                            omega=args.omega)
        return i, mu, sol

    results = _sweep(work, list(enumerate(mus)), args.workers)
    rows = []
    for i, mu, sol in results:
        rows.append([i, *mu, sol.cost, sol.kkt_residual, sol.iterations,
                     sol.increment, sol.converged])
        if args.vtk:
            fields = state_fields_for_export(truth, sol.state)
            fields["adjoint"] = eval_edge_field(truth.espace, sol.adjoint)
            fields["control"] = sol.control
            write_vtk(out / f"truth_state_{i:03d}.vtk", truth.mesh,
                      cell_vectors=fields)
    header = ["index", *[f"mu{k+1}" for k in range(mus.shape[1])],
              "cost", "kkt_residual", "iterations", "increment", "converged"]
    _write_csv(out / "truth_solutions.csv", header, rows)
    print(f"solved {len(rows)} truth problems -> {out / 'truth_solutions.csv'}")
    return 0


def cmd_ocp_solve(args):
    out = _out_dir(args)
    _, truth = _load_pipeline(args)
    rb = _load_archive(args, truth)
    model = rbm.build_reduced_model(rb, truth)
    mus = _parameter_list(args, truth.decomp)
    _echo_config(args, out)

    def work(item):
        i, mu = item
        sol = ctl.solve_ocp(model, mu, tol=args.tol, max_iter=args.max_iter,
                            omega=args.omega)
        return i, mu, sol

    results = _sweep(work, list(enumerate(mus)), args.workers)
    rows = []
    for i, mu, sol in results:
        rows.append([i, *mu, sol.cost, sol.iterations, sol.increment, sol.converged])
        if args.vtk:
            fields = state_fields_for_export(truth, model.lift_state(sol.state))
            fields["control"] = sol.control
            write_vtk(out / f"reduced_state_{i:03d}.vtk", truth.mesh,
                      cell_vectors=fields)
    header = ["index", *[f"mu{k+1}" for k in range(mus.shape[1])],
              "cost", "iterations", "increment", "converged"]
    _write_csv(out / "reduced_solutions.csv", header, rows)
    print(f"solved {len(rows)} reduced problems -> {out / 'reduced_solutions.csv'}")
    return 0


def cmd_greedy(args):
    out = _out_dir(args)
    config, truth = _load_pipeline(args)
    if args.train_grid:
        kx, _, ky = args.train_grid.partition("x")
        try:
            grid = (int(kx), int(ky)) if ky else (int(kx),) * truth.decomp.domain.dimension
        except ValueError:
            raise UsageError(f"bad --train-grid {args.train_grid!r}; use e.g. 9x9") from None
        truth.decomp.domain.training_grid = grid
    training = truth.decomp.domain.training_points()
    greedy_cfg = config.get("greedy", {})
    tol = args.tol if args.tol is not None else float(greedy_cfg.get("tolerance", 1e-6))
    n_max = args.nmax if args.nmax is not None else int(greedy_cfg.get("n_max", 15))

    ledger = _ledger_for(truth, args.ledger_stride)
    rb = rbm.greedy(truth, training, tolerance=tol, n_max=n_max, ledger=ledger)
    rbm.save_basis(rb, out / args.archive_name)
    _echo_config(args, out)

    p = truth.decomp.domain.dimension
    rows = [[r["iteration"], r["dim_e"], r["dim_v"], r["max_delta"], *r["mu"]]
            for r in rb.history]
    _write_csv(out / "greedy_log.csv",
               ["iteration", "dim_e", "dim_v", "max_delta",
                *[f"mu{k+1}" for k in range(p)]],
               rows)
    final_delta = rb.history[-1]["max_delta"] if rb.history else 0.0
    _write_json(out / "greedy_summary.json", {
        "iterations": len(rb.history),
        "dim_e": rb.dim_e,
        "dim_v": rb.dim_v,
        "final_max_delta": final_delta,
        "reached_tolerance": bool(final_delta <= tol),
        "tolerance": tol,
        "n_max": n_max,
        "training_points": int(training.shape[0]),
        "config_hash": rb.config_hash,
    })
    print(f"greedy: {len(rb.history)} iterations, dims ({rb.dim_e}, {rb.dim_v}), "
          f"max_delta {final_delta:.3e} -> {out / args.archive_name}")
    return 0


def run_certification(truth, model, ledger, mus, with_truth=False, workers=1,
                      solve_tol=None, proj_tol=None):
    """Certify a parameter sweep; with a truth oracle also measure every bound.

    Solves run at the greedy scan tolerances by default so the estimator
    floor at snapshots stays below 1e-8.
    """
    solve_tol = solve_tol if solve_tol is not None else rbm.SCAN_TOL
    proj_tol = proj_tol if proj_tol is not None else rbm.SCAN_PROJECTION_TOL

    def work(item):
        i, mu = item
        red = ctl.solve_ocp(model, mu, tol=solve_tol, proj_tol=proj_tol)
        cert = est.certify(model, mu, red, ledger)
        row = {"index": i, "mu": mu, "cert": cert, "reduced_cost": red.cost}
        if with_truth:
            tru = ctl.solve_ocp(truth, mu, tol=solve_tol, proj_tol=proj_tol)
            err_u = ctl.control_norm(truth.espace.volumes, red.control - tru.control)
            err_e = truth.x_norm(model.lift_state(red.state) - tru.state)
            err_f = truth.x_norm(model.lift_state(red.adjoint) - tru.adjoint)
            row.update(
                err_control=err_u,
                err_state=err_e,
                err_adjoint=err_f,
                err_sum=err_u + err_e + err_f,
                truth_cost=tru.cost,
                cost_gap=abs(tru.cost - red.cost),
                effectivity=est.effectivity(cert, err_u),
            )
        return row

    rows = _sweep(work, list(enumerate(np.asarray(mus, dtype=float))), workers)
    violations = []
    if with_truth:
        for row in rows:
            cert = row["cert"]
            checks = (
                ("control error above delta_abs", row["err_control"] <= cert.delta_abs),
                ("error sum below lower bound", cert.lower <= row["err_sum"]),
                ("error sum above upper bound", row["err_sum"] <= cert.upper),
                ("cost gap above bound", row["cost_gap"] <= cert.cost_bound),
            )
            for label, ok in checks:
                if not ok:
                    violations.append({"index": row["index"],
                                       "mu": [float(v) for v in row["mu"]],
                                       "violation": label})
    return rows, violations


def cmd_certify(args):
    out = _out_dir(args)
    config, truth = _load_pipeline(args)
    rb = _load_archive(args, truth)
    model = rbm.build_reduced_model(rb, truth)
    mus = _parameter_list(args, truth.decomp, config, default_from_test_sample=True)
    if mus.shape[0] == 0:
        raise UsageError("certification sweep needs at least one parameter")
    ledger = _ledger_for(truth, args.ledger_stride)
    _echo_config(args, out)

    rows, violations = run_certification(
        truth, model, ledger, mus, with_truth=args.with_truth, workers=args.workers,
        solve_tol=args.solve_tol, proj_tol=args.proj_tol,
    )

    p = mus.shape[1]
    header = ["index", *[f"mu{k+1}" for k in range(p)],
              "residual_e", "residual_f", "delta_abs", "delta_rel", "rel_valid",
              "lower", "upper", "cost_bound"]
    if args.with_truth:
        header += ["err_control", "err_state", "err_adjoint", "err_sum",
                   "truth_cost", "reduced_cost", "cost_gap", "effectivity"]
    table = []
    for row in rows:
        cert = row["cert"]
        line = [row["index"], *row["mu"],
                cert.residual_e, cert.residual_f, cert.delta_abs, cert.delta_rel,
                cert.rel_valid, cert.lower, cert.upper, cert.cost_bound]
        if args.with_truth:
            line += [row["err_control"], row["err_state"], row["err_adjoint"],
                     row["err_sum"], row["truth_cost"], row["reduced_cost"],
                     row["cost_gap"], row["effectivity"]]
        table.append(line)
    _write_csv(out / "certificates.csv", header, table)

    deltas = [row["cert"].delta_abs for row in rows]
    summary = {
        "points": len(rows),
        "max_delta_abs": max(deltas),
        "violations": violations,
        "with_truth": bool(args.with_truth),
    }
    if args.with_truth:
        etas = [row["effectivity"] for row in rows
                if math.isfinite(row["effectivity"])]
        summary["min_effectivity"] = min(etas) if etas else None
        summary["max_cost_gap"] = max(row["cost_gap"] for row in rows)
    _write_json(out / "certify_summary.json", summary)

    if violations:
        for v in violations:
            print(f"violation at index {v['index']} mu={v['mu']}: {v['violation']}",
                  file=sys.stderr)
        return 4
    print(f"certified {len(rows)} parameters, max delta_abs "
          f"{summary['max_delta_abs']:.3e} -> {out / 'certificates.csv'}")
    return 0


# degree-2 quadrature on the reference tet, weights 1/4
_QUAD_LAMBDA = np.array([
    [0.5854101966249685, 0.1381966011250105, 0.1381966011250105, 0.1381966011250105],
    [0.1381966011250105, 0.5854101966249685, 0.1381966011250105, 0.1381966011250105],
    [0.1381966011250105, 0.1381966011250105, 0.5854101966249685, 0.1381966011250105],
    [0.1381966011250105, 0.1381966011250105, 0.1381966011250105, 0.5854101966249685],
])

_MANUFACTURED_CONFIG = {
    "parameters": {"box": [[0.0, 1.0]]},
    "cost": {"alpha": 1.0},
    "control": {"lower": [-100.0, -100.0, -100.0], "upper": [100.0, 100.0, 100.0]},
    "sigma_inv": {"sigma_range": [1.0, 1.0],
                  "terms": [{"theta": "1", "field": {"const": 1.0}}]},
    "eps": {"range": [1.0, 1.0],
            "terms": [{"theta": "1", "field": {"const": 1.0}}]},
    "rho": {"range": [0.0, 0.0],
            "terms": [{"theta": "1", "field": {"const": 0.0}}]},
    "desired_control": {"cap": 0.0,
                        "terms": [{"theta": "1", "field": {"const": [0.0, 0.0, 0.0]}}]},
    "desired_state": {"cap": 0.0,
                      "terms": [{"theta": "1", "field": {"const": [0.0, 0.0, 0.0]}}]},
}


def _manufactured_field(pts):
    out = np.zeros_like(pts)
    out[:, 1] = np.sin(np.pi * pts[:, 0]) * np.sin(np.pi * pts[:, 2])
    return out


def _manufactured_curl(pts):
    out = np.empty_like(pts)
    out[:, 0] = -np.pi * np.sin(np.pi * pts[:, 0]) * np.cos(np.pi * pts[:, 2])
    out[:, 1] = 0.0
    out[:, 2] = np.pi * np.cos(np.pi * pts[:, 0]) * np.sin(np.pi * pts[:, 2])
    return out


def run_h_study(levels=(2, 3, 4, 6)):
    """Energy error of the truth state solver against a closed-form solution.

    The field (0, sin(pi x) sin(pi z), 0) solves the curl-curl equation with
    unit coefficients, load 2 pi^2 times itself and zero divergence; the load
    enters through its cellwise average, consistent with the control space.
    """
    rows = []
    for n in levels:
        mesh = generate_cube_mesh(n)
        decomp, data = build_problem(_MANUFACTURED_CONFIG, mesh)
        truth = build_truth_model(mesh, decomp, data)
        mu = np.array([0.5])
        u = 2.0 * np.pi**2 * _manufactured_field(mesh.barycenters())
        e = truth.solve_state(mu, u)

        verts = mesh.nodes[mesh.tets]
        pts = np.einsum("qi,tid->tqd", _QUAD_LAMBDA, verts)
        flat = pts.reshape(-1, 3)
        e_h = eval_edge_field(truth.espace, e, points_lambda=_QUAD_LAMBDA)
        d_field = e_h - _manufactured_field(flat).reshape(e_h.shape)
        d_curl = (eval_curl_field(truth.espace, e)[:, None, :]
                  - _manufactured_curl(flat).reshape(e_h.shape))
        cell = 0.25 * (np.sum(d_field**2, axis=(1, 2)) + np.sum(d_curl**2, axis=(1, 2)))
        err = math.sqrt(float(np.dot(truth.espace.volumes, cell)))
        rows.append({"n": n, "h": math.sqrt(3.0) / n,
                     "edge_dofs": truth.espace.num_dofs, "error": err})

    errs = np.array([r["error"] for r in rows])
    hs = np.array([r["h"] for r in rows])
    slope = float(np.polyfit(np.log(hs), np.log(errs), 1)[0])
    return {
        "rows": rows,
        "slope": slope,
        "monotone": bool(np.all(np.diff(errs) < 0.0)),
    }


def cmd_h_study(args):
    out = _out_dir(args)
    levels = [int(v) for v in args.levels.split(",")]
    if len(levels) < 2 or sorted(set(levels)) != levels:
        raise UsageError(f"--levels must be strictly increasing, got {args.levels!r}")
    _echo_config(args, out)
    result = run_h_study(levels)
    _write_csv(out / "h_study.csv", ["n", "h", "edge_dofs", "error"],
               [[r["n"], r["h"], r["edge_dofs"], r["error"]] for r in result["rows"]])
    _write_json(out / "h_study_summary.json",
                {"slope": result["slope"], "monotone": result["monotone"],
                 "levels": levels})
    print(f"h-study slope {result['slope']:.3f} over n={levels} -> {out / 'h_study.csv'}")
    if not result["monotone"]:
        print("error not strictly decreasing under refinement", file=sys.stderr)
        return 4
    return 0


def run_n_study(truth, rb, mus, workers=1):
    """Sup control error over a test set for every snapshot-count prefix.

    Prefix bases are grown incrementally from re-solved snapshots, which
    matches a fresh greedy truncation exactly; truth solutions are computed
    once and shared across all prefixes.
    """
    mus = np.asarray(mus, dtype=float)

    def truth_work(item):
        _, mu = item
        return ctl.solve_ocp(truth, mu, tol=rbm.SNAPSHOT_TOL,
                             proj_tol=rbm.SCAN_PROJECTION_TOL)

    truth_sols = _sweep(truth_work, list(enumerate(mus)), workers)

    rows = []
    prefix = rbm.empty_basis(truth)
    for k, mu_snap in enumerate(rb.parameters, start=1):
        edge_snaps, nodal_snaps = rbm._snapshots(truth, mu_snap)
        prefix = rbm.extend_basis(prefix, truth, edge_snaps, nodal_snaps, mu=mu_snap)
        model = rbm.build_reduced_model(prefix, truth)

        def reduced_work(item):
            i, mu = item
            red = ctl.solve_ocp(model, mu, tol=rbm.SCAN_TOL,
                                proj_tol=rbm.SCAN_PROJECTION_TOL)
            return ctl.control_norm(truth.espace.volumes,
                                    red.control - truth_sols[i].control)

        errors = _sweep(reduced_work, list(enumerate(mus)), workers)
        rows.append({
            "n_snapshots": k,
            "dim_e": prefix.dim_e,
            "dim_v": prefix.dim_v,
            "kappa": fill_distance(rb.parameters[:k], mus),
            "sup_error": float(max(errors)),
        })
    return rows


def cmd_n_study(args):
    out = _out_dir(args)
    config, truth = _load_pipeline(args)
    rb = _load_archive(args, truth)
    if rb.parameters.shape[0] == 0:
        raise UsageError("basis archive holds no snapshots")
    mus = _parameter_list(args, truth.decomp, config, default_from_test_sample=True)
    _echo_config(args, out)

    rows = run_n_study(truth, rb, mus, workers=args.workers)
    gamma = gamma_exponent(truth.decomp)
    _write_csv(out / "n_study.csv",
               ["n_snapshots", "dim_e", "dim_v", "kappa", "sup_error"],
               [[r["n_snapshots"], r["dim_e"], r["dim_v"], r["kappa"], r["sup_error"]]
                for r in rows])

    errs = [r["sup_error"] for r in rows]
    kappas = [r["kappa"] for r in rows]
    monotone_err = all(b <= a * (1.0 + 1e-10) + 1e-14 for a, b in zip(errs, errs[1:]))
    monotone_kappa = all(b <= a + 1e-14 for a, b in zip(kappas, kappas[1:]))
    _write_json(out / "n_study_summary.json", {
        "gamma": gamma,
        "final_sup_error": errs[-1],
        "sup_error_non_increasing": monotone_err,
        "kappa_non_increasing": monotone_kappa,
        "tolerance": args.tol,
        "test_points": int(np.asarray(mus).shape[0]),
    })
    print(f"n-study: {len(rows)} prefixes, final sup error {errs[-1]:.3e}, "
          f"gamma {gamma} -> {out / 'n_study.csv'}")
    if not monotone_err:
        print("sup error increased between prefixes", file=sys.stderr)
        return 4
    if errs[-1] > args.tol:
        print(f"final sup error {errs[-1]:.3e} above tolerance {args.tol:.3e}",
              file=sys.stderr)
        return 4
    return 0


# ---------------------------------------------------------------------------
# parser

def _add_pipeline_args(sub):
    sub.add_argument("--problem", required=True,
                     help="problem YAML path, or the name 'benchmark'")
    sub.add_argument("--mesh", required=True, help="mesh file from mesh-gen")


def _add_solver_args(sub):
    sub.add_argument("--tol", type=float, default=ctl.FIXED_POINT_TOL)
    sub.add_argument("--max-iter", type=int, default=ctl.MAX_FIXED_POINT_ITER)
    sub.add_argument("--omega", type=float, default=0.7)


def _add_sweep_args(sub):
    sub.add_argument("--mu", action="append",
                     help="parameter point 'a,b,...'; repeatable")
    sub.add_argument("--mu-file", help="file with one parameter point per line")
    sub.add_argument("--workers", type=int, default=1)


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="maxwellrb",
        description="Certified reduced-order solver for constrained optimal "
                    "control of the stationary Maxwell system.",
    )
    parser.add_argument("--verbose", action="store_true")
    subs = parser.add_subparsers(dest="subcommand", required=True)

    p = subs.add_parser("mesh-gen", help="structured tetrahedral cube mesh")
    p.add_argument("--n", type=int, required=True, help="cells per axis")
    p.add_argument("--d-box", help="observation box 'x0,y0,z0,x1,y1,z1'")
    p.add_argument("--out", required=True, help="mesh file to write")
    p.add_argument("--vtk", help="also export legacy VTK")
    p.set_defaults(func=cmd_mesh_gen)

    p = subs.add_parser("truth-solve", help="truth optimal-control solves")
    _add_pipeline_args(p)
    _add_sweep_args(p)
    _add_solver_args(p)
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--vtk", action="store_true", help="export per-parameter fields")
    p.set_defaults(func=cmd_truth_solve)

    p = subs.add_parser("ocp-solve", help="reduced optimal-control solves")
    _add_pipeline_args(p)
    p.add_argument("--archive", required=True, help="basis archive from greedy")
    _add_sweep_args(p)
    _add_solver_args(p)
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--vtk", action="store_true")
    p.set_defaults(func=cmd_ocp_solve)

    p = subs.add_parser("greedy", help="build a certified reduced basis")
    _add_pipeline_args(p)
    p.add_argument("--train-grid", help="training grid 'KxK' (default: config)")
    p.add_argument("--tol", type=float, default=None,
                   help="greedy tolerance (default: config)")
    p.add_argument("--nmax", type=int, default=None,
                   help="max snapshots (default: config)")
    p.add_argument("--ledger-stride", type=int, default=DEFAULT_LEDGER_STRIDE,
                   help="training-point stride for the stability sample")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--archive-name", default="basis.rb")
    p.set_defaults(func=cmd_greedy)

    p = subs.add_parser("certify", help="certified bound sweep over parameters")
    _add_pipeline_args(p)
    p.add_argument("--archive", required=True)
    _add_sweep_args(p)
    p.add_argument("--test-count", type=int, default=None,
                   help="random test points (default: config test_sample)")
    p.add_argument("--test-seed", type=int, default=None)
    p.add_argument("--with-truth", action="store_true",
                   help="solve truth problems and assert every bound")
    p.add_argument("--ledger-stride", type=int, default=DEFAULT_LEDGER_STRIDE)
    p.add_argument("--solve-tol", type=float, default=None)
    p.add_argument("--proj-tol", type=float, default=None)
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_certify)

    p = subs.add_parser("h-study", help="mesh-refinement convergence study")
    p.add_argument("--levels", default="2,3,4,6")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_h_study)

    p = subs.add_parser("n-study", help="basis-size convergence study")
    _add_pipeline_args(p)
    p.add_argument("--archive", required=True)
    _add_sweep_args(p)
    p.add_argument("--test-count", type=int, default=None)
    p.add_argument("--test-seed", type=int, default=None)
    p.add_argument("--tol", type=float, default=1e-4,
                   help="required final sup error")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_n_study)

    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, MeshError, TrivialSpaceError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, OcpError, rbm.GreedyError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3
    except CertificationError as exc:
        print(f"certification failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
