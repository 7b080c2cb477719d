"""
Command line interface.

Subcommands ``rve``, ``multiscale``, ``bench``, ``netgen`` and ``metrics``
share ``--config`` (INI file), ``--workers``, ``--seed`` and ``--out``. Every
run writes ``resolved_config.ini`` with all defaults filled in; running again
with that file reproduces the outputs.

Exit codes: 0 success, 2 configuration error, 3 solver non-convergence,
4 input/output error.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import report
from .batch import (LibraryError, NeoHookean, NetworkMaterial, RveLibrary,
                    SubstituteMaterial, init_batch)
from .macrofem import (BcError, DirichletBc, MacroConvergenceError, MeshError,
                       NeumannBc, NewtonConfig, box_mesh, newton_solve, read_mesh,
                       write_mesh)
from .network import (FiberLaw, NetworkError, NetworkFormatError, NetworkSpec,
                      fiber_directions, generate_network, orientation_P2,
                      read_network, write_network)
from .relax import RelaxConfig, RelaxDivergenceError, RelaxJob, relax_many
from .stiffness import (MicroscaleConvergenceError, StiffnessConfig,
                        constitutive_response)
from .tensors import MANDEL_LABELS, KinematicsError, polar_decompose

log = logging.getLogger("fe2net")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4

DEFAULTS = {
    "run": {"seed": "0", "workers": "1", "figures": "yes"},
    "law": {"kind": "linear", "nonlinearity": "5.0", "buckling": "no"},
    "relax": {"damping": "2.0", "tol": "1e-10", "max_iter": "200000",
              "dt_safety": "0.9", "density_scale": "1.0"},
    "stiffness": {"h": "1e-5", "ref_dir": "1,0,0"},
    "network": {"file": "", "n_nodes": "50", "n_fibers": "150",
                "boundary_fraction": "0.3", "alignment": "0.0", "min_degree": "3",
                "area": "1.0", "modulus": "1.0"},
    "load": {"kind": "uniaxial", "max_stretch": "1.2", "steps": "5", "file": ""},
    "library": {"manifest": "", "size": "8", "policy": "random"},
    "mesh": {"file": "", "lengths": "3,1.5,1", "divisions": "6,3,2"},
    "bc": {"kind": "pull", "strain": "0.25"},
    "material": {"provider": "network", "mu": "1.0", "lambda": "1.0"},
    "newton": {"tol": "1e-8", "atol": "1e-12", "max_iter": "15", "steps": "10",
               "min_step": "0.00390625"},
    "bench": {"batch_sizes": "1,2,4,8,16,32,64", "workers": "1,2,4,8",
              "n_nodes": "1000", "n_fibers": "3000", "stretch": "1.05", "repeats": "3"},
}


class ConfigError(ValueError):
    pass


# --- configuration -------------------------------------------------------

def load_config(path=None, *, seed=None, workers=None) -> configparser.ConfigParser:
    """Defaults, overlaid by the INI file, overlaid by command-line flags."""
    cp = configparser.ConfigParser()
    cp.read_dict(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            with path.open() as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        base = path.parent
        for sec, key in (("network", "file"), ("load", "file"), ("library", "manifest"),
                         ("mesh", "file")):
            val = cp.get(sec, key)
            if val and not Path(val).is_absolute():
                cp.set(sec, key, str((base / val).resolve()))
    if seed is not None:
        cp.set("run", "seed", str(seed))
    if workers is not None:
        cp.set("run", "workers", str(workers))
    for sec in cp.sections():
        if sec in DEFAULTS:
            unknown = set(cp[sec]) - set(DEFAULTS[sec])
        elif sec.startswith("bc."):
            unknown = set(cp[sec]) - {"set", "face", "ux", "uy", "uz", "traction"}
        else:
            raise ConfigError(f"unknown section [{sec}]")
        if unknown:
            raise ConfigError(f"unknown key(s) {sorted(unknown)} in [{sec}]")
    return cp


def _get(cp, sec, key, kind=str):
    raw = cp.get(sec, key)
    try:
        if kind is bool:
            return cp.getboolean(sec, key)
        if kind == "floats":
            return tuple(float(x) for x in raw.split(",") if x.strip())
        if kind == "ints":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"[{sec}] {key} = {raw!r} is not a valid {getattr(kind, '__name__', kind)}") from None


def _law(cp) -> FiberLaw:
    try:
        kind = _get(cp, "law", "kind")
        return FiberLaw(kind, _get(cp, "law", "nonlinearity", float) if kind == "exponential" else 0.0,
                        _get(cp, "law", "buckling", bool))
    except ValueError as exc:
        raise ConfigError(f"[law] {exc}") from None


def _relax_cfg(cp) -> RelaxConfig:
    try:
        return RelaxConfig(damping=_get(cp, "relax", "damping", float),
                           tol=_get(cp, "relax", "tol", float),
                           max_iter=_get(cp, "relax", "max_iter", int),
                           dt_safety=_get(cp, "relax", "dt_safety", float),
                           density_scale=_get(cp, "relax", "density_scale", float))
    except ValueError as exc:
        raise ConfigError(f"[relax] {exc}") from None


def _stiff_cfg(cp) -> StiffnessConfig:
    ref = _get(cp, "stiffness", "ref_dir", "floats")
    if len(ref) != 3 or not np.linalg.norm(ref) > 0:
        raise ConfigError("[stiffness] ref_dir needs 3 components")
    try:
        return StiffnessConfig(h=_get(cp, "stiffness", "h", float), ref_dir=ref)
    except ValueError as exc:
        raise ConfigError(f"[stiffness] {exc}") from None


def _newton_cfg(cp) -> NewtonConfig:
    try:
        return NewtonConfig(tol=_get(cp, "newton", "tol", float),
                            atol=_get(cp, "newton", "atol", float),
                            max_iter=_get(cp, "newton", "max_iter", int),
                            n_steps=_get(cp, "newton", "steps", int),
                            min_step=_get(cp, "newton", "min_step", float))
    except ValueError as exc:
        raise ConfigError(f"[newton] {exc}") from None


def _network_spec(cp, n_nodes=None, n_fibers=None) -> NetworkSpec:
    s = "network"
    return NetworkSpec(n_nodes=n_nodes or _get(cp, s, "n_nodes", int),
                       n_fibers=n_fibers or _get(cp, s, "n_fibers", int),
                       boundary_fraction=_get(cp, s, "boundary_fraction", float),
                       alignment=_get(cp, s, "alignment", float),
                       min_degree=_get(cp, s, "min_degree", int),
                       area=_get(cp, s, "area", float), modulus=_get(cp, s, "modulus", float))


def _network(cp):
    path = cp.get("network", "file")
    if path:
        return read_network(path)
    return generate_network(_network_spec(cp), _get(cp, "run", "seed", int))


def _prepare_out(out) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _save_config(cp, out: Path) -> None:
    with (out / "resolved_config.ini").open("w") as fh:
        cp.write(fh)


# --- rve -----------------------------------------------------------------

def deformation_path(cp) -> list[np.ndarray]:
    kind = _get(cp, "load", "kind")
    n = _get(cp, "load", "steps", int)
    lam = _get(cp, "load", "max_stretch", float)
    if kind == "file":
        path = cp.get("load", "file")
        if not path:
            raise ConfigError("[load] kind = file needs a file")
        try:
            rows = np.loadtxt(path, ndmin=2)
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if rows.shape[1] != 9:
            raise ConfigError(f"{path}: each line needs 9 components of F (row major)")
        return [r.reshape(3, 3) for r in rows]
    if n < 1:
        raise ConfigError("[load] steps must be >= 1")
    out = []
    for k in range(n + 1):
        s = 1.0 + (lam - 1.0) * k / n
        if kind == "identity":
            F = np.eye(3)
        elif kind == "uniaxial":
            F = np.diag([s, 1.0, 1.0])
        elif kind == "biaxial":
            F = np.diag([s, s, 1.0])
        elif kind == "shear":
            F = np.eye(3)
            F[0, 1] = s - 1.0
        else:
            raise ConfigError(f"[load] unknown kind {kind!r}")
        out.append(F)
    return out


def run_rve(cp, out: Path) -> int:
    net = _network(cp)
    law, rcfg, scfg = _law(cp), _relax_cfg(cp), _stiff_cfg(cp)
    path = deformation_path(cp)
    cols = (["step"] + [f"F{i}{j}" for i in (1, 2, 3) for j in (1, 2, 3)]
            + [f"sigma{lab}" for lab in MANDEL_LABELS]
            + [f"C{a}_{b}" for a in MANDEL_LABELS for b in MANDEL_LABELS]
            + ["p2", "relax_iterations", "converged"])
    rows, code = [], EXIT_OK
    warm = None
    for k, F in enumerate(path):
        try:
            res = constitutive_response(net, law, F, rcfg, scfg, warm)
        except (MicroscaleConvergenceError, RelaxDivergenceError) as exc:
            log.error("step %d: %s", k, exc)
            rows.append([k, *F.ravel(), *[np.nan] * 44, 0])
            code = EXIT_SOLVER
            break
        warm = res.state
        s = res.sigma
        rows.append([k, *F.ravel(), s[0, 0], s[1, 1], s[2, 2], s[1, 2], s[0, 2], s[0, 1],
                     *res.C.ravel(), res.p2, res.iterations, 1])
    report.write_table(out / "rve_steps.csv", "rve_steps", cols, rows)
    if _get(cp, "run", "figures", bool) and rows:
        data = np.array(rows, dtype=float)
        ok = data[:, -1] == 1
        if ok.any():
            stretch = np.array([np.linalg.eigvalsh(polar_decompose(F)[1]).max() for F in path[:ok.sum()]])
            report.plot_rve_steps(out / "rve_steps.png", stretch, data[ok, 10:13], data[ok, -3])
    return code


# --- multiscale ----------------------------------------------------------

def _mesh(cp):
    path = cp.get("mesh", "file")
    if path:
        return read_mesh(path)
    lengths = _get(cp, "mesh", "lengths", "floats")
    div = _get(cp, "mesh", "divisions", "ints")
    if len(lengths) != 3 or len(div) != 3:
        raise ConfigError("[mesh] lengths and divisions need 3 values")
    return box_mesh(lengths, div)


def pull_boundary_conditions(mesh, strain: float):
    """Uniaxial pull along x on a box: ``xmin`` held in x, one corner held in
    all directions, a second ``xmin`` corner held in z, ``xmax`` pulled.

    Adds the node sets ``pin`` and ``pin_z`` to the mesh.
    """
    X = mesh.coords
    lo, hi = X.min(axis=0), X.max(axis=0)
    for name in ("xmin", "xmax"):
        if name not in mesh.node_sets:
            mesh.node_sets[name] = np.flatnonzero(np.isclose(X[:, 0], lo[0] if name == "xmin" else hi[0]))
    corner = np.flatnonzero(np.all(np.isclose(X, lo), axis=1))
    other = np.flatnonzero(np.isclose(X[:, 0], lo[0]) & np.isclose(X[:, 1], hi[1])
                           & np.isclose(X[:, 2], lo[2]))
    if corner.size != 1 or other.size != 1:
        raise BcError("pull boundary conditions need a box-shaped mesh")
    mesh.node_sets["pin"] = corner
    mesh.node_sets["pin_z"] = other
    length = hi[0] - lo[0]
    return [DirichletBc("xmin", {0: 0.0}), DirichletBc("pin", {0: 0.0, 1: 0.0, 2: 0.0}),
            DirichletBc("pin_z", {2: 0.0}), DirichletBc("xmax", {0: strain * length})]


def _bcs(cp, mesh):
    custom = [s for s in cp.sections() if s.startswith("bc.")]
    if not custom:
        kind = _get(cp, "bc", "kind")
        if kind != "pull":
            raise ConfigError(f"[bc] unknown kind {kind!r}")
        return pull_boundary_conditions(mesh, _get(cp, "bc", "strain", float))
    bcs = []
    for sec in custom:
        if cp.has_option(sec, "face"):
            t = _get(cp, sec, "traction", "floats")
            if len(t) != 3:
                raise ConfigError(f"[{sec}] traction needs 3 components")
            bcs.append(NeumannBc(cp.get(sec, "face"), t))
        else:
            vals = {a: _get(cp, sec, k, float) for a, k in enumerate(("ux", "uy", "uz"))
                    if cp.has_option(sec, k)}
            if not cp.has_option(sec, "set") or not vals:
                raise ConfigError(f"[{sec}] needs set and at least one of ux, uy, uz")
            bcs.append(DirichletBc(cp.get(sec, "set"), vals))
    return bcs


def _library(cp):
    path = cp.get("library", "manifest")
    if path:
        lib = RveLibrary.from_manifest(path)
    else:
        seed = _get(cp, "run", "seed", int)
        spec = _network_spec(cp)
        nets = [generate_network(spec, seed + k) for k in range(_get(cp, "library", "size", int))]
        try:
            lib = RveLibrary(nets, policy=_get(cp, "library", "policy"))
        except LibraryError as exc:
            raise ConfigError(f"[library] {exc}") from None
    return lib


def run_multiscale(cp, out: Path) -> int:
    mesh = _mesh(cp)
    bcs = _bcs(cp, mesh)
    ncfg = _newton_cfg(cp)
    seed = _get(cp, "run", "seed", int)
    workers = _get(cp, "run", "workers", int)
    provider = _get(cp, "material", "provider")
    nh = NeoHookean(_get(cp, "material", "mu", float), _get(cp, "material", "lambda", float))
    ref_dir = _stiff_cfg(cp).ref_dir
    if provider == "network":
        lib = _library(cp)
        batch = init_batch(mesh, lib, seed)
        material = NetworkMaterial(batch, _law(cp), _relax_cfg(cp), _stiff_cfg(cp), workers)
        p2_init = batch.reference_p2(ref_dir)
    elif provider == "substitute":
        material = SubstituteMaterial(nh)
        p2_init = np.zeros(mesh.n_elements)
    else:
        raise ConfigError(f"[material] unknown provider {provider!r}")
    write_mesh(mesh, out / "mesh.txt")

    pulled = _pulled_set(bcs)
    X = mesh.coords
    length = float(np.ptp(X[:, 0]))
    area = float(np.ptp(X[:, 1]) * np.ptp(X[:, 2]))
    history = [(0, 0.0, 0.0, 0.0, 0.0)]
    fields = out / "fields"
    fields.mkdir(exist_ok=True)
    t0 = time.perf_counter()

    def on_increment(inc):
        k = len(history)
        u = inc.u.reshape(-1, 3)
        report.write_table(fields / f"displacement_{k:04d}.csv", "nodal_displacement",
                           ["node", "ux", "uy", "uz"], [[i, *u[i]] for i in range(len(u))])
        p2 = inc.extras.get("p2", np.zeros(mesh.n_elements))
        s = inc.sigma
        report.write_table(fields / f"elements_{k:04d}.csv", "element_fields",
                           ["element", "region", "s11", "s22", "s33", "s23", "s13", "s12", "p2"],
                           [[e, mesh.regions[e], s[e, 0, 0], s[e, 1, 1], s[e, 2, 2],
                             s[e, 1, 2], s[e, 0, 2], s[e, 0, 1], p2[e]]
                            for e in range(mesh.n_elements)])
        force = float(inc.reactions[pulled][0]) if pulled else 0.0
        strain = float(u[mesh.node_sets[pulled], 0].mean() / length) if pulled else inc.load
        history.append((k, inc.load, strain, force, force / area))
        log.info("increment %d load %.4f strain %.4f force %.6g (%d iterations, %.1f s)",
                 k, inc.load, strain, force, inc.iterations, time.perf_counter() - t0)

    code = EXIT_OK
    sol = None
    try:
        sol = newton_solve(mesh, bcs, material, ncfg, initial=SubstituteMaterial(nh),
                           callback=on_increment)
    except MacroConvergenceError as exc:
        log.error("%s", exc)
        code = EXIT_SOLVER

    report.write_table(out / "stress_strain.csv", "stress_strain",
                       ["increment", "load", "strain", "force", "stress"], history)
    h = np.array(history, dtype=float)
    stress_mid, tangent = tangent_from_curve(h[:, 2], h[:, 4])
    report.write_table(out / "tangent_stiffness.csv", "tangent_stiffness",
                       ["stress", "tangent"], np.column_stack([stress_mid, tangent]))
    p2_final = sol.increments[-1].extras.get("p2", p2_init) if sol else p2_init
    report.write_table(out / "p2_distribution.csv", "p2_distribution",
                       ["element", "p2_initial", "p2_final"],
                       [[e, p2_init[e], p2_final[e]] for e in range(mesh.n_elements)])
    if _get(cp, "run", "figures", bool):
        report.plot_stress_strain(out / "stress_strain.png", h[:, 2], h[:, 4])
        report.plot_tangent(out / "tangent_stiffness.png", stress_mid, tangent)
        report.plot_p2(out / "p2_distribution.png", p2_init, p2_final)
    return code


def _pulled_set(bcs):
    for bc in bcs:
        if isinstance(bc, DirichletBc) and 0 in bc.values and np.any(np.asarray(bc.values[0]) != 0):
            return bc.node_set
    return None


def tangent_from_curve(strain, stress):
    """Midpoint stress and secant slope between consecutive curve points."""
    strain, stress = np.asarray(strain), np.asarray(stress)
    d = np.diff(strain)
    ok = d > 0
    mid = 0.5 * (stress[1:] + stress[:-1])
    return mid[ok], (np.diff(stress)[ok] / d[ok])


# --- bench ---------------------------------------------------------------

def run_bench(cp, out: Path) -> int:
    sizes = _get(cp, "bench", "batch_sizes", "ints")
    workers = _get(cp, "bench", "workers", "ints")
    if not sizes or not workers or min(sizes) < 1 or min(workers) < 1:
        raise ConfigError("[bench] batch_sizes and workers must be positive integers")
    spec = _network_spec(cp, _get(cp, "bench", "n_nodes", int), _get(cp, "bench", "n_fibers", int))
    net = generate_network(spec, _get(cp, "run", "seed", int))
    F = np.diag([_get(cp, "bench", "stretch", float), 1.0, 1.0])
    law, rcfg = _law(cp), _relax_cfg(cp)
    repeats = max(1, _get(cp, "bench", "repeats", int))
    relax_many([RelaxJob(net, F)], law, rcfg)  # compile outside the timings
    rows = bench_table(net, law, rcfg, F, sizes, workers, repeats)
    cols = ["batch_size", "workers", "n_dof", "wall_time", "per_rve_time", "self_speedup", "speedup"]
    report.write_table(out / "bench.csv", "bench", cols, rows)
    if _get(cp, "run", "figures", bool):
        report.plot_bench(out / "bench.png", [(r[0], r[1], r[5], r[6]) for r in rows])
    return EXIT_OK


def bench_table(net, law, rcfg, F, sizes, workers, repeats=3):
    """Wall time of relaxing batches of identical RVEs.

    ``self_speedup = n t(1) / t(n)`` at fixed workers; ``speedup`` is relative
    to one worker at the same batch size.
    """
    times = {}
    for w in workers:
        for n in sizes:
            best = np.inf
            for _ in range(repeats):
                t = time.perf_counter()
                res = relax_many([RelaxJob(net, F)] * n, law, rcfg, workers=w)
                best = min(best, time.perf_counter() - t)
                if not all(r.converged for _, r in res):
                    raise MicroscaleConvergenceError("benchmark relaxation did not converge")
            times[w, n] = best
    base_n = min(sizes)
    rows = []
    for w in workers:
        for n in sizes:
            t = times[w, n]
            t1 = times.get((min(workers), n), t)
            self_sp = n * times[w, base_n] / (base_n * t)
            rows.append([n, w, net.layout.n_free, t, t / n, self_sp, t1 / t])
    return rows


# --- netgen / metrics ----------------------------------------------------

def run_netgen(cp, out: Path) -> int:
    net = generate_network(_network_spec(cp), _get(cp, "run", "seed", int))
    write_network(net, out / "network.txt")
    _metrics_table(cp, [("network.txt", net)], out)
    if _get(cp, "run", "figures", bool):
        report.plot_network(out / "network.png", net)
    return EXIT_OK


def run_metrics(cp, out: Path) -> int:
    entries = []
    if cp.get("library", "manifest"):
        lib = RveLibrary.from_manifest(cp.get("library", "manifest"))
        entries = list(zip(lib.paths, lib.networks))
    elif cp.get("network", "file"):
        entries = [(cp.get("network", "file"), read_network(cp.get("network", "file")))]
    else:
        raise ConfigError("metrics needs [network] file or [library] manifest")
    _metrics_table(cp, entries, out)
    if _get(cp, "run", "figures", bool):
        ref = np.asarray(_stiff_cfg(cp).ref_dir, dtype=float)
        n = np.concatenate([fiber_directions(net)[0] for _, net in entries])
        w = np.concatenate([net.rest_lengths for _, net in entries])
        report.plot_orientation(out / "orientation.png", n @ (ref / np.linalg.norm(ref)), w)
    return EXIT_OK


def _metrics_table(cp, entries, out):
    ref = _stiff_cfg(cp).ref_dir
    rows = [[k, net.n_nodes, net.n_fibers, len(net.boundary_node_ids),
             orientation_P2(net, None, ref), float(net.rest_lengths.mean())]
            for k, (_, net) in enumerate(entries)]
    report.write_table(out / "metrics.csv", "network_metrics",
                       ["entry", "n_nodes", "n_fibers", "n_boundary", "p2", "mean_length"], rows)


# --- entry point ---------------------------------------------------------

COMMANDS = {"rve": run_rve, "multiscale": run_multiscale, "bench": run_bench,
            "netgen": run_netgen, "metrics": run_metrics}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--workers", type=int, help="number of RVE worker threads")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--out", default="fe2net_out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="fe2net", description="Two-scale fiber network solver")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {"rve": "stress and tangent of one RVE along a deformation path",
             "multiscale": "coupled macro/micro Newton solution",
             "bench": "batch throughput benchmark",
             "netgen": "generate a random fiber network",
             "metrics": "orientation metrics of networks"}
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cp = load_config(args.config, seed=args.seed, workers=args.workers)
        if _get(cp, "run", "workers", int) < 1:
            raise ConfigError("workers must be >= 1")
        # bad solver settings fail before any work, whichever command runs
        _law(cp), _relax_cfg(cp), _stiff_cfg(cp), _newton_cfg(cp)
        out = _prepare_out(args.out)
        _save_config(cp, out)
        return COMMANDS[args.command](cp, out)
    except (ConfigError, BcError, KinematicsError) as exc:
        print(f"fe2net: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MicroscaleConvergenceError, MacroConvergenceError, RelaxDivergenceError) as exc:
        print(f"fe2net: solver did not converge: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (NetworkFormatError, MeshError, LibraryError, NetworkError, OSError,
            report.SchemaError) as exc:
        print(f"fe2net: input/output error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
