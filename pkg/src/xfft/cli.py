"""Configuration ingestion, run orchestration and output emission.

Run configurations are single JSON files (schema below, unknown keys
rejected).  Subcommands:

  solve        one cell solve; writes convergence.csv, summary.json and
               optional field dumps
  sweep        resolution study over outputs.study_ns; writes study.csv
               with a fitted slope row
  validate     run a built-in golden case (homogeneous | laminate | hashin)
               against its closed-form reference
  symbol-dump  write the preconditioner symbol as raw array + descriptor

Exit codes: 0 success, 1 validation failure, 2 invalid configuration,
3 solver not converged.  Thread count comes from --threads or the
XFFT_THREADS environment variable (flag wins).
"""

import argparse
import json
import os
import sys
import time

import numpy as np

from . import greenop
from .homogenize import (
    bulk_modulus_hydrostatic,
    effective_stiffness,
    fit_slope,
    hashin_bulk_reference,
    hashin_cell,
    homogeneous_cell,
    laminate_cell,
    laminate_cell_reference,
    rel_error,
)
from .mesh import Grid
from .microstructure import PhaseAssembly, Plane, Region, Sphere, SphereUnion
from .solver import SolverConfig, build_system, run_scheme
from .voigt import MaterialIso, iso_stiffness

EXIT_OK = 0
EXIT_VALIDATE_FAIL = 1
EXIT_BAD_CONFIG = 2
EXIT_NOT_CONVERGED = 3


class ConfigError(Exception):
    """Invalid run configuration; message carries the offending key path."""


def _require(cond, path, msg):
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def _check_keys(obj, path, required, optional=()):
    _require(isinstance(obj, dict), path, "expected an object")
    for key in required:
        _require(key in obj, path, f"missing required key '{key}'")
    unknown = set(obj) - set(required) - set(optional)
    _require(not unknown, path, f"unknown key(s) {sorted(unknown)}")


def _vector(x, path, n):
    _require(
        isinstance(x, (list, tuple)) and len(x) == n, path, f"expected {n} numbers"
    )
    _require(all(isinstance(v, (int, float)) for v in x), path, "expected numbers")
    return [float(v) for v in x]


class RunConfig:
    """Validated run configuration."""

    def __init__(self, data: dict):
        _check_keys(
            data,
            "config",
            required=("grid", "phases", "geometry", "loading", "solver"),
            optional=("discretization", "outputs"),
        )
        g = data["grid"]
        _check_keys(g, "grid", required=("n", "lengths"))
        n = g["n"]
        _require(
            isinstance(n, (list, tuple)) and len(n) == 3, "grid.n", "expected 3 ints"
        )
        _require(all(isinstance(v, int) and v >= 2 for v in n), "grid.n", "ints >= 2")
        self.n = tuple(n)
        self.lengths = tuple(_vector(g["lengths"], "grid.lengths", 3))
        _require(all(l > 0 for l in self.lengths), "grid.lengths", "must be positive")

        _require(isinstance(data["phases"], list) and data["phases"], "phases", "non-empty list")
        self.phase_names = []
        self.materials = []
        for i, ph in enumerate(data["phases"]):
            path = f"phases[{i}]"
            _check_keys(ph, path, required=("name", "young", "poisson"))
            _require(isinstance(ph["name"], str), path + ".name", "expected a string")
            _require(ph["name"] not in self.phase_names, path + ".name", "duplicate phase name")
            try:
                self.materials.append(
                    MaterialIso(young=float(ph["young"]), poisson=float(ph["poisson"]))
                )
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{path}: {exc}") from None
            self.phase_names.append(ph["name"])

        self.assembly = self._parse_geometry(data["geometry"])
        self.discretization = data.get("discretization", "xfem")
        _require(
            self.discretization in ("xfem", "p1"),
            "discretization",
            "must be 'xfem' or 'p1'",
        )
        self.loading = np.array(_vector(data["loading"], "loading", 6))

        s = data["solver"]
        _check_keys(s, "solver", required=(), optional=("scheme", "tol", "maxit"))
        try:
            self.solver = SolverConfig(
                scheme=s.get("scheme", "lcg"),
                tol=float(s.get("tol", 1e-7)),
                maxit=int(s.get("maxit", 500)),
            )
        except ValueError as exc:
            raise ConfigError(f"solver: {exc}") from None

        out = data.get("outputs", {})
        _check_keys(out, "outputs", required=(), optional=("fields", "log", "study_ns"))
        self.dump_fields = bool(out.get("fields", False))
        self.log_name = out.get("log", "convergence.csv")
        self.study_ns = out.get("study_ns", [])
        _require(
            all(isinstance(v, int) and v >= 2 for v in self.study_ns),
            "outputs.study_ns",
            "expected ints >= 2",
        )

    def _phase_index(self, name, path):
        _require(name in self.phase_names, path, f"phase '{name}' not defined")
        return self.phase_names.index(name)

    def _parse_geometry(self, geom) -> PhaseAssembly:
        _require(isinstance(geom, list), "geometry", "expected a list")
        regions = []
        for i, g in enumerate(geom):
            path = f"geometry[{i}]"
            _require(isinstance(g, dict) and "type" in g, path, "expected object with 'type'")
            kind = g["type"]
            if kind == "sphere":
                _check_keys(g, path, required=("type", "center", "radius", "inside", "outside"))
                shape = Sphere(
                    center=tuple(_vector(g["center"], path + ".center", 3)),
                    radius=float(g["radius"]),
                )
            elif kind == "plane":
                _check_keys(g, path, required=("type", "point", "normal", "inside", "outside"))
                shape = Plane(
                    point=tuple(_vector(g["point"], path + ".point", 3)),
                    normal=tuple(_vector(g["normal"], path + ".normal", 3)),
                )
            elif kind == "sphere_union":
                _check_keys(g, path, required=("type", "spheres", "inside", "outside"))
                _require(
                    isinstance(g["spheres"], list) and g["spheres"],
                    path + ".spheres",
                    "non-empty list",
                )
                members = []
                for j, sp in enumerate(g["spheres"]):
                    sp_path = f"{path}.spheres[{j}]"
                    _check_keys(sp, sp_path, required=("center", "radius"))
                    members.append(
                        Sphere(
                            center=tuple(_vector(sp["center"], sp_path + ".center", 3)),
                            radius=float(sp["radius"]),
                        )
                    )
                shape = SphereUnion(spheres=tuple(members))
            else:
                raise ConfigError(f"{path}.type: unknown primitive '{kind}'")
            regions.append(
                Region(
                    shape=shape,
                    inside_phase=self._phase_index(g["inside"], path + ".inside"),
                    outside_phase=self._phase_index(g["outside"], path + ".outside"),
                )
            )
        background = 0
        return PhaseAssembly(regions=regions, background=background)

    def build(self, n=None):
        grid = Grid(n=n or self.n, lengths=self.lengths)
        return build_system(
            self.assembly, grid, self.materials, mode=self.discretization
        )


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from None
    return RunConfig(data)


# ---------------------------------------------------------------------------
# output writers
# ---------------------------------------------------------------------------


def write_convergence_csv(path, history):
    with open(path, "w") as fh:
        fh.write("iteration,res,res_rel,wall_time\n")
        for k, res, rel, wall in history:
            fh.write(f"{k},{res:.17g},{rel:.17g},{wall:.17g}\n")


def dump_field(path_base, array, descriptor):
    """Raw little-endian float64 dump with a JSON sidecar.

    Arrays are written node-major with the x index fastest, component
    minor, regardless of the in-memory layout.
    """
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f8").transpose(2, 1, 0, 3))
    raw = path_base + ".f64"
    arr.tofile(raw)
    desc = dict(descriptor)
    desc.update(
        dtype="<f8",
        order="x-fastest node-major, component-minor",
        shape=list(np.asarray(array).shape),
    )
    with open(path_base + ".json", "w") as fh:
        json.dump(desc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return raw


def read_field(path_base):
    with open(path_base + ".json") as fh:
        desc = json.load(fh)
    shape = desc["shape"]
    flat = np.fromfile(path_base + ".f64", dtype="<f8")
    return flat.reshape(shape[2], shape[1], shape[0], shape[3]).transpose(2, 1, 0, 3)


def write_vtk(path, array, grid, name="displacement"):
    """Legacy-ASCII structured-points export for visualization."""
    n1, n2, n3 = array.shape[:3]
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nxfft field\nASCII\n")
        fh.write("DATASET STRUCTURED_POINTS\n")
        fh.write(f"DIMENSIONS {n1} {n2} {n3}\n")
        fh.write("ORIGIN 0 0 0\n")
        fh.write(f"SPACING {grid.h[0]:.17g} {grid.h[1]:.17g} {grid.h[2]:.17g}\n")
        fh.write(f"POINT_DATA {n1 * n2 * n3}\n")
        fh.write(f"VECTORS {name} double\n")
        flat = array.transpose(2, 1, 0, 3).reshape(-1, 3)
        for v in flat:
            fh.write(f"{v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _warn_report(system):
    lay, cch = system.layout, system.caches
    lines = []
    if lay.n_multi_interface:
        lines.append(
            f"warning: {lay.n_multi_interface} elements cut by more than one "
            "interface were assembled without enrichment"
        )
    if cch.n_dropped_dofs:
        lines.append(f"warning: {cch.n_dropped_dofs} enriched dofs dropped")
    return lines


def cmd_solve(cfg: RunConfig, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    t0 = time.perf_counter()
    system = cfg.build()
    result = run_scheme(system, cfg.solver, cfg.loading)
    wall = time.perf_counter() - t0
    write_convergence_csv(os.path.join(out_dir, cfg.log_name), result.history)
    summary = {
        "average_stress": [float(v) for v in result.sigma],
        "iterations": result.iterations,
        "converged": result.converged,
        "scheme": result.scheme,
        "residual": result.res_final,
        "wall_time": wall,
        "n_dofs": system.layout.n_dofs,
        "n_enriched_nodes": system.layout.n_x,
        "n_multi_interface_elements": system.layout.n_multi_interface,
        "n_dropped_enriched_dofs": system.caches.n_dropped_dofs,
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    for line in _warn_report(system):
        print(line)
    if cfg.dump_fields:
        dump_field(
            os.path.join(out_dir, "displacement"),
            result.u.grid,
            {"field": "displacement fluctuation", "units": "um", "grid": list(cfg.n)},
        )
        write_vtk(
            os.path.join(out_dir, "displacement.vtk"), result.u.grid, system.grid
        )
    print(
        f"<sigma> = [{', '.join(f'{v:.6g}' for v in result.sigma)}] MPa, "
        f"{result.iterations} iterations, {wall:.2f} s"
    )
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_sweep(cfg: RunConfig, out_dir):
    if not cfg.study_ns:
        print("error: sweep requires outputs.study_ns", file=sys.stderr)
        return EXIT_BAD_CONFIG
    os.makedirs(out_dir, exist_ok=True)
    ns = sorted(cfg.study_ns)
    rows = []
    status = EXIT_OK
    for n in ns:
        t0 = time.perf_counter()
        system = cfg.build(n=(n, n, n))
        result = run_scheme(system, cfg.solver, cfg.loading)
        wall = time.perf_counter() - t0
        if not result.converged:
            status = EXIT_NOT_CONVERGED
        k_eff = float(result.sigma[:3].sum() / 9.0)
        rows.append((n, k_eff, result.iterations, result.res_final, wall, result.sigma))
        print(f"N={n:4d}: K_eff-like = {k_eff:.8g}, {result.iterations} iterations")
    path = os.path.join(out_dir, "study.csv")
    with open(path, "w") as fh:
        fh.write("n,h,bulk_response,iterations,res,wall_time," +
                 ",".join(f"sigma_{i}" for i in range(6)) + "\n")
        for n, k, its, res, wall, sig in rows:
            h = min(l / n for l in cfg.lengths)
            fh.write(
                f"{n},{h:.17g},{k:.17g},{its},{res:.17g},{wall:.17g},"
                + ",".join(f"{v:.17g}" for v in sig)
                + "\n"
            )
        if len(rows) >= 3 and len({r[1] for r in rows}) == len(rows):
            finest = rows[-1][1]
            errs = [abs(r[1] - finest) for r in rows[:-1]]
            if all(e > 0 for e in errs):
                hs = [min(l / r[0] for l in cfg.lengths) for r in rows[:-1]]
                slope = fit_slope(hs, errs)
                fh.write(f"# slope_vs_finest,{slope:.6g}\n")
        else:
            print("warning: fewer than 3 resolutions, no slope fitted")
    print(f"study written to {path}")
    return status


_BUILTINS = ("homogeneous", "laminate", "hashin")


def cmd_validate(name, tol_override=None, scheme="lcg"):
    """Run a built-in golden case against its closed-form reference."""
    if name == "homogeneous":
        assembly, materials, lengths = homogeneous_cell()
        system = build_system(assembly, Grid((8, 8, 8), lengths), materials)
        config = SolverConfig(scheme=scheme, tol=tol_override or 1e-10, maxit=100)
        eps = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
        res = run_scheme(system, config, eps)
        ref = iso_stiffness(materials[0]) @ eps
        err = float(np.abs(res.sigma - ref).max() / np.abs(ref).max())
        ok = err < 1e-12 and res.iterations <= 1
        print(f"homogeneous: stress error {err:.3e}, {res.iterations} iterations "
              f"-> {'PASS' if ok else 'FAIL'}")
        return ok
    if name == "laminate":
        assembly, materials, lengths = laminate_cell()
        system = build_system(assembly, Grid((8, 8, 8), lengths), materials)
        config = SolverConfig(scheme=scheme, tol=tol_override or 1e-12, maxit=400)
        eff = effective_stiffness(system, config)
        ref = laminate_cell_reference(materials)
        err = float(np.abs(eff.stiffness - ref).max() / np.abs(ref).max())
        ok = err < 1e-8 and eff.converged
        print(f"laminate: effective stiffness error {err:.3e} -> "
              f"{'PASS' if ok else 'FAIL'}")
        return ok
    if name == "hashin":
        assembly, materials, lengths = hashin_cell()
        system = build_system(assembly, Grid((16, 16, 16), lengths), materials)
        config = SolverConfig(scheme=scheme, tol=tol_override or 1e-7, maxit=300)
        k_eff, res = bulk_modulus_hydrostatic(system, config)
        err = rel_error(k_eff, hashin_bulk_reference(materials))
        ok = err < 1e-3 and 24 <= res.iterations <= 36 and res.converged
        print(f"hashin: K_eff = {k_eff:.6f} MPa, rel error {err:.3e}, "
              f"{res.iterations} iterations -> {'PASS' if ok else 'FAIL'}")
        return ok
    raise ValueError(f"unknown builtin '{name}'")


def cmd_symbol_dump(cfg: RunConfig, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    system = cfg.build()
    ghat = system.symbol.ghat
    path = os.path.join(out_dir, "green_symbol")
    np.ascontiguousarray(ghat.astype("<c16")).tofile(path + ".c16")
    with open(path + ".json", "w") as fh:
        json.dump(
            {
                "dtype": "<c16",
                "shape": list(ghat.shape),
                "layout": "half-spectrum rfft, frequency-major, 3x3 block minor",
                "grid": list(cfg.n),
            },
            fh,
            indent=1,
            sort_keys=True,
        )
        fh.write("\n")
    print(f"symbol written to {path}.c16")
    return EXIT_OK


# ---------------------------------------------------------------------------


def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("XFFT_THREADS")
    return int(env) if env else 1


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="xfft",
        description="FFT-preconditioned interface-enriched voxel FEM homogenization",
    )
    parser.add_argument("--threads", type=int, default=None, help="worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="run one cell solve")
    p_sweep = sub.add_parser("sweep", help="run a resolution study")
    p_dump = sub.add_parser("symbol-dump", help="dump the preconditioner symbol")
    for p in (p_solve, p_sweep, p_dump):
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=".")
        p.add_argument("--tol", type=float, default=None, help="override solver.tol")
        p.add_argument("--scheme", default=None, help="override solver.scheme")

    p_val = sub.add_parser("validate", help="run a built-in golden case")
    p_val.add_argument("case", choices=_BUILTINS)
    p_val.add_argument("--tol", type=float, default=None)
    p_val.add_argument("--scheme", default="lcg")

    args = parser.parse_args(argv)
    greenop.set_fft_workers(_threads(args))

    if args.command == "validate":
        try:
            ok = cmd_validate(args.case, tol_override=args.tol, scheme=args.scheme)
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_BAD_CONFIG
        return EXIT_OK if ok else EXIT_VALIDATE_FAIL

    try:
        cfg = load_config(args.config)
        if args.tol is not None or args.scheme is not None:
            cfg.solver = SolverConfig(
                scheme=args.scheme or cfg.solver.scheme,
                tol=args.tol if args.tol is not None else cfg.solver.tol,
                maxit=cfg.solver.maxit,
            )
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG

    if args.command == "solve":
        return cmd_solve(cfg, args.out)
    if args.command == "sweep":
        return cmd_sweep(cfg, args.out)
    if args.command == "symbol-dump":
        return cmd_symbol_dump(cfg, args.out)
    raise AssertionError


if __name__ == "__main__":
    sys.exit(main())
