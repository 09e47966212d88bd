"""Command-line front end.

Every subcommand writes plain-text tables (first line a ``#`` comment naming
units and columns) into the output directory together with ``manifest.json``.
Exit status: 0 success, 1 configuration error, 2 numerical failure (details in
``failure.txt``).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
import traceback
from dataclasses import asdict, dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from . import constructions as C
from . import diagnostics as D
from .dynamics import CollisionCoord, SingularEncounter, coord, dump_trajectory, sample_nu
from .geometry import REFERENCE_TABLES, Table, TableError, load_table
from .singularity import export_curves, slope_signs, trace_Sn, ztub_grid
from .sufficiency import ansatz_sampler, write_report
from .wavefront import kappa_profile

OUT_ENV = "SEMIDISPERSE_OUT"


class ConfigError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: int
    version: str
    outputs: list = field(default_factory=list)
    duration_s: float = 0.0

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def get_table(spec: str | None, default: str = "sinai") -> Table:
    """A table file path, or the name of a reference table."""
    spec = spec or default
    if spec in REFERENCE_TABLES and not Path(spec).exists():
        return REFERENCE_TABLES[spec]()
    if not Path(spec).exists():
        raise ConfigError(f"no table file {spec!r} (reference names: {', '.join(REFERENCE_TABLES)})")
    return load_table(spec)


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _u0(text: str | None):
    if not text:
        return None
    vals = _floats(text)
    if len(vals) != 4:
        raise ConfigError("--u0 takes component,r,phi,radius")
    return C.BaseNeighborhood(CollisionCoord(int(vals[0]), vals[1], vals[2]), vals[3])


class Writer:
    def __init__(self, out: Path):
        self.out = out
        self.files = []

    def path(self, name: str) -> Path:
        p = self.out / name
        self.files.append(str(p))
        return p

    def table(self, name, comment, header, rows):
        with open(self.path(name), "w", newline="") as fh:
            fh.write(f"# {comment}\n")
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([repr(x) if isinstance(x, float) else x for x in row])

    def json(self, name, obj):
        with open(self.path(name), "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _start_point(args, table) -> CollisionCoord:
    if args.r is not None:
        phi = 0.0 if args.phi is None else args.phi
        return coord(table, args.r, phi, args.component)
    comp, r, phi = sample_nu(table, 1, np.random.default_rng(args.seed))
    return CollisionCoord(int(comp[0]), float(r[0]), float(phi[0]))


# ------------------------------------------------------------ subcommands

def cmd_validate(args, w):
    table = get_table(args.table_path or args.table)
    rows = []
    for i, c in enumerate(table.components):
        rows.append((i, c.kind, int(c.material), float(c.length), float(c.curvature)))
    w.table("components.csv", "component_id; kind: segment|arc; material: 1 wall, 0 transparent; "
            "length: table units; curvature: 1/length (0 for segments)",
            ["component_id", "kind", "material", "length", "curvature"], rows)
    w.table("corners.csv", "corner_id; x, y: table units",
            ["corner_id", "x", "y"], [(i, float(p[0]), float(p[1])) for i, p in enumerate(table.corners)])
    n_mat = sum(c.material for c in table.components)
    print(f"{table.ambient} table: {n_mat} material components, "
          f"{len(table.components) - n_mat} transparent walls, {len(table.corners)} corners")


def cmd_simulate(args, w):
    table = get_table(args.table_path or args.table)
    x = _start_point(args, table)
    n = dump_trajectory(table, x, args.events, w.path("trajectory.csv"))
    print(f"{n} events written")
    if n < args.events:
        raise NumericalFailure(f"singular event after {n} of {args.events} events")


def cmd_trace_sing(args, w):
    table = get_table(args.table_path or args.table)
    curves = trace_Sn(table, args.order, args.resolution)
    export_curves(curves, w.path("singularities.csv"))
    rows = []
    for i, cv in enumerate(curves):
        sg = np.unique(slope_signs(cv))
        rows.append((i, cv.order, cv.source, cv.component, float(cv.length()),
                     int(sg[0]) if len(sg) == 1 else 0))
    w.table("curves.csv", "curve_id; order_n; source; component_id; length: (r, phi) arc length; "
            "slope_sign: sign of dphi/dr (0 if mixed)",
            ["curve_id", "order_n", "source", "component_id", "length", "slope_sign"], rows)
    print(f"{len(curves)} curves of S_{args.order}")


def cmd_ztub_map(args, w):
    table = get_table(args.table_path or args.table)
    rn, fn, z = ztub_grid(table, args.nr, args.nphi)
    rows = ((float(r), float(f), float(z[i, k])) for i, r in enumerate(rn) for k, f in enumerate(fn))
    w.table("ztub.csv", "r: arc length; phi: radians; z_tub: tubular radius (length units, nan "
            "on transparent walls)", ["r", "phi", "z_tub"], rows)


def cmd_kappa(args, w):
    table = get_table(args.table_path or args.table)
    x = _start_point(args, table)
    k0, kd = kappa_profile(table, x, args.nmax, args.delta)
    w.table("kappa.csv", f"n: iterates of T; kappa0: flat-front expansion; kappa_delta: "
            f"minimal expansion at delta={args.delta!r} (dimensionless); start "
            f"component={x.component} r={x.r!r} phi={x.phi!r}",
            ["n", "kappa0", "kappa_delta"],
            [(n + 1, float(a), float(b)) for n, (a, b) in enumerate(zip(k0, kd))])


def cmd_lemma21_fuzz(args, w):
    rep = C.lemma21_fuzz(args.n, args.eps0, args.seed)
    rows = [(k, v) for k, v in rep.items() if k != "cases"]
    rows += [(f"cases.{k}", v) for k, v in rep["cases"].items()]
    w.table("lemma21.csv", "key; value (tau in time units, residuals relative to the circle radius)",
            ["key", "value"], rows)
    bad = rep["tau_bound_violations"] + rep["circle_violations"] + rep["alignment_violations"]
    print(f"{rep['n']} pairs, cases {rep['cases']}, violations {bad}")
    if bad:
        raise NumericalFailure(f"{bad} embedding checks failed")


def _fixtures(args):
    kinds = ["sinai", "pocket"] if args.kind == "both" else [args.kind]
    out = []
    for k in kinds:
        out += C.make_fixtures(k, args.count, args.seed, n=args.n)
    return out


def cmd_sync_frame(args, w):
    fixtures = _fixtures(args)
    C.write_fixtures(w.path("fixtures.json"), fixtures)
    rows = []
    for i, fx in enumerate(fixtures):
        table = C.FIXTURE_TABLES[fx.table]()
        fr = C.build_sync_frame(table, fx.x, fx.n, eps1_floor=fx.eps1_floor)
        lmf = C.lmf_check(fr)
        rows.append((i, fx.table, fr.mode, fr.singular_kind, fr.eps1, fr.radius, fr.theta,
                     fr.reach, fr.eta, lmf["first"], lmf["second"], int(lmf["ok"])))
    w.table("frames.csv", "fixture_id; table; mode; singular_kind; eps1, radius, reach: length "
            "units; theta: radians; eta: time units; lmf_first, lmf_second: two-point products; "
            "lmf_ok: 1 if both >= -1e-12",
            ["fixture_id", "table", "mode", "singular_kind", "eps1", "radius", "theta", "reach",
             "eta", "lmf_first", "lmf_second", "lmf_ok"], rows)
    print(f"{len(rows)} frames, {sum(r[-1] for r in rows)} with nonnegative products")


def cmd_strip_check(args, w):
    fixtures = _fixtures(args)
    C.write_fixtures(w.path("fixtures.json"), fixtures)
    cols = ["table", "mode", "lmf_first", "lmf_ok", "footpoint_ok", "contained",
            "landing_in_u0", "min_edge_distance", "stable"]
    rows = []
    for i, fx in enumerate(fixtures):
        rep = C.check_fixture(fx, args.samples)
        rows.append([i] + [rep[c] if not isinstance(rep[c], bool) else int(rep[c]) for c in cols])
    w.table("strip.csv", "fixture_id; mode; lmf_first: two-point product; booleans as 0/1; "
            "min_edge_distance: length units; stable: verdict unchanged at doubled resolution",
            ["fixture_id"] + cols, rows)
    ok = sum(r[6] for r in rows)
    print(f"{ok}/{len(rows)} fixtures contained")


def _diag_config(args, **kw):
    return D.DiagnosticsConfig(deltas=tuple(args.deltas), c3=args.c3, base=args.base,
                               horizon=args.horizon, samples=args.samples, seed=args.seed,
                               past_horizon=args.past_horizon, **kw)


def cmd_tail(args, w):
    table = get_table(args.table_path or args.table)
    rep = D.tail_estimate(table, _u0(args.u0), _diag_config(args), workers=args.workers)
    rep.write_csv(w.path("tail.csv"))
    rows, dy = [], []
    for d in rep.per_delta:
        for n in range(1, args.horizon + 1):
            a, b = d.hist_n.get(n, 0), d.hist_tilde_n.get(n, 0)
            if a or b:
                rows.append((d.delta, n, a, b))
        dy += [(d.delta, n, m, c) for (n, m), c in d.hist_tilde_nm.items()]
    w.table("tail_hist.csv", "delta: length; n: iterate; count_bad: samples in U_n^b; "
            "count_witness: samples in the witness variant", ["delta", "n", "count_bad",
                                                              "count_witness"], rows)
    w.table("tail_dyadic.csv", "delta: length; n: iterate; m: floor(log_base kappa); count: "
            "samples of the witness variant in that (n, m) cell", ["delta", "n", "m", "count"], dy)
    w.table("tail_partition.csv", "delta: length; good, bad, undetermined: sample counts; "
            "flags: ';'-separated", ["delta", "good", "bad", "undetermined", "flags"],
            [(d.delta, d.good, d.bad, d.undetermined, ";".join(d.flags)) for d in rep.per_delta])
    w.json("tail.json", rep.to_dict())
    for d in rep.per_delta:
        print(f"delta={d.delta:g} ratio={d.ratio:.5g} +- {d.ratio_stderr:.2g} ({d.count_tail} samples)")


def cmd_calibrate_c3(args, w):
    table = get_table(args.table_path or args.table)
    rows = D.calibrate_c3(table, args.c3_values, _diag_config(args), _u0(args.u0), args.workers)
    w.table("calibrate.csv", "c3: dimensionless; delta: length; nu_tail_hat, stderr: fraction "
            "of nu; ratio: 1/length; decreasing: 1 if the ratio curve decreases within 2 sigma",
            ["c3", "delta", "nu_tail_hat", "stderr", "ratio", "decreasing"],
            [r[:5] + (int(r[5]),) for r in rows])


def cmd_ansatz(args, w):
    table = get_table(args.table_path or args.table)
    rep = ansatz_sampler(table, args.samples, args.horizon, args.seed, args.resolution)
    write_report(rep, w.path("ansatz.json"))
    w.table("ansatz.csv", "horizon: collisions; fraction: share of S_1 samples past sufficient "
            "within that horizon", ["horizon", "fraction"],
            sorted((int(h), float(f)) for h, f in rep["coverage_by_horizon"].items()))
    print(f"sufficient {rep['sufficient_fraction']:.6f}, undetermined {rep['undetermined_fraction']:.6f}")


def cmd_lyapunov(args, w):
    table = get_table(args.table_path or args.table)
    if args.period:
        starts = [_start_point(args, table)]
        res = [D.lyapunov_estimate(table, starts[0], args.n, args.seed, period=args.period)]
    else:
        if args.r is not None:
            starts = [_start_point(args, table)]
        else:
            comp, r, phi = sample_nu(table, args.starts, np.random.default_rng(args.seed))
            starts = [CollisionCoord(int(a), float(b), float(c)) for a, b, c in zip(comp, r, phi)]
        res = D.lyapunov_batch(table, starts, args.n, args.seed, workers=args.workers)
    w.table("lyapunov.csv", "start_id; component_id; r: arc length; phi: radians; exponent: "
            "per material collision; restarts: singular-encounter restarts",
            ["start_id", "component_id", "r", "phi", "exponent", "restarts"],
            [(i, s.component, s.r, s.phi, x.exponent, len(x.restarts))
             for i, (s, x) in enumerate(zip(starts, res))])
    w.table("lyapunov_trace.csv", "start_id; collisions; running estimate of the exponent",
            ["start_id", "collisions", "estimate"],
            [(i, int(c), float(v)) for i, x in enumerate(res) for c, v in zip(x.checkpoints, x.trace)])
    summ = D.lyapunov_dispersion(res)
    print(f"mean {summ['mean']:.6g}, relative dispersion {summ['relative_dispersion']:.3g}")


def cmd_birkhoff(args, w):
    table = get_table(args.table_path or args.table)
    x0 = _start_point(args, table) if args.r is not None else None
    rep = D.birkhoff_probe(table, x0, _u0(args.u0), args.functions, args.n, args.starts,
                           args.seed, workers=args.workers)
    rows = [(name, i, a) for name, f in rep["functions"].items() for i, a in enumerate(f["averages"])]
    w.table("birkhoff.csv", "function; start_id; average over N material collisions",
            ["function", "start_id", "average"], rows)
    w.table("birkhoff_summary.csv", "function; mean; dispersion: cross-start standard deviation",
            ["function", "mean", "dispersion"],
            [(name, f["mean"], f["dispersion"]) for name, f in rep["functions"].items()])
    for name, f in rep["functions"].items():
        print(f"{name}: mean {f['mean']:.6g}, dispersion {f['dispersion']:.3g}")


def cmd_invariance(args, w):
    table = get_table(args.table_path or args.table)
    rep = D.invariance_check(table, args.samples, args.seed, args.sampler, args.mapping, args.bins)
    rows = [("ks_r", rep["ks_r"]["statistic"], rep["ks_r"]["pvalue"], ""),
            ("ks_phi", rep["ks_phi"]["statistic"], rep["ks_phi"]["pvalue"], ""),
            ("chi2", rep["chi2"]["statistic"], rep["chi2"]["pvalue"], rep["chi2"]["dof"])]
    w.table("invariance.csv", "test; statistic; pvalue; dof (chi-square only)",
            ["test", "statistic", "pvalue", "dof"], rows)
    for r in rows:
        print(f"{r[0]}: statistic {r[1]:.4g}, p {r[2]:.4g}")


# ------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("table_path", nargs="?", help="table file (same as --table)")
    common.add_argument("--table", help="table file or reference name (square, sinai, pocket)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--workers", type=int, default=None, help="threads for sample loops")
    common.add_argument("--out", default="out", help=f"output directory (env {OUT_ENV} wins)")

    start = _Parser(add_help=False)
    start.add_argument("--component", type=int, default=None)
    start.add_argument("--r", type=float, default=None, help="arc length (random nu-point if absent)")
    start.add_argument("--phi", type=float, default=None)

    diag = _Parser(add_help=False)
    diag.add_argument("--deltas", type=_floats, default=[1e-2, 5e-3, 2.5e-3, 1.25e-3])
    diag.add_argument("--c3", type=float, default=0.1)
    diag.add_argument("--base", type=float, default=2.0, help="dyadic base Lambda")
    diag.add_argument("--horizon", type=int, default=30, help="collisions checked per sample")
    diag.add_argument("--samples", type=int, default=100_000)
    diag.add_argument("--past-horizon", type=int, default=200)
    diag.add_argument("--u0", default=None, help="component,r,phi,radius (default: all of M)")

    fix = _Parser(add_help=False)
    fix.add_argument("--kind", choices=["sinai", "pocket", "both"], default="both")
    fix.add_argument("--count", type=int, default=10, help="fixtures per kind")
    fix.add_argument("--n", type=int, default=2, help="iterate of the near-singular leg")

    p = _Parser(prog="semidisperse", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, parents=(), **kw):
        sp = sub.add_parser(name, parents=[common, *parents], **kw)
        sp.set_defaults(func=func)
        return sp

    add("validate", cmd_validate, help="check a table and list components and corners")
    sp = add("simulate", cmd_simulate, [start], help="write a trajectory")
    sp.add_argument("--events", type=int, default=1000)
    sp = add("trace-sing", cmd_trace_sing, help="trace singularity curves S_n")
    sp.add_argument("--order", type=int, default=1)
    sp.add_argument("--resolution", type=float, default=1e-3)
    sp = add("ztub-map", cmd_ztub_map, help="tubular radius on an (r, phi) grid")
    sp.add_argument("--nr", type=int, default=200)
    sp.add_argument("--nphi", type=int, default=200)
    sp = add("kappa", cmd_kappa, [start], help="expansion profiles kappa_{n,0}, kappa_{n,delta}")
    sp.add_argument("--nmax", type=int, default=20)
    sp.add_argument("--delta", type=float, default=1e-3)
    sp = add("lemma21-fuzz", cmd_lemma21_fuzz, help="fuzz the two-point front embedding")
    sp.add_argument("--eps0", type=float, default=1e-3)
    sp.add_argument("--n", type=int, default=100_000)
    add("sync-frame", cmd_sync_frame, [fix], help="synchronised fronts for bad-point fixtures")
    sp = add("strip-check", cmd_strip_check, [fix], help="strip containment of fixtures")
    sp.add_argument("--samples", type=int, default=200, help="rays across the front")
    add("tail", cmd_tail, [diag], help="tail-bound ratio curve")
    sp = add("calibrate-c3", cmd_calibrate_c3, [diag], help="tail ratio curves for several c3")
    sp.add_argument("--c3-values", type=_floats, default=[0.05, 0.1, 0.2, 0.5, 1.0])
    sp = add("ansatz", cmd_ansatz, help="past sufficiency of S_1 samples")
    sp.add_argument("--samples", type=int, default=10_000)
    sp.add_argument("--horizon", type=int, default=200)
    sp.add_argument("--resolution", type=float, default=1e-3)
    sp = add("lyapunov", cmd_lyapunov, [start], help="Lyapunov exponent per collision")
    sp.add_argument("--n", type=int, default=100_000, help="material collisions")
    sp.add_argument("--starts", type=int, default=100)
    sp.add_argument("--period", type=int, default=0, help="treat the start as a closed orbit")
    sp = add("birkhoff", cmd_birkhoff, [start], help="Birkhoff averages from many starts")
    sp.add_argument("--functions", action="append", default=None,
                    help="one | cos_phi | side:i,j (repeatable)")
    sp.add_argument("--n", type=int, default=100_000)
    sp.add_argument("--starts", type=int, default=50)
    sp.add_argument("--u0", default=None, help="component,r,phi,radius")
    sp = add("invariance", cmd_invariance, help="KS and chi-square tests of T-invariance of nu")
    sp.add_argument("--samples", type=int, default=1_000_000)
    sp.add_argument("--sampler", choices=["nu", "uniform"], default="nu")
    sp.add_argument("--mapping", choices=["T", "identity"], default="T")
    sp.add_argument("--bins", type=int, default=50)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    if args.command == "birkhoff" and not args.functions:
        args.functions = ["one", "cos_phi"]
    out = Path(os.environ.get(OUT_ENV) or args.out)
    out.mkdir(parents=True, exist_ok=True)
    w = Writer(out)
    config = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = RunManifest(args.command, argv, config, args.seed, _version())
    t0 = time.perf_counter()
    code = 0
    try:
        args.func(args, w)
    except (ConfigError, TableError, FileNotFoundError, C.PreconditionViolated) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        code = 1
    except (NumericalFailure, SingularEncounter, ArithmeticError, RuntimeError) as exc:
        p = w.path("failure.txt")
        p.write_text(f"{type(exc).__name__}: {exc}\n\n{traceback.format_exc()}")
        print(f"numerical failure: {exc} (see {p})", file=sys.stderr)
        code = 2
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        code = 1
    manifest.outputs = [f for f in w.files if Path(f).exists()]
    manifest.duration_s = time.perf_counter() - t0
    manifest.write(out / "manifest.json")
    return code


if __name__ == "__main__":
    sys.exit(main())
