"""
Batch front-end.

``signedbary solve --config run.json`` reads a JSON run configuration, solves,
diagnoses and writes the results to an output directory::

    barycenter.csv, barycenter.sbgd   the barycenter (node masses)
    potential_<k>.csv                 one per marginal, sorted order, 1-based
    history.csv                       one row per sweep
    report.txt                        key=value lines, every default included
    *.pgm + *_grid.csv                heatmaps, 2D only

Exit codes: 0 converged and verified, 2 converged but the saddle check is
unverified (or the one-positive-weight heuristic was used), 3 max_iters or
diverged, 1 input error.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .core import (
    CostModel,
    Grid,
    GridMeasure,
    Potential,
    Problem,
    gaussian_on_grid,
    ingest_density,
    read_binary,
    write_binary,
    write_density_csv,
)
from .errors import Diverged, InputError, MaxIters, SignedBarycenterError
from .solver import CONVERGED, SolverConfig, solve

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_UNVERIFIED = 2
EXIT_NOT_CONVERGED = 3

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# configuration


@dataclass
class DiagnosticsConfig:
    enabled: bool = True
    engine: str = None
    h_samples: int = 16
    mass_tol: float = 1e-4
    seed: int = 0


@dataclass
class RunConfig:
    """Everything a run needs. Lengths and sds are in box coordinates.

    ``marginals`` entries are one of ``{"gaussian": {"mean": [...], "sd": s}}``,
    ``{"csv": path, "density": false}`` or ``{"sbgd": path}``; relative paths
    resolve against the config file's directory.
    """

    grid: dict
    weights: list
    marginals: list
    cost: dict = field(default_factory=lambda: {"kind": "quadratic", "p": 2.0})
    ac_index: int = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)
    output: str = "out"
    base_dir: str = field(default=".", repr=False)

    @classmethod
    def from_dict(cls, raw, base_dir="."):
        raw = dict(raw)
        known = {f.name for f in fields(cls)} - {"base_dir"}
        extra = set(raw) - known
        if extra:
            raise InputError(f"unknown config keys: {sorted(extra)}")
        for key in ("grid", "weights", "marginals"):
            if key not in raw:
                raise InputError(f"config is missing '{key}'")
        try:
            raw["solver"] = SolverConfig(**raw.get("solver", {}))
            raw["diagnostics"] = DiagnosticsConfig(**raw.get("diagnostics", {}))
        except (TypeError, ValueError) as err:
            raise InputError(str(err)) from None
        cost = {"kind": "quadratic", "p": 2.0}
        cost.update(raw.get("cost", {}))
        raw["cost"] = cost
        return cls(base_dir=base_dir, **raw)

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as err:
            raise InputError(f"{path}: {err}") from None
        return cls.from_dict(raw, os.path.dirname(os.path.abspath(path)))

    def make_grid(self):
        g = self.grid
        try:
            return Grid(g["lower"], g["upper"], g["resolution"])
        except KeyError as err:
            raise InputError(f"grid needs lower, upper and resolution (missing {err})") from None

    def make_cost(self):
        kind = self.cost.get("kind", "quadratic")
        if kind == "quadratic":
            return CostModel.quadratic()
        if kind == "ppower":
            return CostModel.ppower(float(self.cost["p"]))
        raise InputError(f"unknown cost kind '{kind}'")

    def make_marginals(self, grid):
        out = []
        for spec in self.marginals:
            if "gaussian" in spec:
                gs = spec["gaussian"]
                out.append(gaussian_on_grid(grid, gs["mean"], float(gs["sd"])))
            elif "csv" in spec:
                out.append(ingest_density(self._path(spec["csv"]), grid, bool(spec.get("density", False))))
            elif "sbgd" in spec:
                mu = read_binary(self._path(spec["sbgd"]))
                if mu.grid != grid:
                    raise InputError(f"{spec['sbgd']} is on a different grid")
                out.append(mu)
            else:
                raise InputError(f"marginal source not understood: {spec}")
        return out

    def _path(self, p):
        p = os.path.join(self.base_dir, p)
        if not os.path.exists(p):
            raise InputError(f"no such file: {p}")
        return p

    def make_problem(self):
        grid = self.make_grid()
        return Problem.build(self.weights, self.make_marginals(grid), self.make_cost(), self.ac_index)

    def materialized(self):
        """Flat ``{key: value}`` with every default filled in."""
        flat = {}

        def walk(prefix, obj):
            if isinstance(obj, dict):
                for k, v in obj.items():
                    walk(f"{prefix}.{k}" if prefix else str(k), v)
            elif isinstance(obj, (list, tuple)) and obj and isinstance(obj[0], dict):
                for j, v in enumerate(obj):
                    walk(f"{prefix}.{j}", v)
            else:
                flat[prefix] = obj

        d = asdict(self)
        d.pop("base_dir")
        walk("config", d)
        return flat


# --------------------------------------------------------------------------
# writers


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (list, tuple)):
        return "[" + ",".join(_fmt(x) for x in v) + "]"
    if v is None:
        return "null"
    return str(v)


def write_report(path, items):
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{k}={_fmt(v)}\n" for k, v in items.items())


def write_history(path, history):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("sweep,dual_value,max_residual,step_size\n")
        fh.writelines(f"{k},{float(d)!r},{float(r)!r},{float(s)!r}\n" for k, (d, r, s) in enumerate(history))


def emit_heatmap(obj, path):
    """Write a 2D field as an 8-bit binary PGM plus a CSV of raw values.

    Pixel row ``i``, column ``j`` is node ``(i, j)``; grey levels scale linearly
    from the minimum (0) to the maximum (255). A constant field maps to 128.
    The CSV (``<stem>_grid.csv``) holds one line per first-axis index.
    """
    if isinstance(obj, (GridMeasure, Potential)):
        if obj.grid.dim != 2:
            raise InputError("heatmaps need a 2D field")
        values = obj.mass if isinstance(obj, GridMeasure) else obj.value
    else:
        values = np.asarray(obj, dtype=float)
        if values.ndim != 2:
            raise InputError("heatmaps need a 2D field")
    lo, hi = float(values.min()), float(values.max())
    if hi > lo:
        pix = np.rint(255.0 * (values - lo) / (hi - lo)).astype(np.uint8)
    else:
        pix = np.full(values.shape, 128, dtype=np.uint8)
    rows, cols = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())
    stem = os.path.splitext(path)[0]
    with open(stem + "_grid.csv", "w", encoding="utf-8") as fh:
        fh.writelines(",".join(repr(float(v)) for v in row) + "\n" for row in values)


def read_pgm(path):
    """Read back an 8-bit binary PGM written by :func:`emit_heatmap`."""
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise InputError("not a binary PGM")
    cols, rows = (int(t) for t in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=rows * cols).reshape(rows, cols)


def _collapse(nu):
    top = np.sort(nu.flat)[::-1]
    return bool(top[:3].sum() >= 0.5)


# --------------------------------------------------------------------------
# commands


def _threads():
    n = os.environ.get("SB_THREADS")
    if not n:
        return None
    try:
        n = int(n)
    except ValueError:
        raise InputError(f"SB_THREADS must be an integer, got '{n}'") from None
    if n < 1:
        raise InputError("SB_THREADS must be positive")
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return n


def run(config: RunConfig, out=None, engine=None, diagnostics=None, seed=None):
    """Execute a run and write its outputs. Returns the exit code."""
    out = out or config.output
    config.output = out
    if seed is not None:
        config.diagnostics.seed = seed
    if engine is not None:
        config.diagnostics.engine = engine
    if diagnostics is not None:
        config.diagnostics.enabled = diagnostics
    problem = config.make_problem()
    os.makedirs(out, exist_ok=True)
    report = config.materialized()
    report["run.sorted_to_config_order"] = list(problem.weights.perm)
    report["run.base_index"] = problem.base + 1

    if len(problem.weights.i_plus) < 2:
        from .oracle import solve_one_positive

        res = solve_one_positive(problem)
        nu = res.barycenter
        _write_measure(out, "barycenter", nu)
        report.update({
            "run.route": "one_positive_weight",
            "run.method": res.method,
            "run.certified": res.certified,
            "run.iterations": res.iterations,
            "result.primal_value": res.primal_value,
            "result.singular_collapse": _collapse(nu),
            "result.status": CONVERGED,
        })
        code = EXIT_OK if res.certified else EXIT_UNVERIFIED
        report["result.exit_code"] = code
        write_report(os.path.join(out, "report.txt"), report)
        return code

    dc = config.diagnostics
    result = solve(problem, config.solver, diagnostics=False)
    nu = result.barycenter
    _write_measure(out, "barycenter", nu)
    for k, f in enumerate(result.potentials, start=1):
        write_density_csv(os.path.join(out, f"potential_{k}.csv"), f)
        if problem.grid.dim == 2:
            emit_heatmap(f, os.path.join(out, f"potential_{k}.pgm"))
    write_history(os.path.join(out, "history.csv"), result.history)
    report.update({
        "run.route": "dual_solver",
        "result.status": result.status,
        "result.sweeps": len(result.history) - 1,
        "result.final_step_size": float(result.history[-1][2]),
        "result.max_residual": float(result.history[-1][1]),
        "result.singular_collapse": result.flags["singular_collapse"],
    })
    if result.status != CONVERGED:
        code = EXIT_NOT_CONVERGED
    elif not dc.enabled:
        code = EXIT_UNVERIFIED
    else:
        from .diagnostics import diagnose

        rec = diagnose(result, problem, engine=dc.engine, n_samples=dc.h_samples, seed=dc.seed,
                       mass_tol=dc.mass_tol)
        report.update({f"diagnostics.{k}": v for k, v in rec.to_report().items()})
        verified = rec.hard_gates_pass and rec.saddle_report.verified
        code = EXIT_OK if verified else EXIT_UNVERIFIED
    report["result.exit_code"] = code
    write_report(os.path.join(out, "report.txt"), report)
    return code


def _write_measure(out, stem, nu):
    write_density_csv(os.path.join(out, stem + ".csv"), nu)
    write_binary(os.path.join(out, stem + ".sbgd"), nu)
    if nu.grid.dim == 2:
        emit_heatmap(nu, os.path.join(out, stem + ".pgm"))


def _floats(text, what):
    try:
        return [float(t) for t in text.split(",")]
    except ValueError:
        raise InputError(f"{what} must be comma-separated numbers, got '{text}'") from None


def cmd_solve(args):
    config = RunConfig.load(args.config)
    return run(config, out=args.out, engine=args.engine,
               diagnostics=False if args.no_diagnostics else None, seed=args.seed)


def cmd_oracle(args):
    from .oracle import gaussian_signed_barycenter, signed_barycenter_1d

    a = _floats(args.a, "--a")
    gs = [_floats(g, "--gauss") for g in args.gauss]
    if any(len(g) != 2 for g in gs):
        raise InputError("--gauss takes mean,sd")
    if len(gs) != len(a):
        raise InputError(f"{len(a)} weights but {len(gs)} Gaussians")
    mean, sd, monotone = gaussian_signed_barycenter(a, [g[0] for g in gs], [g[1] for g in gs])
    grid = Grid([args.lower], [args.upper], [args.n])
    problem = Problem.build(a, [gaussian_on_grid(grid, [m], s) for m, s in gs])
    _, nu, flag = signed_barycenter_1d(problem)
    print(f"mean={mean!r}")
    print(f"sd={sd!r}")
    print(f"monotone={_fmt(monotone)}")
    print(f"grid_monotone={_fmt(flag)}")
    print(f"grid_mean={float(nu.mean()[0])!r}")
    if args.out:
        write_density_csv(args.out, nu)
    return EXIT_OK if flag else EXIT_UNVERIFIED


def cmd_check_transform(args):
    from .ctransform import transform_law_suite

    dims = (1, 2) if args.dim is None else (args.dim,)
    ok = True
    for d in dims:
        grid = Grid([0.0] * d, [1.0] * d, [args.n] * d)
        rep = transform_law_suite(grid, count=args.count, seed=args.seed)
        for line in rep.lines():
            print(line)
        print(f"{'PASS' if rep.ok else 'FAIL'} suite dim={d} seconds={rep.seconds:.2f}")
        ok &= rep.ok
    return EXIT_OK if ok else EXIT_UNVERIFIED


def build_parser():
    p = argparse.ArgumentParser(prog="signedbary", description="Signed Wasserstein barycenters on grids.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="run a JSON configuration")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default=None, help="output directory (default: config 'output')")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--engine", choices=("oracle1d", "smallexact", "dual2d"), default=None)
    s.add_argument("--no-diagnostics", action="store_true")
    s.set_defaults(func=cmd_solve)

    o = sub.add_parser("oracle", help="1D quantile-formula barycenter of Gaussians")
    o.add_argument("--a", required=True, help="comma-separated weights")
    o.add_argument("--gauss", action="append", required=True, metavar="M,S")
    o.add_argument("--n", type=int, default=256)
    o.add_argument("--lower", type=float, default=0.0)
    o.add_argument("--upper", type=float, default=1.0)
    o.add_argument("--out", default=None, help="write the grid barycenter as CSV")
    o.set_defaults(func=cmd_oracle)

    c = sub.add_parser("check-transform", help="run the c-transform law suite")
    c.add_argument("--n", type=int, default=64, help="nodes per axis")
    c.add_argument("--dim", type=int, choices=(1, 2), default=None, help="default: both")
    c.add_argument("--count", type=int, default=100)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_check_transform)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        _threads()
        return args.func(args)
    except (SignedBarycenterError, OSError, KeyError, TypeError, ValueError) as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_NOT_CONVERGED if isinstance(err, (Diverged, MaxIters)) else EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
