"""Command-line entry point: qtensor-lab {solve,sweep,diagnose,verify}.

Configs are plain ``key = value`` text with dotted keys for one level of
nesting (``solve.grad_tol = 1e-6``). Blank lines and ``#`` comments are
ignored. Unknown keys are rejected. Physics parameters (n, a, b, c and the
epsilon or epsilon list) have no defaults and must be given explicitly.

Exit codes: 0 ok, 1 usage/IO/format error, 2 solver did not converge,
3 a rate certificate failed.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import (
    ResolutionError,
    bad_set,
    monotonicity_profile,
    regular_scale_map,
    stress_energy_residual,
    weak_l3_quasinorm,
)
from .experiments import (
    BOUNDARY_MODES,
    SweepConfig,
    all_pass,
    default_centers,
    load_report,
    radius_ladder_for,
    rate_certificates,
    run_hedgehog_sweep,
)
from .grid import (
    Ball,
    FormatError,
    Grid,
    GridMismatch,
    QField,
    constant_boundary,
    energy_density,
    hedgehog_boundary,
    hedgehog_reference,
    load_field,
    save_field,
)
from .minimizer import STEP_POLICIES, NonFiniteEnergy, SolveOptions, discrete_energy, minimize
from .qtensor import MaterialParams, dist_to_vacuum

logger = logging.getLogger("qtensor_lab")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NOT_CONVERGED = 2
EXIT_CERTIFICATE = 3

INIT_MODES = ("core", "zero", "boundary-constant", "file")


class ConfigError(ValueError):
    """Bad config; ``key`` names the offending entry."""

    def __init__(self, key: str, msg: str):
        super().__init__(f"config key '{key}': {msg}")
        self.key = key


# -- config schema -----------------------------------------------------------
# key -> (parser, default); _REQUIRED marks keys with no default.

_REQUIRED = object()


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _point(text: str) -> tuple[float, float, float]:
    v = _floats(text)
    if len(v) != 3:
        raise ValueError("expected three coordinates")
    return v


def _points(text: str) -> list[tuple[float, float, float]]:
    return [_point(chunk) for chunk in text.split(";") if chunk.strip()]


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(options):
    def parse(text: str) -> str:
        t = text.strip()
        if t not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return t

    return parse


_PHYSICS = {
    "n": (int, _REQUIRED),
    "a": (float, _REQUIRED),
    "b": (float, _REQUIRED),
    "c": (float, _REQUIRED),
}
_SOLVER = {
    "solve.grad_tol": (float, None),
    "solve.max_iters": (int, 20000),
    "solve.step_policy": (_choice(STEP_POLICIES), "nonlinear-cg"),
    "solve.record_every": (int, 50),
}

SCHEMA: dict[str, dict] = {
    "solve": {
        **_PHYSICS,
        "epsilon": (float, _REQUIRED),
        "boundary": (_choice(BOUNDARY_MODES), "hedgehog"),
        "init": (_choice(INIT_MODES), "core"),
        "init.core_cells": (float, 3.0),
        "init.field": (str, None),
        "output.field": (str, "field.qtnf"),
        **_SOLVER,
    },
    "sweep": {
        **_PHYSICS,
        "epsilons": (_floats, _REQUIRED),
        "boundary": (_choice(BOUNDARY_MODES), "hedgehog"),
        "sweep.init_core_cells": (float, 3.0),
        "sweep.lp_exponents": (_floats, (1.5, 2.0, 2.5)),
        "sweep.resolution_floor": (float, 4.0),
        "sweep.cover_scale": (float, 4.0),
        "sweep.cover_delta_frac": (float, 0.1),
        "sweep.diagnostics": (_bool, True),
        "sweep.save_fields": (_bool, True),
        **_SOLVER,
    },
    "diagnose": {
        "field": (str, _REQUIRED),
        "diagnose.centers": (_points, None),
        "diagnose.radii": (_floats, None),
        "diagnose.region_center": (_point, (0.0, 0.0, 0.0)),
        "diagnose.region_radius": (float, 0.5),
        "diagnose.bad_r": (float, None),
        "diagnose.bad_delta_frac": (float, 0.1),
    },
    "verify": {
        "report": (str, _REQUIRED),
    },
}


def parse_config_text(text: str, command: str) -> dict:
    """Parse ``key = value`` lines against the schema for ``command``."""
    schema = SCHEMA[command]
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"line {lineno} is not of the form key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in schema:
            raise ConfigError(key, f"unknown key for '{command}'")
        if key in raw:
            raise ConfigError(key, "given twice")
        raw[key] = value

    cfg = {}
    for key, (parse, default) in schema.items():
        if key in raw:
            try:
                cfg[key] = parse(raw[key])
            except ValueError as exc:
                raise ConfigError(key, str(exc)) from None
        elif default is _REQUIRED:
            raise ConfigError(key, "required (no default for this parameter)")
        else:
            cfg[key] = default
    return cfg


def load_config(path, command: str) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    return parse_config_text(text, command)


def format_config(cfg: dict) -> str:
    """Inverse of parse_config_text; ``None`` entries are omitted."""
    lines = []
    for key, value in cfg.items():
        if value is None:
            continue
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        elif isinstance(value, list):
            text = "; ".join(" ".join(repr(float(c)) for c in pt) for pt in value)
        elif isinstance(value, tuple):
            text = " ".join(repr(float(v)) for v in value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def _params(cfg: dict) -> MaterialParams:
    try:
        return MaterialParams(cfg["a"], cfg["b"], cfg["c"])
    except ValueError as exc:
        raise ConfigError("a/b/c", str(exc)) from None


def _solve_options(cfg: dict) -> SolveOptions:
    try:
        return SolveOptions(
            grad_tol=cfg["solve.grad_tol"],
            max_iters=cfg["solve.max_iters"],
            step_policy=cfg["solve.step_policy"],
            record_every=cfg["solve.record_every"],
        )
    except ValueError as exc:
        raise ConfigError("solve.*", str(exc)) from None


def _grid(cfg: dict) -> Grid:
    try:
        return Grid(cfg["n"])
    except ValueError as exc:
        raise ConfigError("n", str(exc)) from None


# -- commands ----------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2))
    tmp.replace(path)


def cmd_solve(cfg: dict, out: Path) -> int:
    grid = _grid(cfg)
    p = _params(cfg)
    eps = cfg["epsilon"]
    if not eps > 0:
        raise ConfigError("epsilon", "must be positive")
    opts = _solve_options(cfg)

    if cfg["boundary"] == "hedgehog":
        values, mask = hedgehog_boundary(grid, p)
    else:
        values, mask = constant_boundary(grid, p)

    init = cfg["init"]
    if init == "file":
        if not cfg["init.field"]:
            raise ConfigError("init.field", "required when init = file")
        start = load_field(cfg["init.field"])
        if start.grid.n != grid.n:
            raise GridMismatch(f"init.field has n={start.grid.n}, config has n={grid.n}")
        data = start.data.copy()
    elif init == "core" and cfg["boundary"] == "hedgehog":
        data = hedgehog_reference(grid, p, cfg["init.core_cells"] * grid.h).data
    elif init == "zero":
        data = np.zeros(grid.shape + (5,))
    else:
        data = np.broadcast_to(values[mask][0], grid.shape + (5,)).copy()
    data[mask] = values[mask]

    fld = QField(grid, data, mask, eps, p)
    result, stats = minimize(fld, opts)
    save_field(result, out / cfg["output.field"])
    el, bulk, total = discrete_energy(result)
    summary = stats.as_dict()
    summary.update({"elastic": el, "bulk": bulk, "total": total, "epsilon": eps, "n": grid.n})
    _write_json(out / "stats.json", summary)
    print(f"solve: {stats.iterations} iterations, converged={stats.converged}, energy={total:.10g}")
    if not stats.converged:
        print(f"solve: not converged (gradient {stats.final_grad_norm:.3g} > tol {stats.grad_tol:.3g})", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def sweep_config_from(cfg: dict) -> SweepConfig:
    try:
        return SweepConfig(
            n=cfg["n"],
            params=_params(cfg),
            epsilons=cfg["epsilons"],
            solve=_solve_options(cfg),
            lp_exponents=cfg["sweep.lp_exponents"],
            boundary=cfg["boundary"],
            init_core_cells=cfg["sweep.init_core_cells"],
            resolution_floor=cfg["sweep.resolution_floor"],
            cover_scale=cfg["sweep.cover_scale"],
            cover_delta_frac=cfg["sweep.cover_delta_frac"],
            diagnostics=cfg["sweep.diagnostics"],
        )
    except ValueError as exc:
        raise ConfigError("epsilons/n/sweep.*", str(exc)) from None


def _print_verdicts(verdicts: dict) -> None:
    for name, v in verdicts.items():
        print(f"{'PASS' if v['pass'] else 'FAIL'} {name}: value={v['value']} limit={v['limit']}")


def cmd_sweep(cfg: dict, out: Path) -> int:
    sc = sweep_config_from(cfg)
    report = run_hedgehog_sweep(sc, out_dir=out, save_fields=cfg["sweep.save_fields"])
    _print_verdicts(report.verdicts)
    if not all(r["converged"] for r in report.rows):
        return EXIT_NOT_CONVERGED
    return EXIT_OK if all_pass(report.verdicts) else EXIT_CERTIFICATE


def cmd_diagnose(cfg: dict, out: Path) -> int:
    fld = load_field(cfg["field"])
    h = fld.h
    dens = energy_density(fld)

    centers = cfg["diagnose.centers"] or default_centers()
    rows = []
    for center in centers:
        radii = cfg["diagnose.radii"] or radius_ladder_for(center, h)
        try:
            values, viol = monotonicity_profile(fld, center, radii, dens)
        except ResolutionError as exc:
            raise ConfigError("diagnose.radii", str(exc)) from None
        for r, v, d in zip(radii, values, [0.0] + list(viol)):
            rows.append((*center, r, v, d))
    with open(out / "theta_profile.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "z", "r", "theta", "violation"])
        for row in rows:
            w.writerow([repr(float(v)) for v in row])

    region = Ball(cfg["diagnose.region_center"], cfg["diagnose.region_radius"])
    el, bulk, total = discrete_energy(fld)
    scale = regular_scale_map(fld, dens)
    inside = region.mask(fld.grid)
    summary = {
        "n": fld.grid.n,
        "epsilon": fld.epsilon,
        "a": fld.params.a,
        "b": fld.params.b,
        "c": fld.params.c,
        "elastic": el,
        "bulk": bulk,
        "total": total,
        "regular_scale_min": float(scale[inside].min()) if inside.any() else None,
        "dist_to_vacuum_max": float(dist_to_vacuum(fld.data[inside], fld.params).max()) if inside.any() else None,
        "weak_l3": weak_l3_quasinorm(fld, region) if inside.any() else None,
        "stress_energy_residual": stress_energy_residual(fld, region),
    }
    bad_r = cfg["diagnose.bad_r"]
    if bad_r is None and np.isfinite(fld.epsilon):
        bad_r = min(1.0, 4.0 * fld.epsilon)
    if bad_r is not None:
        delta = cfg["diagnose.bad_delta_frac"] * fld.params.s_star
        bs = bad_set(fld, region, bad_r, delta, density=dens, scale_map=scale)
        pts = bs.points(fld)
        summary["bad_r"] = bad_r
        summary["bad_delta"] = delta
        summary["bad_count"] = bs.count
        summary["bad_max_radius"] = float(np.linalg.norm(pts, axis=1).max()) if len(pts) else 0.0
    _write_json(out / "diagnostics.json", summary)
    print(f"diagnose: {len(rows)} profile rows, energy={total:.10g}")
    return EXIT_OK


def cmd_verify(cfg: dict, out: Path) -> int:
    """Recompute certificates from a stored sweep report."""
    path = Path(cfg["report"])
    try:
        report = load_report(path)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigError("report", f"cannot load {path}: {exc}") from None
    verdicts = rate_certificates(report)
    _write_json(out / "verdicts.json", verdicts)
    _print_verdicts(verdicts)
    if report.verdicts and json.loads(json.dumps(verdicts)) != report.verdicts:
        logger.warning("stored verdicts differ from recomputed ones")
    return EXIT_OK if all_pass(verdicts) else EXIT_CERTIFICATE


COMMANDS = {"solve": cmd_solve, "sweep": cmd_sweep, "diagnose": cmd_diagnose, "verify": cmd_verify}


# -- entry point -------------------------------------------------------------


def _thread_limit(threads: int | None):
    if threads is None:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        logger.warning("threadpoolctl not installed; --threads ignored")
        return contextlib.nullcontext()
    return threadpool_limits(limits=threads)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qtensor-lab", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="key = value config file")
    ap.add_argument("--out", required=True, help="output directory (created if absent)")
    ap.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread cap")
    ap.add_argument("--deterministic", action="store_true", help="single-threaded reductions")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE

    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    if args.threads is not None and args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    threads = 1 if args.deterministic else args.threads

    try:
        cfg = load_config(args.config, args.command)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "effective_config.txt").write_text(format_config(cfg))
        with _thread_limit(threads):
            return COMMANDS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, GridMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteEnergy as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED


if __name__ == "__main__":
    sys.exit(main())
