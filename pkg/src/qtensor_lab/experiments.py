"""Hedgehog epsilon-continuation sweep, scaling fits and rate certificates."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import (
    cover_bad_set,
    mask_neighborhood_volume,
    monotonicity_profile,
    neighborhood_volume,
    phase_histogram,
    regular_scale,
    regular_scale_map,
    bad_set,
    relative_violations,
    stress_energy_residual,
    weak_l3_quasinorm,
)
from .grid import (
    Ball,
    Grid,
    GridMismatch,
    QField,
    bulk_density,
    energy_density,
    hedgehog_reference,
    integrate_ball,
    save_field,
    vacuum_field,
)
from .minimizer import NonFiniteEnergy, SolveOptions, discrete_energy, el_residual_check, minimize
from .qtensor import MaterialParams, norm_sq

logger = logging.getLogger(__name__)

DEFAULT_EPSILONS = (0.25, 0.18, 0.13, 0.09, 0.065)
BOUNDARY_MODES = ("hedgehog", "constant-vacuum")

CSV_COLUMNS = [
    "epsilon",
    "under_resolved",
    "converged",
    "iterations",
    "final_grad_norm",
    "elastic",
    "bulk",
    "total",
    "bulk_int_B34",
    "bulk_int_B12",
    "scaled_bulk_B12",
    "rate_ratio_B12",
    "cubic_ratio_B34",
    "lp_1.5",
    "lp_2",
    "lp_2.5",
    "weak_l3_B12",
    "bad_count",
    "bad_max_radius",
    "cover_balls",
    "cover_max_center",
    "cover_contains_mask",
    "minkowski_volume",
    "minkowski_constant",
    "monotonicity_worst",
    "el_residual",
    "eps_grad_sup",
    "regular_scale_origin",
    "regular_scale_half",
    "regular_scale_c0",
    "stress_energy_residual",
]


class DegenerateInput(ValueError):
    """A scaling fit was requested on points with a single abscissa."""


@dataclass
class SweepConfig:
    n: int = 64
    params: MaterialParams = field(default_factory=MaterialParams)
    epsilons: tuple[float, ...] = DEFAULT_EPSILONS
    solve: SolveOptions = field(default_factory=SolveOptions)
    regions: dict[str, Ball] = field(
        default_factory=lambda: {"B34": Ball((0, 0, 0), 0.75), "B12": Ball((0, 0, 0), 0.5)}
    )
    lp_exponents: tuple[float, ...] = (1.5, 2.0, 2.5)
    boundary: str = "hedgehog"
    init_core_cells: float = 3.0
    resolution_floor: float = 4.0  # epsilon >= floor * h, else the row is flagged
    cover_scale: float = 4.0  # covering radius r = cover_scale * epsilon
    cover_delta_frac: float = 0.1  # delta = frac * s_*
    diagnostics: bool = True

    def __post_init__(self) -> None:
        self.epsilons = tuple(float(e) for e in self.epsilons)
        if not self.epsilons:
            raise ValueError("need at least one epsilon")
        if any(b >= a for a, b in zip(self.epsilons, self.epsilons[1:])):
            raise ValueError("epsilons must be strictly decreasing")
        if any(e <= 0 for e in self.epsilons):
            raise ValueError("epsilons must be positive")
        if self.boundary not in BOUNDARY_MODES:
            raise ValueError(f"boundary must be one of {BOUNDARY_MODES}")
        for p in self.lp_exponents:
            if not 1 < p < math.inf:
                raise ValueError(f"L^p exponent must lie in (1, inf), got {p}")
        Grid(self.n)

    @property
    def grid(self) -> Grid:
        return Grid(self.n)

    def as_dict(self) -> dict:
        d = {
            "n": self.n,
            "a": self.params.a,
            "b": self.params.b,
            "c": self.params.c,
            "epsilons": list(self.epsilons),
            "solve": asdict(self.solve),
            "regions": {k: [list(v.center), v.radius] for k, v in self.regions.items()},
            "lp_exponents": list(self.lp_exponents),
            "boundary": self.boundary,
            "init_core_cells": self.init_core_cells,
            "resolution_floor": self.resolution_floor,
            "cover_scale": self.cover_scale,
            "cover_delta_frac": self.cover_delta_frac,
        }
        return d

    def digest(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Fit:
    slope: float
    intercept: float
    max_residual: float
    points: int


@dataclass
class SweepReport:
    config: dict
    rows: list[dict]
    fit: Fit | None
    provenance: dict
    reference_l2_B12: float = 0.0
    verdicts: dict = field(default_factory=dict)

    def column(self, key: str) -> list:
        return [row[key] for row in self.rows]

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "rows": self.rows,
            "fit": asdict(self.fit) if self.fit else None,
            "provenance": self.provenance,
            "reference_l2_B12": self.reference_l2_B12,
            "verdicts": self.verdicts,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SweepReport":
        fit = Fit(**d["fit"]) if d.get("fit") else None
        return cls(d["config"], d["rows"], fit, d["provenance"], d.get("reference_l2_B12", 0.0), d.get("verdicts", {}))


# -- pure helpers ------------------------------------------------------------


def fit_scaling(pairs) -> Fit:
    """Least-squares line through (log eps, log value)."""
    pairs = list(pairs)
    if len(pairs) < 2:
        raise DegenerateInput("need at least two points")
    x = np.log([p[0] for p in pairs])
    vals = np.array([p[1] for p in pairs], dtype=float)
    if np.any(vals <= 0):
        raise ValueError("values must be positive")
    y = np.log(vals)
    if np.ptp(x) == 0:
        raise DegenerateInput("all epsilons are equal")
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    return Fit(float(slope), float(intercept), float(np.max(np.abs(resid))), len(pairs))


def lp_distance(fld: QField, reference: QField, p: float, region: Ball) -> float:
    """(h^3 sum_{region} |Q - Q_ref|^p)^(1/p), origin node excluded."""
    if fld.grid != reference.grid:
        raise GridMismatch(f"grids differ: n={fld.grid.n} vs n={reference.grid.n}")
    if not 1 < p < math.inf:
        raise ValueError("p must lie in (1, inf)")
    diff = np.sqrt(norm_sq(fld.data - reference.data))
    sel = region.mask(fld.grid) & (fld.grid.radius > 0)
    return float((fld.h**3 * np.sum(diff[sel] ** p)) ** (1.0 / p))


def default_centers() -> list[tuple[float, float, float]]:
    """Origin plus eight off-centre points used for monotonicity profiles."""
    pts = [(0.0, 0.0, 0.0)]
    for ax in range(3):
        for sgn in (1.0, -1.0):
            v = [0.0, 0.0, 0.0]
            v[ax] = 0.2 * sgn
            pts.append(tuple(v))
    pts.append((0.12, 0.12, 0.12))
    pts.append((-0.12, 0.12, -0.12))
    return pts


def radius_ladder_for(center, h: float, r_max: float = 0.3) -> list[float]:
    """Radii in [2h, r_max] whose weight support stays inside the cube."""
    reach = 1.0 - max(abs(c) for c in center)
    top = min(r_max, reach / math.sqrt(10.0))
    lo = max(2.0 * h, 0.1)
    if top <= lo:
        return [2.0 * h]
    return list(np.round(np.linspace(lo, top, 5), 10))


# -- per-field diagnostics ---------------------------------------------------


def diagnose_field(fld: QField, cfg: SweepConfig, reference: QField | None) -> dict:
    p = fld.params
    eps = fld.epsilon
    grid = fld.grid
    b34, b12 = cfg.regions["B34"], cfg.regions["B12"]
    row: dict = {}
    el, bulk, total = discrete_energy(fld)
    row.update(elastic=el, bulk=bulk, total=total)
    fb = bulk_density(fld)
    row["bulk_int_B34"] = integrate_ball(grid, fb, b34)
    row["bulk_int_B12"] = integrate_ball(grid, fb, b12)
    row["scaled_bulk_B12"] = row["bulk_int_B12"] / eps**2
    row["rate_ratio_B12"] = row["scaled_bulk_B12"] / eps
    row["cubic_ratio_B34"] = row["bulk_int_B34"] / eps**3
    if reference is not None:
        for q in cfg.lp_exponents:
            row[f"lp_{q:g}"] = lp_distance(fld, reference, q, b12)
    row["weak_l3_B12"] = weak_l3_quasinorm(fld, b12)
    if not cfg.diagnostics:
        return row

    density = energy_density(fld)
    scale_map = regular_scale_map(fld, density)
    r_cov = min(1.0, cfg.cover_scale * eps)
    delta = cfg.cover_delta_frac * p.s_star
    bad = bad_set(fld, b12, r_cov, delta, scale_map=scale_map)
    pts = grid.coords[bad.mask]
    row["bad_count"] = bad.count
    row["bad_max_radius"] = float(np.sqrt(np.sum(pts**2, axis=-1)).max()) if len(pts) else 0.0
    cover = cover_bad_set(fld, b12, r_cov, delta, density=density, target=bad)
    row["cover_balls"] = cover.count
    row["cover_max_center"] = max((float(np.linalg.norm(b.center)) for b in cover.balls), default=0.0)
    row["cover_contains_mask"] = cover.covers(fld)
    row["cover_radii"] = [b.radius for b in cover.balls]
    row["cover_pinch_levels"] = len(cover.pinch_trace)
    vol = neighborhood_volume(fld, cover.balls, b12, r_cov)
    row["minkowski_volume"] = vol
    row["minkowski_constant"] = vol / r_cov**3
    row["bad_neighborhood_constant"] = mask_neighborhood_volume(fld, bad.mask, r_cov) / r_cov**3

    worst = 0.0
    profiles = []
    for c in default_centers():
        radii = radius_ladder_for(c, fld.h)
        vals, viol = monotonicity_profile(fld, c, radii, density)
        rel = relative_violations(vals, viol)
        # allowance 5h/r at the smaller radius of each pair
        score = max((v / (5.0 * fld.h / r) for v, r in zip(rel, radii)), default=0.0)
        worst = max(worst, score)
        profiles.append({"center": list(c), "radii": radii, "theta": vals, "relative_violations": rel})
    row["monotonicity_worst"] = worst  # <= 1 means within 5h/r everywhere
    row["monotonicity_profiles"] = profiles

    residual, eps_grad = el_residual_check(fld, b12)
    row["el_residual"] = residual
    row["eps_grad_sup"] = eps_grad
    row["regular_scale_origin"] = regular_scale(fld, (0.0, 0.0, 0.0), density)
    row["regular_scale_half"] = regular_scale(fld, (0.5, 0.0, 0.0), density)
    inside = b12.mask(grid)
    row["regular_scale_c0"] = float(scale_map[inside].min() / eps)
    row["stress_energy_residual"] = stress_energy_residual(fld, Ball((0.3, 0.0, 0.0), 0.4))
    row["phase_histogram_B015"] = phase_histogram(fld, Ball((0, 0, 0), 0.15))
    return row


# -- sweep -------------------------------------------------------------------


def initial_field(cfg: SweepConfig) -> QField:
    grid = cfg.grid
    p = cfg.params
    eps0 = cfg.epsilons[0]
    if cfg.boundary == "constant-vacuum":
        return vacuum_field(grid, p, eps0)
    return hedgehog_reference(grid, p, cfg.init_core_cells * grid.h, eps0)


def run_hedgehog_sweep(cfg: SweepConfig, out_dir: str | os.PathLike | None = None, save_fields: bool = True) -> SweepReport:
    """Warm-started minimization at each epsilon, then diagnostics per row."""
    grid = cfg.grid
    h = grid.h
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if cfg.boundary == "hedgehog":
        reference = hedgehog_reference(grid, cfg.params, 0.0)
    else:
        reference = vacuum_field(grid, cfg.params)

    fld = initial_field(cfg)
    rows = []
    for eps in cfg.epsilons:
        under = eps < cfg.resolution_floor * h
        if under:
            logger.warning("epsilon %.4g below %.0fh = %.4g: defect core under-resolved", eps, cfg.resolution_floor, cfg.resolution_floor * h)
        fld = fld.with_epsilon(eps)
        try:
            fld, stats = minimize(fld, cfg.solve)
        except NonFiniteEnergy:
            logger.error("non-finite energy at epsilon %.4g; aborting sweep", eps)
            raise
        logger.info("eps=%.4g: %d iterations, converged=%s, %.1fs", eps, stats.iterations, stats.converged, stats.wall_time)
        row = {
            "epsilon": eps,
            "under_resolved": under,
            "converged": stats.converged,
            "iterations": stats.iterations,
            "final_grad_norm": stats.final_grad_norm,
            "solver": stats.as_dict(),
        }
        row.update(diagnose_field(fld, cfg, reference))
        # report integrity: energies straight from the solver's last trace entry
        _, el, bulk, total = stats.energy_trace[-1]
        row["solver_total"] = total
        rows.append(row)
        if out is not None and save_fields:
            save_field(fld, out / f"field_eps{eps:.4f}.qtnf")

    fit = None
    pairs = [(r["epsilon"], r["bulk_int_B34"]) for r in rows if r["bulk_int_B34"] > 0]
    if len(pairs) >= 2 and len(pairs) == len(rows):
        try:
            fit = fit_scaling(pairs)
        except DegenerateInput:
            fit = None

    ref_norm = 0.0
    if cfg.boundary == "hedgehog":
        zero = QField(grid, np.zeros_like(reference.data), reference.mask, reference.epsilon, reference.params)
        ref_norm = lp_distance(reference, zero, 2.0, cfg.regions["B12"])

    report = SweepReport(
        config=cfg.as_dict(),
        rows=rows,
        fit=fit,
        provenance={"config_hash": cfg.digest(), "code_version": __version__, "numpy": np.__version__},
        reference_l2_B12=ref_norm,
    )
    report.verdicts = rate_certificates(report)
    if out is not None:
        write_report(report, out)
    return report


# -- certificates ------------------------------------------------------------


def _spread(values) -> float:
    values = [v for v in values]
    if not values or min(values) <= 0:
        return math.inf
    return max(values) / min(values)


def rate_certificates(report: SweepReport) -> dict[str, dict]:
    """Evaluate every sweep-level acceptance predicate.

    Returns ``{name: {"pass": bool, "value": ..., "limit": ...}}``.
    """
    rows = report.rows
    out: dict[str, dict] = {}

    def put(name, ok, value, limit):
        out[name] = {"pass": bool(ok), "value": value, "limit": limit}

    fit = report.fit
    put("slope_window", fit is not None and 2.5 <= fit.slope <= 3.5 and fit.points >= 4,
        None if fit is None else fit.slope, [2.5, 3.5])

    spread = _spread([r["rate_ratio_B12"] for r in rows])
    put("upper_rate_ratio", len(rows) >= 2 and spread <= 4.0, spread, 4.0)

    tail = rows[-3:]
    cubic = [r["cubic_ratio_B34"] for r in tail]
    spread3 = _spread(cubic)
    put("lower_rate_ratio", len(tail) == 3 and min(cubic) > 0 and spread3 <= 4.0, spread3, 4.0)

    lp_keys = sorted(k for k in rows[0] if k.startswith("lp_")) if rows else []
    dec = all(all(b[k] < a[k] for a, b in zip(rows, rows[1:])) for k in lp_keys)
    put("lp_decreasing", bool(lp_keys) and len(rows) >= 2 and dec, {k: [r[k] for r in rows] for k in lp_keys}, "strict")
    final_l2 = rows[-1].get("lp_2") if rows else None
    limit = 0.1 * report.reference_l2_B12
    put("lp_final_l2", final_l2 is not None and final_l2 <= limit, final_l2, limit)

    q_spread = _spread([r["weak_l3_B12"] for r in rows])
    put("weak_l3_uniform", q_spread <= 2.0, q_spread, 2.0)

    if rows and "monotonicity_worst" in rows[0]:
        worst = max(r["monotonicity_worst"] for r in rows)
        put("monotonicity", worst <= 1.0, worst, 1.0)

        last = rows[-1]
        put("bad_set_nonempty", last["bad_count"] > 0, last["bad_count"], "> 0")
        put("bad_set_localized", last["bad_count"] > 0 and last["bad_max_radius"] < 0.15, last["bad_max_radius"], 0.15)
        put("cover_count", last["cover_balls"] <= 16, last["cover_balls"], 16)
        put("cover_contains_mask", all(r["cover_contains_mask"] for r in rows), [r["cover_contains_mask"] for r in rows], True)
        mk = [r["minkowski_constant"] for r in tail]
        put("minkowski_stable", len(tail) == 3 and _spread(mk) <= 4.0, _spread(mk), 4.0)

    put("all_converged", all(r["converged"] for r in rows), [r["converged"] for r in rows], True)
    return out


def all_pass(verdicts: dict) -> bool:
    return all(v["pass"] for v in verdicts.values())


# -- output ------------------------------------------------------------------


def _jsonable(o):
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o)}")


def write_report(report: SweepReport, out: Path) -> None:
    out = Path(out)
    csv_tmp = out / "report.csv.tmp"
    with open(csv_tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for row in report.rows:
            w.writerow([_fmt(row.get(k, "")) for k in CSV_COLUMNS])
    csv_tmp.replace(out / "report.csv")

    json_tmp = out / "report.json.tmp"
    json_tmp.write_text(json.dumps(report.to_json(), indent=2, default=_jsonable))
    json_tmp.replace(out / "report.json")

    write_plot_data(report, out / "plot_bulk_vs_eps.txt")


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, float):
        return repr(v)
    return v


def write_plot_data(report: SweepReport, path: Path) -> None:
    """Whitespace-separated columns: eps, int_B34 f, fitted line value."""
    lines = ["# epsilon bulk_int_B34 fit"]
    for row in report.rows:
        eps = row["epsilon"]
        fitted = math.exp(report.fit.intercept) * eps**report.fit.slope if report.fit else float("nan")
        lines.append(f"{eps!r} {row['bulk_int_B34']!r} {fitted!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_report(path) -> SweepReport:
    return SweepReport.from_json(json.loads(Path(path).read_text()))
