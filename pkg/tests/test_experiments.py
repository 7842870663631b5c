import csv
import json
import math

import numpy as np
import pytest

from qtensor_lab.experiments import (
    CSV_COLUMNS,
    DegenerateInput,
    SweepConfig,
    SweepReport,
    all_pass,
    fit_scaling,
    load_report,
    lp_distance,
    rate_certificates,
    run_hedgehog_sweep,
)
from qtensor_lab.grid import Ball, Grid, GridMismatch, hedgehog_reference, load_field
from qtensor_lab.minimizer import SolveOptions
from qtensor_lab.qtensor import MaterialParams, from_matrix

P1 = MaterialParams()
B12 = Ball((0, 0, 0), 0.5)


@pytest.fixture(scope="module")
def small_sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    rep = run_hedgehog_sweep(SweepConfig(n=32, epsilons=(0.3, 0.2, 0.13)), out_dir=out)
    return rep, out


# -- fits --------------------------------------------------------------------


def test_fit_exact_cubic():
    fit = fit_scaling([(1, 8), (2, 64), (4, 512)])
    assert fit.slope == pytest.approx(3.0, abs=1e-12)
    assert fit.intercept == pytest.approx(math.log(8), abs=1e-12)
    assert fit.max_residual <= 1e-12
    assert fit.points == 3


def test_fit_flat_and_degenerate():
    assert fit_scaling([(1, 5.0), (2, 5.0)]).slope == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DegenerateInput):
        fit_scaling([(0.1, 1.0), (0.1, 2.0)])
    with pytest.raises(DegenerateInput):
        fit_scaling([(0.1, 1.0)])
    with pytest.raises(ValueError):
        fit_scaling([(0.1, 1.0), (0.2, -1.0)])


# -- L^p distances -----------------------------------------------------------


def test_lp_distance_examples():
    g = Grid(32)
    ref = hedgehog_reference(g, P1)
    assert lp_distance(ref, ref, 2.0, B12) == 0.0
    a = from_matrix(np.diag([0.2, -0.1, -0.1]))
    shifted = ref.copy(data=ref.data + a)
    nodes = np.count_nonzero(B12.mask(g) & (g.radius > 0))
    vol = nodes * g.h**3
    for p in (1.5, 2.0, 2.5):
        d = lp_distance(shifted, ref, p, B12)
        assert d == pytest.approx(np.linalg.norm(a) * vol ** (1 / p), rel=1e-12)
        assert d == pytest.approx(np.linalg.norm(a) * (4 / 3 * math.pi / 8) ** (1 / p), rel=0.1)


def test_lp_distance_errors():
    with pytest.raises(GridMismatch):
        lp_distance(hedgehog_reference(Grid(16), P1), hedgehog_reference(Grid(17), P1), 2.0, B12)
    ref = hedgehog_reference(Grid(16), P1)
    with pytest.raises(ValueError):
        lp_distance(ref, ref, 1.0, B12)


# -- config ------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        SweepConfig(epsilons=(0.1, 0.2))
    with pytest.raises(ValueError):
        SweepConfig(epsilons=(0.2, 0.2))
    with pytest.raises(ValueError):
        SweepConfig(boundary="periodic")
    with pytest.raises(ValueError):
        SweepConfig(lp_exponents=(1.0,))
    a, b = SweepConfig(), SweepConfig()
    assert a.digest() == b.digest()
    assert SweepConfig(n=32).digest() != a.digest()


# -- certificates on synthetic reports ---------------------------------------


def synthetic_rows(exponent, eps=(0.25, 0.18, 0.13, 0.09, 0.065)):
    rows = []
    for i, e in enumerate(eps):
        f34 = 2.0 * e**exponent
        f12 = 1.5 * e**3
        rows.append(
            {
                "epsilon": e,
                "converged": True,
                "bulk_int_B34": f34,
                "rate_ratio_B12": f12 / e**3,
                "cubic_ratio_B34": f34 / e**3,
                "lp_1.5": 0.5 * e,
                "lp_2": 0.5 * e,
                "lp_2.5": 0.5 * e,
                "weak_l3_B12": 4.0 + 0.1 * i,
                "monotonicity_worst": 0.0,
                "bad_count": 7,
                "bad_max_radius": 0.05,
                "cover_balls": 2,
                "cover_contains_mask": True,
                "minkowski_constant": 30.0,
            }
        )
    return rows


def synthetic_report(exponent):
    rows = synthetic_rows(exponent)
    fit = fit_scaling([(r["epsilon"], r["bulk_int_B34"]) for r in rows])
    rep = SweepReport(config={}, rows=rows, fit=fit, provenance={}, reference_l2_B12=0.886)
    rep.verdicts = rate_certificates(rep)
    return rep


def test_certificates_all_pass_on_ideal_report():
    rep = synthetic_report(3.0)
    assert all_pass(rep.verdicts), {k: v for k, v in rep.verdicts.items() if not v["pass"]}


def test_quadratic_rate_fails_slope():
    rep = synthetic_report(2.0)
    assert rep.fit.slope == pytest.approx(2.0)
    assert not rep.verdicts["slope_window"]["pass"]
    assert not all_pass(rep.verdicts)


def test_fit_needs_four_points():
    rows = synthetic_rows(3.0, eps=(0.3, 0.2, 0.1))
    fit = fit_scaling([(r["epsilon"], r["bulk_int_B34"]) for r in rows])
    rep = SweepReport(config={}, rows=rows, fit=fit, provenance={}, reference_l2_B12=0.886)
    assert not rate_certificates(rep)["slope_window"]["pass"]


def test_nonconverged_row_fails():
    rep = synthetic_report(3.0)
    rep.rows[2]["converged"] = False
    assert not rate_certificates(rep)["all_converged"]["pass"]


# -- sweeps ------------------------------------------------------------------


def test_constant_vacuum_sweep_is_trivial(tmp_path):
    cfg = SweepConfig(n=16, epsilons=(1.0,), boundary="constant-vacuum")
    rep = run_hedgehog_sweep(cfg, out_dir=tmp_path)
    (row,) = rep.rows
    assert row["converged"] and row["iterations"] == 0
    assert abs(row["total"]) <= 1e-12
    assert row["bulk_int_B34"] <= 1e-12
    assert row["bad_count"] == 0 and row["cover_balls"] == 0
    assert row["weak_l3_B12"] == 0.0
    assert row["monotonicity_worst"] == 0.0
    assert row["stress_energy_residual"] == 0.0
    assert row["regular_scale_origin"] == 1.0


def test_sweep_rows_and_files(small_sweep):
    rep, out = small_sweep
    eps = rep.column("epsilon")
    assert eps == sorted(eps, reverse=True)
    assert all(r["converged"] for r in rep.rows)
    for r in rep.rows:
        assert r["total"] == r["elastic"] + r["bulk"]
        assert r["total"] == r["solver_total"]
        fld = load_field(out / f"field_eps{r['epsilon']:.4f}.qtnf")
        assert fld.epsilon == r["epsilon"]
    with open(out / "report.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == CSV_COLUMNS
    assert len(rows) == 1 + len(rep.rows)
    back = load_report(out / "report.json")
    assert back.rows[0]["epsilon"] == rep.rows[0]["epsilon"]
    assert back.verdicts == json.loads(json.dumps(rep.verdicts))
    plot = (out / "plot_bulk_vs_eps.txt").read_text().splitlines()
    assert plot[0].startswith("#") and len(plot) == 1 + len(rep.rows)


def test_sweep_physics_trends(small_sweep):
    rep, _ = small_sweep
    rows = rep.rows
    for key in ("lp_1.5", "lp_2", "lp_2.5", "bulk_int_B34"):
        col = [r[key] for r in rows]
        assert all(b < a for a, b in zip(col, col[1:])), key
    last = rows[-1]
    # energy concentrates at the defect at the smallest epsilon
    assert last["regular_scale_origin"] < last["regular_scale_half"]
    assert rep.reference_l2_B12 == pytest.approx(1.5 * math.sqrt(2 / 3) * math.sqrt(4 / 3 * math.pi / 8), rel=0.1)


def test_sweep_reproducible(small_sweep, tmp_path):
    rep, out = small_sweep
    again = run_hedgehog_sweep(SweepConfig(n=32, epsilons=(0.3, 0.2, 0.13)), out_dir=tmp_path)
    assert (tmp_path / "report.csv").read_bytes() == (out / "report.csv").read_bytes()

    def strip(rows):
        return [{k: v for k, v in r.items() if k != "solver"} for r in rows]

    assert strip(again.rows) == strip(rep.rows)
    assert again.provenance == rep.provenance


def test_forced_nonconvergence_flags_rows(tmp_path):
    cfg = SweepConfig(n=16, epsilons=(0.4, 0.3), solve=SolveOptions(max_iters=1), diagnostics=False)
    rep = run_hedgehog_sweep(cfg, out_dir=tmp_path, save_fields=False)
    assert len(rep.rows) == 2
    assert not any(r["converged"] for r in rep.rows)
    assert not rep.verdicts["all_converged"]["pass"]
