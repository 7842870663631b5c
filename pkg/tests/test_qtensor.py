import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize, minimize_scalar

from qtensor_lab.qtensor import (
    BASIS,
    DegenerateSpectrum,
    MaterialParams,
    bulk_gradient,
    bulk_potential,
    classify_phase,
    classify_phases,
    dist_to_vacuum,
    eigen_decompose,
    eigenvalues,
    equal_eigenvalue_curve,
    from_matrix,
    norm_sq,
    project_to_vacuum,
    random_rotation,
    to_matrix,
    uniaxial,
)

P1 = MaterialParams()
E1, E3 = np.eye(3)[0], np.eye(3)[2]

coef = st.floats(-3.0, 3.0, allow_nan=False)
qvec = st.lists(coef, min_size=5, max_size=5).map(np.array)
params = st.tuples(st.floats(0.2, 3.0), st.floats(0.2, 3.0), st.floats(0.2, 3.0)).map(lambda t: MaterialParams(*t))


def fib_sphere(m):
    i = np.arange(m) + 0.5
    z = 1 - 2 * i / m
    phi = math.pi * (1 + 5**0.5) * i
    r = np.sqrt(1 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def brute_dist(q, p):
    """min over n in S^2 of |Q - s_*(n n - I/3)|, by sampling then local polish."""
    m = to_matrix(q)
    s = p.s_star

    def d(n):
        n = n / np.linalg.norm(n)
        return np.linalg.norm(m - s * (np.outer(n, n) - np.eye(3) / 3))

    dirs = fib_sphere(10_000)
    vals = [d(n) for n in dirs[:, :]]
    best = dirs[int(np.argmin(vals))]
    res = minimize(d, best, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12})
    return min(res.fun, min(vals))


# -- basis and matrices ------------------------------------------------------


def test_basis_orthonormal_traceless_symmetric():
    gram = np.einsum("aij,bij->ab", BASIS, BASIS)
    assert np.allclose(gram, np.eye(5), atol=1e-15)
    assert np.allclose(np.trace(BASIS, axis1=1, axis2=2), 0, atol=1e-15)
    assert np.allclose(BASIS, np.swapaxes(BASIS, 1, 2))


@given(qvec)
def test_matrix_roundtrip_and_norm(q):
    m = to_matrix(q)
    assert abs(np.trace(m)) <= 1e-14
    assert np.allclose(m, m.T)
    assert np.allclose(from_matrix(m), q, atol=1e-14)
    assert math.isclose(np.sum(m * m), norm_sq(q), rel_tol=1e-12, abs_tol=1e-14)


# -- material constants ------------------------------------------------------


def test_default_constants():
    assert P1.s_star == pytest.approx(1.5, abs=1e-15)
    assert P1.k == pytest.approx(0.4375, abs=1e-15)
    assert P1.lambda_star == pytest.approx(1 / 3, abs=1e-15)
    # g(1/3) = 0.4375 - 1/3 + 2/27 + 1/9
    assert P1.g_at_lambda_star == pytest.approx(0.4375 - 1 / 3 + 2 / 27 + 1 / 9, abs=1e-14)
    assert P1.g_at_lambda_star == pytest.approx(0.289352, abs=1e-6)


def test_invalid_params_rejected():
    with pytest.raises(ValueError):
        MaterialParams(1, 0, 1)
    with pytest.raises(ValueError):
        MaterialParams(-1, 1, 1)


@settings(max_examples=30)
@given(params)
def test_s_star_is_uniaxial_argmin(p):
    def prof(s):
        return float(bulk_potential(uniaxial(s, E3), p))

    res = minimize_scalar(prof, bounds=(0.5 * p.s_star, 1.5 * p.s_star), method="bounded", options={"xatol": 1e-12})
    assert abs(res.x - p.s_star) <= 1e-5 * p.s_star
    assert abs(prof(p.s_star)) <= 1e-10


# -- bulk potential ----------------------------------------------------------


def test_bulk_examples():
    assert bulk_potential(np.zeros(5), P1) == pytest.approx(0.4375)
    assert abs(bulk_potential(uniaxial(1.5, [0.3, -0.2, 0.9]), P1)) <= 1e-14
    q = from_matrix(np.diag([2 / 3, -1 / 3, -1 / 3]))
    assert bulk_potential(q, P1) == pytest.approx(0.4375 - 1 / 3 - 2 / 27 + 1 / 9, abs=1e-14)
    assert bulk_potential(q, P1) == pytest.approx(0.141204, abs=1e-6)


def test_bulk_nonnegative_many_random():
    rng = np.random.default_rng(0)
    for p in (P1, MaterialParams(0.3, 2.0, 0.5), MaterialParams(2.5, 0.4, 3.0)):
        q = rng.standard_normal((100_000, 5))
        q *= (4 * p.s_star * rng.random(100_000) / np.linalg.norm(q, axis=1))[:, None]
        assert bulk_potential(q, p).min() >= -1e-10


@given(qvec, st.integers(0, 2**32 - 1))
def test_frame_invariance(q, seed):
    r = random_rotation(np.random.default_rng(seed))
    q2 = from_matrix(r.T @ to_matrix(q) @ r)
    f1, f2 = bulk_potential(q, P1), bulk_potential(q2, P1)
    assert abs(f1 - f2) <= 1e-12 * max(1.0, abs(f1))


def test_bulk_gradient_zero_cases():
    assert np.all(bulk_gradient(np.zeros(5), P1) == 0)
    assert np.max(np.abs(bulk_gradient(uniaxial(P1.s_star, [1, 2, 3]), P1))) <= 1e-14


def test_bulk_gradient_traceless_formula():
    # -aQ - bQ^2 + (b/3)|Q|^2 I + c|Q|^2 Q as a matrix, projected back to coefficients
    rng = np.random.default_rng(1)
    p = MaterialParams(0.7, 1.3, 2.1)
    for q in rng.standard_normal((50, 5)):
        m = to_matrix(q)
        t2 = np.sum(m * m)
        g = -p.a * m - p.b * m @ m + p.b / 3 * t2 * np.eye(3) + p.c * t2 * m
        assert abs(np.trace(g)) < 1e-12
        assert np.allclose(bulk_gradient(q, p), from_matrix(g), atol=1e-12)


def test_bulk_gradient_finite_differences():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(1000):
        q = rng.standard_normal(5)
        g = bulk_gradient(q, P1)
        fd = np.empty(5)
        for i in range(5):
            e = np.zeros(5)
            e[i] = 1e-5
            fd[i] = (bulk_potential(q + e, P1) - bulk_potential(q - e, P1)) / 2e-5
        worst = max(worst, np.max(np.abs(fd - g)) / max(1.0, np.max(np.abs(g))))
    assert worst <= 1e-6


# -- spectrum ----------------------------------------------------------------


def test_eigen_examples():
    lam, frame = eigen_decompose(np.zeros(5))
    assert np.all(lam == 0)
    assert np.allclose(frame.T @ frame, np.eye(3))
    lam, frame = eigen_decompose(uniaxial(1.5, E3))
    assert np.allclose(lam, [1.0, -0.5, -0.5], atol=1e-14)
    assert abs(abs(frame[:, 0] @ E3) - 1) <= 1e-12


def test_eigen_reconstruction_random():
    rng = np.random.default_rng(3)
    for q in rng.standard_normal((1000, 5)):
        lam, frame = eigen_decompose(q)
        assert lam[0] >= lam[1] >= lam[2]
        assert abs(lam.sum()) <= 1e-12
        assert np.allclose(frame.T @ frame, np.eye(3), atol=1e-12)
        assert np.linalg.norm(frame @ np.diag(lam) @ frame.T - to_matrix(q)) <= 1e-10


def test_eigen_near_degenerate_uses_fallback():
    q = uniaxial(1.0, E3) + 1e-9 * np.array([1.0, 0, 0, 0, 0])
    lam, frame = eigen_decompose(q)
    assert np.linalg.norm(frame @ np.diag(lam) @ frame.T - to_matrix(q)) <= 1e-10


def test_vectorized_eigenvalues_match_lapack():
    rng = np.random.default_rng(4)
    q = rng.standard_normal((500, 5))
    ref = np.linalg.eigvalsh(to_matrix(q))[:, ::-1]
    assert np.allclose(eigenvalues(q), ref, atol=1e-12)


# -- vacuum geometry ---------------------------------------------------------


def test_dist_examples():
    assert dist_to_vacuum(uniaxial(1.5, [1, -1, 2]), P1) <= 1e-7
    assert dist_to_vacuum(np.zeros(5), P1) == pytest.approx(1.5 * math.sqrt(2 / 3), rel=1e-14)


def test_dist_matches_sphere_oracle():
    rng = np.random.default_rng(5)
    for _ in range(20):
        q = rng.standard_normal(5)
        assert dist_to_vacuum(q, P1) == pytest.approx(brute_dist(q, P1), rel=1e-3)


def test_vacuum_characterization():
    rng = np.random.default_rng(6)
    near = uniaxial(P1.s_star, rng.standard_normal((2000, 3))) + 1e-6 * rng.standard_normal((2000, 5))
    far = 2 * rng.standard_normal((20000, 5))
    for q in (near, far):
        small = bulk_potential(q, P1) <= 1e-10
        assert np.all(dist_to_vacuum(q[small], P1) <= 1e-3)


def test_project_examples():
    n = np.array([0.2, 0.5, -0.8])
    q = uniaxial(P1.s_star, n)
    assert np.allclose(project_to_vacuum(q, P1), q, atol=1e-12)
    small = from_matrix(np.diag([2 / 3, -1 / 3, -1 / 3])) * 0.01
    assert np.allclose(to_matrix(project_to_vacuum(small, P1)), np.diag([1.0, -0.5, -0.5]), atol=1e-12)
    with pytest.raises(DegenerateSpectrum):
        project_to_vacuum(np.zeros(5), P1)


def test_projection_distance_consistent():
    rng = np.random.default_rng(7)
    for q in rng.standard_normal((200, 5)):
        pq = project_to_vacuum(q, P1)
        assert np.linalg.norm(q - pq) == pytest.approx(float(dist_to_vacuum(q, P1)), rel=1e-6, abs=1e-9)


# -- phases ------------------------------------------------------------------


def test_classify_examples():
    assert classify_phase(np.zeros(5)).tag == "isotropic"
    assert classify_phase(uniaxial(1.5, [1, 1, 0])).tag == "uniaxial"
    lab = classify_phase(from_matrix(np.diag([0.5, 0.1, -0.6])), tol=1e-6)
    assert lab.tag == "biaxial"
    assert lab.s == pytest.approx(1.1)
    assert lab.r == pytest.approx(0.7)
    with pytest.raises(ValueError):
        classify_phase(np.zeros(5), tol=0)


@given(qvec)
def test_classify_vectorized_agrees(q):
    tag = classify_phase(q, 1e-6).tag
    assert ["isotropic", "uniaxial", "biaxial"][int(classify_phases(q, 1e-6))] == tag


# -- equal-eigenvalue stratum ------------------------------------------------


def test_equal_curve_examples():
    assert equal_eigenvalue_curve(0.0, P1) == P1.k
    res = minimize_scalar(lambda x: equal_eigenvalue_curve(x, P1), bounds=(0, 3), method="bounded", options={"xatol": 1e-12})
    assert res.x == pytest.approx(1 / 3, abs=1e-6)


def test_equal_curve_matches_bulk_on_stratum():
    # Q = diag(lam, lam, -2 lam) has lambda_1 = lambda_2 = lam
    for lam in np.linspace(0, 2, 11):
        q = from_matrix(np.diag([lam, lam, -2 * lam]))
        assert equal_eigenvalue_curve(lam, P1) == pytest.approx(float(bulk_potential(q, P1)), abs=1e-12)


def test_equal_curve_minimum_random_params():
    rng = np.random.default_rng(8)
    for a, b, c in rng.uniform(0.2, 3.0, (20, 3)):
        p = MaterialParams(a, b, c)
        lam = np.linspace(0, 2 * p.s_star, 1000)
        assert p.g_at_lambda_star > 0
        assert np.all(equal_eigenvalue_curve(lam, p) >= p.g_at_lambda_star - 1e-12)


def test_low_energy_implies_simple_top_eigenvalue():
    rng = np.random.default_rng(9)
    for p in (P1, MaterialParams(0.5, 2.0, 1.5), MaterialParams(2.0, 0.5, 0.7)):
        q = rng.standard_normal((200_000, 5)) * p.s_star
        # bias toward the vacuum so the low-energy set is well sampled
        q[:100_000] = uniaxial(p.s_star, rng.standard_normal((100_000, 3))) + 0.3 * q[:100_000]
        low = bulk_potential(q, p) < p.eta_threshold
        lam = eigenvalues(q[low])
        assert low.sum() > 1000
        assert np.all(lam[:, 0] - lam[:, 1] > 1e-9)
