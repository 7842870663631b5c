"""Pointwise Q-tensor algebra.

A Q-tensor is a symmetric traceless 3x3 matrix. It is stored as the 5
coefficients in the orthonormal basis

    E1 = diag(1, -1, 0) / sqrt(2)
    E2 = diag(1, 1, -2) / sqrt(6)
    E3 = (e1 x e2 + e2 x e1) / sqrt(2)
    E4 = (e1 x e3 + e3 x e1) / sqrt(2)
    E5 = (e2 x e3 + e3 x e2) / sqrt(2)

so that the Frobenius norm is the Euclidean norm of the coefficient vector.
Every function here accepts arrays of shape ``(..., 5)`` and broadcasts over
the leading axes, which is how the field code calls them per node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

SQRT2 = math.sqrt(2.0)
SQRT6 = math.sqrt(6.0)

BASIS = np.zeros((5, 3, 3))
BASIS[0] = np.diag([1.0, -1.0, 0.0]) / SQRT2
BASIS[1] = np.diag([1.0, 1.0, -2.0]) / SQRT6
BASIS[2][0, 1] = BASIS[2][1, 0] = 1.0 / SQRT2
BASIS[3][0, 2] = BASIS[3][2, 0] = 1.0 / SQRT2
BASIS[4][1, 2] = BASIS[4][2, 1] = 1.0 / SQRT2
BASIS.setflags(write=False)

DEFAULT_GAP_TOL = 1e-8


class DegenerateSpectrum(ValueError):
    """Raised when the top two eigenvalues are too close to pick a director."""


@dataclass(frozen=True)
class MaterialParams:
    """Bulk constants of the Landau-de Gennes potential and derived values."""

    a: float = 1.0
    b: float = 1.0
    c: float = 1.0

    def __post_init__(self) -> None:
        if not (self.a >= 0.0 and self.b > 0.0 and self.c > 0.0):
            raise ValueError(f"need a >= 0, b > 0, c > 0; got a={self.a}, b={self.b}, c={self.c}")

    @cached_property
    def s_star(self) -> float:
        a, b, c = self.a, self.b, self.c
        return (b + math.sqrt(b * b + 24.0 * a * c)) / (4.0 * c)

    @cached_property
    def k(self) -> float:
        """Additive constant making the infimum of the bulk potential zero."""
        s = self.s_star
        return s * s / 27.0 * (9.0 * self.a + 2.0 * self.b * s - 3.0 * self.c * s * s)

    @cached_property
    def lambda_star(self) -> float:
        a, b, c = self.a, self.b, self.c
        return (-b + math.sqrt(b * b + 24.0 * a * c)) / (12.0 * c)

    @cached_property
    def g_at_lambda_star(self) -> float:
        return float(equal_eigenvalue_curve(self.lambda_star, self))

    @property
    def eta_threshold(self) -> float:
        """Bulk-energy level below which the top eigenvalue is simple."""
        return 0.5 * self.g_at_lambda_star

    @property
    def vacuum_norm(self) -> float:
        """Frobenius norm of every point of the vacuum manifold."""
        return self.s_star * math.sqrt(2.0 / 3.0)


@dataclass(frozen=True)
class PhaseLabel:
    tag: str
    s: float
    r: float
    eigenvalues: tuple[float, float, float] = field(default=(0.0, 0.0, 0.0))


# -- conversions -------------------------------------------------------------


def to_matrix(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.einsum("...a,aij->...ij", q, BASIS)


def from_matrix(m) -> np.ndarray:
    """Coefficients of the symmetric traceless part of ``m``."""
    m = np.asarray(m, dtype=float)
    m = 0.5 * (m + np.swapaxes(m, -1, -2))
    return np.einsum("...ij,aij->...a", m, BASIS)


def uniaxial(s: float, n) -> np.ndarray:
    """Coefficients of s (n x n - I/3); ``n`` is normalized first."""
    n = np.asarray(n, dtype=float)
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    m = np.einsum("...i,...j->...ij", n, n) - np.eye(3) / 3.0
    return np.asarray(s, dtype=float)[..., None] * from_matrix(m)


def _entries(q):
    q1, q2, q3, q4, q5 = (q[..., i] for i in range(5))
    d11 = q1 / SQRT2 + q2 / SQRT6
    d22 = -q1 / SQRT2 + q2 / SQRT6
    d33 = -2.0 * q2 / SQRT6
    return d11, d22, d33, q3 / SQRT2, q4 / SQRT2, q5 / SQRT2


def norm_sq(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.einsum("...a,...a->...", q, q)


def det(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    d11, d22, d33, m12, m13, m23 = _entries(q)
    return (
        d11 * (d22 * d33 - m23 * m23)
        - m12 * (m12 * d33 - m23 * m13)
        + m13 * (m12 * m23 - d22 * m13)
    )


def trace_cube(q) -> np.ndarray:
    # Cayley-Hamilton for traceless Q: tr Q^3 = 3 det Q
    return 3.0 * det(q)


def square(q) -> np.ndarray:
    """Coefficients of the traceless part of Q^2."""
    q = np.asarray(q, dtype=float)
    d11, d22, d33, m12, m13, m23 = _entries(q)
    s11 = d11 * d11 + m12 * m12 + m13 * m13
    s22 = m12 * m12 + d22 * d22 + m23 * m23
    s33 = m13 * m13 + m23 * m23 + d33 * d33
    s12 = d11 * m12 + m12 * d22 + m13 * m23
    s13 = d11 * m13 + m12 * m23 + m13 * d33
    s23 = m12 * m13 + d22 * m23 + m23 * d33
    return np.stack(
        [
            (s11 - s22) / SQRT2,
            (s11 + s22 - 2.0 * s33) / SQRT6,
            SQRT2 * s12,
            SQRT2 * s13,
            SQRT2 * s23,
        ],
        axis=-1,
    )


# -- bulk potential ----------------------------------------------------------


def bulk_potential(q, p: MaterialParams) -> np.ndarray:
    """f(Q) = k - (a/2) tr Q^2 - (b/3) tr Q^3 + (c/4) (tr Q^2)^2."""
    q = np.asarray(q, dtype=float)
    t2 = norm_sq(q)
    t3 = trace_cube(q)
    return p.k - 0.5 * p.a * t2 - p.b / 3.0 * t3 + 0.25 * p.c * t2 * t2


def bulk_gradient(q, p: MaterialParams) -> np.ndarray:
    """Coefficients of -aQ - bQ^2 + (b/3)|Q|^2 I + c|Q|^2 Q.

    This is the gradient of :func:`bulk_potential` with respect to the 5
    coefficients, i.e. the algebraic part of the Euler-Lagrange operator.
    """
    q = np.asarray(q, dtype=float)
    t2 = norm_sq(q)[..., None]
    return (-p.a + p.c * t2) * q - p.b * square(q)


# -- spectrum ----------------------------------------------------------------


def eigenvalues(q) -> np.ndarray:
    """Eigenvalues in descending order, shape ``(..., 3)``.

    Trigonometric solution of the depressed characteristic cubic
    lambda^3 - (|Q|^2/2) lambda - det Q = 0.
    """
    q = np.asarray(q, dtype=float)
    t2 = norm_sq(q)
    pp = np.sqrt(t2 / 6.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(pp > 0.0, det(q) / (2.0 * pp**3), 0.0)
    r = np.clip(r, -1.0, 1.0)
    phi = np.arccos(r) / 3.0
    l1 = 2.0 * pp * np.cos(phi)
    l3 = 2.0 * pp * np.cos(phi + 2.0 * math.pi / 3.0)
    l2 = -l1 - l3
    return np.stack([l1, l2, l3], axis=-1)


def top_eigenvalue(q) -> np.ndarray:
    return eigenvalues(q)[..., 0]


def _eigenvector(m: np.ndarray, lam: float) -> np.ndarray | None:
    a = m - lam * np.eye(3)
    crosses = [np.cross(a[0], a[1]), np.cross(a[0], a[2]), np.cross(a[1], a[2])]
    norms = [float(np.dot(v, v)) for v in crosses]
    i = int(np.argmax(norms))
    if norms[i] <= 0.0:
        return None
    return crosses[i] / math.sqrt(norms[i])


def eigen_decompose(q) -> tuple[np.ndarray, np.ndarray]:
    """Return (lambdas descending, frame) for a single Q-tensor.

    ``frame[:, i]`` is the unit eigenvector for ``lambdas[i]``. Eigenvectors
    come from cross products of rows of Q - lambda I; when the spectrum is
    nearly degenerate the symmetric LAPACK solver is used instead.
    """
    q = np.asarray(q, dtype=float).reshape(5)
    lam = eigenvalues(q)
    m = to_matrix(q)
    scale = max(abs(lam[0]), abs(lam[2]))
    if scale == 0.0:
        return lam, np.eye(3)
    gaps = min(lam[0] - lam[1], lam[1] - lam[2]) / scale
    if gaps >= 1e-6:
        n1 = _eigenvector(m, lam[0])
        n3 = _eigenvector(m, lam[2])
        if n1 is not None and n3 is not None:
            n3 = n3 - np.dot(n3, n1) * n1
            n3 /= np.linalg.norm(n3)
            n2 = np.cross(n3, n1)
            frame = np.column_stack([n1, n2, n3])
            recon = frame @ np.diag(lam) @ frame.T
            if np.linalg.norm(recon - m) <= 1e-12 * max(1.0, scale):
                return lam, frame
    w, v = np.linalg.eigh(m)
    return w[::-1].copy(), v[:, ::-1].copy()


def dist_to_vacuum(q, p: MaterialParams) -> np.ndarray:
    """Frobenius distance from Q to the vacuum manifold.

    Closed form sqrt(|Q|^2 - 2 s_* lambda_1 + 2 s_*^2 / 3), since
    Q : (n x n) is maximised by the top eigenvector.
    """
    q = np.asarray(q, dtype=float)
    s = p.s_star
    d2 = norm_sq(q) - 2.0 * s * top_eigenvalue(q) + 2.0 * s * s / 3.0
    return np.sqrt(np.maximum(d2, 0.0))


def project_to_vacuum(q, p: MaterialParams, gap_tol: float = DEFAULT_GAP_TOL) -> np.ndarray:
    lam, frame = eigen_decompose(q)
    if lam[0] - lam[1] <= gap_tol:
        raise DegenerateSpectrum(
            f"lambda1 - lambda2 = {lam[0] - lam[1]:.3e} <= {gap_tol:.1e}; nearest point is not unique"
        )
    return uniaxial(p.s_star, frame[:, 0])


def classify_phase(q, tol: float = 1e-8) -> PhaseLabel:
    if tol <= 0:
        raise ValueError("tol must be positive")
    lam = eigenvalues(np.asarray(q, dtype=float).reshape(5))
    l1, l2, l3 = (float(x) for x in lam)
    s, r = l1 - l3, l2 - l3
    if max(abs(l1), abs(l2), abs(l3)) <= tol:
        tag = "isotropic"
    elif (l1 - l2) <= tol or (l2 - l3) <= tol:
        tag = "uniaxial"
    else:
        tag = "biaxial"
    return PhaseLabel(tag, s, r, (l1, l2, l3))


def classify_phases(q, tol: float = 1e-8) -> np.ndarray:
    """Vectorized phase tags: 0 isotropic, 1 uniaxial, 2 biaxial."""
    lam = eigenvalues(q)
    iso = np.max(np.abs(lam), axis=-1) <= tol
    uni = ((lam[..., 0] - lam[..., 1]) <= tol) | ((lam[..., 1] - lam[..., 2]) <= tol)
    return np.where(iso, 0, np.where(uni, 1, 2))


def equal_eigenvalue_curve(lam, p: MaterialParams):
    """Bulk potential on the stratum lambda_1 = lambda_2 = lam (lam >= 0)."""
    lam = np.asarray(lam, dtype=float)
    out = p.k - 3.0 * p.a * lam**2 + 2.0 * p.b * lam**3 + 9.0 * p.c * lam**4
    return out if out.ndim else float(out)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    m, r = np.linalg.qr(rng.standard_normal((3, 3)))
    m = m * np.sign(np.diag(r))
    if np.linalg.det(m) < 0:
        m[:, 0] = -m[:, 0]
    return m
