"""Discrete Landau-de Gennes energy, its exact gradient, and descent solvers.

The lattice energy uses trapezoid weights: a node weight is the product of
per-axis weights (1/2 on the two end indices, 1 elsewhere) and a link along
axis k carries the weights of its two transverse indices. Both sums then
integrate constants exactly over the cube, and at every interior node the
exact gradient reduces to -Lap_h Q + f'(Q)/eps^2 with the 7-point Laplacian.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .grid import Ball, QField
from .qtensor import bulk_gradient, bulk_potential, det, norm_sq, square

logger = logging.getLogger(__name__)

STEP_POLICIES = ("fixed", "barzilai-borwein", "nonlinear-cg")


class NonFiniteEnergy(FloatingPointError):
    """The energy became NaN or infinite during a solve."""


@dataclass
class SolveOptions:
    grad_tol: float | None = None  # None -> 1e-6 * (1 + 1/eps^2)
    max_iters: int = 20000
    step_policy: str = "nonlinear-cg"
    record_every: int = 50

    def __post_init__(self) -> None:
        if self.grad_tol is not None and not self.grad_tol > 0:
            raise ValueError("grad_tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.step_policy not in STEP_POLICIES:
            raise ValueError(f"unknown step_policy {self.step_policy!r}; choose from {STEP_POLICIES}")
        if self.record_every < 1:
            raise ValueError("record_every must be at least 1")

    def tolerance(self, epsilon: float) -> float:
        if self.grad_tol is not None:
            return self.grad_tol
        return default_grad_tol(epsilon)


def default_grad_tol(epsilon: float) -> float:
    return 1e-6 * (1.0 + 1.0 / epsilon**2)


@dataclass
class SolveStats:
    iterations: int = 0
    energy_trace: list[tuple[int, float, float, float]] = field(default_factory=list)
    final_grad_norm: float = math.nan
    wall_time: float = 0.0
    converged: bool = False
    grad_tol: float = math.nan
    restarts: int = 0

    @property
    def not_converged(self) -> bool:
        return not self.converged

    def as_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "final_grad_norm": self.final_grad_norm,
            "grad_tol": self.grad_tol,
            "wall_time": self.wall_time,
            "restarts": self.restarts,
            "energy_trace": [list(t) for t in self.energy_trace],
        }


# -- weights -----------------------------------------------------------------


@lru_cache(maxsize=8)
def _axis_weights(n: int) -> np.ndarray:
    w = np.ones(n)
    w[0] = w[-1] = 0.5
    w.setflags(write=False)
    return w


def node_weights(n: int) -> np.ndarray:
    w = _axis_weights(n)
    return w[:, None, None] * w[None, :, None] * w[None, None, :]


def _link_weight(n: int, axis: int) -> np.ndarray:
    """Transverse trapezoid weight for links along ``axis``, broadcastable."""
    w = _axis_weights(n)
    shape = [1, 1, 1]
    out = np.ones((1, 1, 1))
    for ax in range(3):
        if ax == axis:
            continue
        s = shape.copy()
        s[ax] = n
        out = out * w.reshape(s)
    return out


class _Energy:
    """Cached weights for repeated energy/gradient evaluation on one grid."""

    def __init__(self, fld: QField):
        n = fld.grid.n
        self.h = fld.h
        self.inv_eps2 = 1.0 / fld.epsilon**2
        self.p = fld.params
        self.node_w = node_weights(n)
        self.link_w = [_link_weight(n, ax) for ax in range(3)]
        self.free = ~fld.mask

    def parts(self, q: np.ndarray) -> tuple[float, float]:
        h = self.h
        el = 0.0
        for ax in range(3):
            d = np.diff(q, axis=ax)
            el += float(np.sum(self.link_w[ax] * np.einsum("...a,...a->...", d, d)))
        el *= 0.5 * h
        bulk = float(np.sum(self.node_w * bulk_potential(q, self.p))) * h**3 * self.inv_eps2
        return el, bulk

    def gradient(self, q: np.ndarray) -> np.ndarray:
        """dE/dQ at each node divided by h^3; zero on frozen nodes."""
        g = np.zeros_like(q)
        inv_h2 = 1.0 / self.h**2
        for ax in range(3):
            d = np.diff(q, axis=ax) * (self.link_w[ax][..., None] * inv_h2)
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[ax] = slice(0, -1)
            hi[ax] = slice(1, None)
            g[tuple(lo)] -= d
            g[tuple(hi)] += d
        g += (self.node_w * self.inv_eps2)[..., None] * bulk_gradient(q, self.p)
        g[~self.free] = 0.0
        return g

    def line_polynomial(self, q: np.ndarray, d: np.ndarray, e0: float, slope: float) -> np.ndarray:
        """Coefficients (ascending) of the quartic t -> E(q + t d).

        ``slope`` is the exact directional derivative <grad E, d> h^3.
        """
        h = self.h
        quad_el = 0.0
        for ax in range(3):
            dd = np.diff(d, axis=ax)
            quad_el += float(np.sum(self.link_w[ax] * np.einsum("...a,...a->...", dd, dd)))
        quad_el *= 0.5 * h
        w = self.node_w
        a0 = norm_sq(q)
        a1 = np.einsum("...a,...a->...", q, d)
        a2 = norm_sq(d)
        c2 = np.einsum("...a,...a->...", square(d), q)
        c3 = 3.0 * det(d)
        p = self.p
        scale = h**3 * self.inv_eps2
        # second and higher order bulk coefficients; the linear one is in slope
        t2 = -0.5 * p.a * a2 - p.b * c2 + 0.25 * p.c * (4.0 * a1 * a1 + 2.0 * a0 * a2)
        t3 = -p.b / 3.0 * c3 + p.c * a1 * a2
        t4 = 0.25 * p.c * a2 * a2
        return np.array(
            [
                e0,
                slope,
                quad_el + scale * float(np.sum(w * t2)),
                scale * float(np.sum(w * t3)),
                scale * float(np.sum(w * t4)),
            ]
        )


def _argmin_quartic(coef: np.ndarray) -> float:
    """Smallest-value positive critical point of a quartic; 0 if none."""
    deriv = np.polynomial.polynomial.polyder(coef)
    roots = np.polynomial.polynomial.polyroots(deriv)
    best_t, best_v = 0.0, coef[0]
    for r in roots:
        if abs(r.imag) > 1e-9 * max(1.0, abs(r.real)) or r.real <= 0:
            continue
        t = float(r.real)
        v = float(np.polynomial.polynomial.polyval(t, coef))
        if v < best_v:
            best_t, best_v = t, v
    return best_t


# -- public energy API -------------------------------------------------------


def discrete_energy(fld: QField) -> tuple[float, float, float]:
    """(elastic, bulk, total) lattice energy of the field over the cube."""
    el, bulk = _Energy(fld).parts(fld.data)
    return el, bulk, el + bulk


def energy_gradient(fld: QField) -> np.ndarray:
    """Exact gradient of :func:`discrete_energy` per unit cell volume.

    For a perturbation P vanishing on frozen nodes,
    d/dt E(Q + tP) at t=0 equals sum(g * P) * h^3.
    """
    return _Energy(fld).gradient(fld.data)


def laplacian(data: np.ndarray, h: float) -> np.ndarray:
    """7-point Laplacian at interior nodes; zero on the cube faces."""
    lap = np.zeros_like(data)
    c = data[1:-1, 1:-1, 1:-1]
    lap[1:-1, 1:-1, 1:-1] = (
        data[2:, 1:-1, 1:-1] + data[:-2, 1:-1, 1:-1]
        + data[1:-1, 2:, 1:-1] + data[1:-1, :-2, 1:-1]
        + data[1:-1, 1:-1, 2:] + data[1:-1, 1:-1, :-2]
        - 6.0 * c
    ) / h**2
    return lap


def grad_sup_norm(g: np.ndarray) -> float:
    return float(np.sqrt(np.max(np.einsum("...a,...a->...", g, g))))


# -- solver ------------------------------------------------------------------


def minimize(fld: QField, opts: SolveOptions | None = None) -> tuple[QField, SolveStats]:
    """Descend the discrete energy from ``fld`` until the gradient is small.

    Returns a new field and the run statistics. Frozen nodes are never
    written. Every accepted step lowers the energy (up to rounding of the
    energy sum itself).
    """
    opts = opts or SolveOptions()
    t0 = time.perf_counter()
    en = _Energy(fld)
    tol = opts.tolerance(fld.epsilon)
    stats = SolveStats(grad_tol=tol)
    h3 = fld.h**3
    q = fld.data.copy()
    frozen = q[fld.mask].copy()

    el, bulk = en.parts(q)
    energy = el + bulk
    if not math.isfinite(energy):
        raise NonFiniteEnergy(f"initial energy is {energy}")
    stats.energy_trace.append((0, el, bulk, energy))
    g = en.gradient(q)
    gnorm = grad_sup_norm(g)
    slack = 1e-12 * max(1.0, abs(energy))

    policy = opts.step_policy
    alpha_fixed = fld.h**2 / (6.0 + _bulk_lipschitz(fld) * fld.h**2 / fld.epsilon**2)
    alpha = alpha_fixed
    d = -g
    g_prev = None
    q_prev = None
    it = 0
    while gnorm > tol and it < opts.max_iters:
        it += 1
        gg = float(np.sum(g * g)) * h3

        if policy == "nonlinear-cg":
            slope = float(np.sum(g * d)) * h3
            if slope >= 0:
                d = -g
                slope = -gg
                stats.restarts += 1
            t = _argmin_quartic(en.line_polynomial(q, d, energy, slope))
            step = t * d
        else:
            if policy == "barzilai-borwein" and g_prev is not None:
                s = q - q_prev
                y = g - g_prev
                sy = float(np.sum(s * y))
                yy = float(np.sum(y * y))
                alpha = sy / yy if sy > 0 and yy > 0 else alpha_fixed
                alpha = min(max(alpha, 1e-3 * alpha_fixed), 1e6 * alpha_fixed)
            step = -alpha * g

        q_new = q + step
        el_n, bulk_n = en.parts(q_new)
        e_new = el_n + bulk_n
        if not math.isfinite(e_new):
            if policy == "nonlinear-cg":
                raise NonFiniteEnergy(f"energy became {e_new} at iteration {it}")
            e_new = math.inf

        accept = e_new <= energy - 1e-4 * alpha * gg if policy != "nonlinear-cg" else e_new <= energy + slack
        if not accept:
            # safeguard: exact line search along steepest descent
            stats.restarts += 1
            t = _argmin_quartic(en.line_polynomial(q, -g, energy, -gg))
            step = -t * g
            q_new = q + step
            el_n, bulk_n = en.parts(q_new)
            e_new = el_n + bulk_n
            if not math.isfinite(e_new):
                raise NonFiniteEnergy(f"energy became {e_new} at iteration {it}")
            if e_new > energy + slack:
                logger.info("no descent possible at iteration %d; stopping", it)
                it -= 1
                break
            alpha = t if t > 0 else alpha_fixed
            d = -g

        q_prev, g_prev = q, g
        q = q_new
        q[fld.mask] = frozen
        el, bulk, energy = el_n, bulk_n, e_new
        g = en.gradient(q)
        gnorm = grad_sup_norm(g)

        if policy == "nonlinear-cg":
            y = g - g_prev
            beta = max(0.0, float(np.sum(g * y)) / max(float(np.sum(g_prev * g_prev)), 1e-300))
            if it % 500 == 0:
                beta = 0.0
            d = -g + beta * d

        if it % opts.record_every == 0:
            stats.energy_trace.append((it, el, bulk, energy))
            logger.debug("iter %d energy %.12g |g|_inf %.3e", it, energy, gnorm)

    if stats.energy_trace[-1][0] != it:
        stats.energy_trace.append((it, el, bulk, energy))
    stats.iterations = it
    stats.final_grad_norm = gnorm
    stats.converged = gnorm <= tol
    stats.wall_time = time.perf_counter() - t0
    if not stats.converged:
        logger.warning("not converged after %d iterations: |g|_inf=%.3e > %.3e", it, gnorm, tol)
    out = fld.copy(data=q)
    return out, stats


def _bulk_lipschitz(fld: QField) -> float:
    p = fld.params
    m = max(p.vacuum_norm, float(np.sqrt(norm_sq(fld.data).max())))
    return p.a + 2.0 * p.b * m + 3.0 * p.c * m * m


def el_residual_check(fld: QField, interior: Ball) -> tuple[float, float]:
    """Normalized Euler-Lagrange residual and eps * sup|grad Q| on a ball.

    The residual is sup |-eps^2 Lap_h Q + f'(Q)| / (1 + |Q| + |Q|^3) over
    free interior nodes in the ball.
    """
    from .grid import gradient_norm

    eps2 = fld.epsilon**2
    res = -eps2 * laplacian(fld.data, fld.h) + bulk_gradient(fld.data, fld.params)
    qn = np.sqrt(norm_sq(fld.data))
    rn = np.sqrt(norm_sq(res)) / (1.0 + qn + qn**3)
    inner = np.zeros(fld.grid.shape, dtype=bool)
    inner[1:-1, 1:-1, 1:-1] = True
    sel = interior.mask(fld.grid) & inner & ~fld.mask
    residual = float(rn[sel].max()) if sel.any() else 0.0
    ball = interior.mask(fld.grid)
    grad_sup = float(gradient_norm(fld)[ball].max()) if ball.any() else 0.0
    return residual, fld.epsilon * grad_sup
