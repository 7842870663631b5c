"""Diagnostics on a solved field: weighted monotonicity density, stress-energy
residual, regular scale, bad set, pinching-driven ball covering and the
weak-L^3 gradient quasinorm.

Every function reads epsilon and the material constants from the field.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.signal import fftconvolve

from .grid import Ball, QField, energy_density, gradient_norm
from .qtensor import bulk_potential, dist_to_vacuum


class ResolutionError(ValueError):
    """A radius below the grid resolution was requested."""


class BudgetExceeded(RuntimeError):
    """The covering recursion visited more balls than its budget allows."""


# -- weight ------------------------------------------------------------------

_BLEND = np.array([48.0, -1.5, 0.0, -57.75, 43.5, -8.71875])  # in u = t - 8


@dataclass(frozen=True)
class WeightPhi:
    """Radial weight: 60 - 1.5 t on [0, 8], a C^2 quintic down to 0 at t = 10.

    The blend matches value 48, slope -1.5 and zero curvature at t = 8 and
    vanishes with its first two derivatives at t = 10.
    """

    blend: tuple = tuple(_BLEND)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        u = t - 8.0
        tail = np.clip(np.polynomial.polynomial.polyval(u, self.blend), 0.0, 48.0)
        out = np.where(t <= 8.0, 60.0 - 1.5 * t, np.where(t < 10.0, tail, 0.0))
        return out if out.ndim else float(out)

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        u = t - 8.0
        dblend = np.polynomial.polynomial.polyder(np.asarray(self.blend))
        tail = np.minimum(np.polynomial.polynomial.polyval(u, dblend), 0.0)
        out = np.where(t <= 8.0, -1.5, np.where(t < 10.0, tail, 0.0))
        return out if out.ndim else float(out)

    support: float = 10.0


def make_phi() -> WeightPhi:
    return WeightPhi()


PHI = make_phi()


# -- monotonicity density ----------------------------------------------------


def _check_radius(fld: QField, r: float) -> None:
    if r < 2.0 * fld.h * (1 - 1e-12):
        raise ResolutionError(f"radius {r:.4g} below 2h = {2 * fld.h:.4g}")


def theta(fld: QField, x, r: float, density: np.ndarray | None = None, phi: WeightPhi = PHI) -> float:
    """(1/r) * h^3 * sum_y e_eps(y) phi(|y - x|^2 / r^2), clipped to the cube."""
    _check_radius(fld, r)
    if density is None:
        density = energy_density(fld)
    grid = fld.grid
    x = np.asarray(x, dtype=float)
    reach = math.sqrt(phi.support) * r
    lo = np.clip(np.floor((x - reach + 1.0) / grid.h).astype(int), 0, grid.n - 1)
    hi = np.clip(np.ceil((x + reach + 1.0) / grid.h).astype(int) + 1, 0, grid.n)
    box = tuple(slice(a, b) for a, b in zip(lo, hi))
    d2 = np.sum((grid.coords[box] - x) ** 2, axis=-1)
    w = phi(d2 / r**2)
    return float(np.sum(density[box] * w) * grid.h**3 / r)


def theta_map(fld: QField, r: float, density: np.ndarray | None = None, phi: WeightPhi = PHI) -> np.ndarray:
    """Theta_r at every node at once, by FFT convolution with the weight kernel."""
    _check_radius(fld, r)
    if density is None:
        density = energy_density(fld)
    h = fld.h
    m = int(math.ceil(math.sqrt(phi.support) * r / h))
    ax = np.arange(-m, m + 1) * h
    zz = ax[:, None, None] ** 2 + ax[None, :, None] ** 2 + ax[None, None, :] ** 2
    kernel = phi(zz / r**2)
    out = fftconvolve(density, kernel, mode="same")
    return np.maximum(out, 0.0) * h**3 / r


def monotonicity_profile(fld: QField, x, radii, density: np.ndarray | None = None) -> tuple[list[float], list[float]]:
    """Theta at increasing radii and the violation max(0, Theta_i - Theta_{i+1})."""
    radii = list(radii)
    if any(b <= a for a, b in zip(radii, radii[1:])):
        raise ValueError("radii must be increasing")
    if density is None:
        density = energy_density(fld)
    values = [theta(fld, x, r, density) for r in radii]
    violations = [max(0.0, a - b) for a, b in zip(values, values[1:])]
    return values, violations


def relative_violations(values, violations) -> list[float]:
    return [v / a if a > 0 else 0.0 for a, v in zip(values, violations)]


# -- stress-energy -----------------------------------------------------------


def stress_energy_residual(fld: QField, region: Ball) -> float:
    """sup |div(e delta_ij - d_iQ : d_jQ)| over the region, over sup e.

    Derivatives are second-order central differences.
    """
    h = fld.h
    dq = np.gradient(fld.data, h, axis=(0, 1, 2))
    grad_sq = sum(np.einsum("...a,...a->...", d, d) for d in dq)
    e = 0.5 * grad_sq
    if math.isfinite(fld.epsilon):
        e = e + bulk_potential(fld.data, fld.params) / fld.epsilon**2
    div = np.zeros(fld.grid.shape + (3,))
    for i in range(3):
        for j in range(3):
            t_ij = -np.einsum("...a,...a->...", dq[i], dq[j])
            if i == j:
                t_ij = t_ij + e
            div[..., i] += np.gradient(t_ij, h, axis=j)
    sel = region.mask(fld.grid)
    inner = np.zeros(fld.grid.shape, dtype=bool)
    inner[2:-2, 2:-2, 2:-2] = True
    sel &= inner
    if not sel.any():
        return 0.0
    emax = float(e[sel].max())
    if emax <= 0.0:
        return 0.0
    return float(np.sqrt(np.sum(div[sel] ** 2, axis=-1)).max() / emax)


# -- regular scale and bad set -----------------------------------------------


def radius_ladder(h: float) -> np.ndarray:
    """{h, 2h, ...} up to 1, with 1 itself appended when not on the ladder."""
    m = int(math.floor(1.0 / h + 1e-9))
    ladder = list(np.arange(1, m + 1) * h)
    if ladder[-1] < 1.0 - 1e-12:
        ladder.append(1.0)
    else:
        ladder[-1] = 1.0
    return np.array(ladder)


def regular_scale(fld: QField, x, density: np.ndarray | None = None) -> float:
    """Largest ladder radius r <= 1 with r^2 max_{B_r(x)} e_eps <= 1; 0 if none."""
    if density is None:
        density = energy_density(fld)
    d = np.sqrt(np.sum((fld.grid.coords - np.asarray(x, dtype=float)) ** 2, axis=-1)).ravel()
    e = density.ravel()
    best = 0.0
    for r in radius_ladder(fld.h):
        inside = d < r
        if inside.any() and r * r * e[inside].max() > 1.0:
            break
        best = float(r)
    return best


def regular_scale_map(fld: QField, density: np.ndarray | None = None) -> np.ndarray:
    """Regular scale at every node, via one distance transform per ladder rung.

    Rung r fails at y iff some node z with e(z) > 1/r^2 satisfies |z - y| < r.
    """
    if density is None:
        density = energy_density(fld)
    h = fld.h
    out = np.zeros(fld.grid.shape)
    alive = np.ones(fld.grid.shape, dtype=bool)
    for r in radius_ladder(h):
        hot = density > 1.0 / (r * r)
        if hot.any():
            dist_sq = ndimage.distance_transform_edt(~hot, return_distances=True) ** 2
            fails = dist_sq < (r / h) ** 2 * (1 - 1e-12)
        else:
            fails = np.zeros_like(alive)
        alive &= ~fails
        if not alive.any():
            break
        out[alive] = r
    return out


@dataclass
class BadSetMask:
    mask: np.ndarray
    r: float
    delta: float
    region: Ball

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    def points(self, fld: QField) -> np.ndarray:
        return fld.grid.coords[self.mask]


def bad_set(
    fld: QField,
    region: Ball,
    r: float,
    delta: float,
    density: np.ndarray | None = None,
    scale_map: np.ndarray | None = None,
) -> BadSetMask:
    """Nodes in ``region`` with regular scale < r or distance to the vacuum > delta."""
    if not (0 < r <= 1):
        raise ValueError(f"r must lie in (0, 1], got {r}")
    if delta <= 0:
        raise ValueError("delta must be positive")
    if scale_map is None:
        scale_map = regular_scale_map(fld, density)
    far = dist_to_vacuum(fld.data, fld.params) > delta
    mask = region.mask(fld.grid) & ((scale_map < r) | far)
    return BadSetMask(mask, r, delta, region)


# -- covering ----------------------------------------------------------------


@dataclass
class PinchRecord:
    center: tuple[float, float, float]
    radius: float
    top_energy: float
    inner_max: float
    drop: float
    pinched: int
    depth: int


@dataclass
class CoverResult:
    balls: list[Ball]
    pinch_trace: list[PinchRecord] = field(default_factory=list)
    target: BadSetMask | None = None
    eta: float = 0.0
    visited: int = 0

    @property
    def count(self) -> int:
        return len(self.balls)

    def union_mask(self, fld: QField) -> np.ndarray:
        m = np.zeros(fld.grid.shape, dtype=bool)
        for b in self.balls:
            m |= b.mask(fld.grid)
        return m

    def covers(self, fld: QField, mask: np.ndarray | None = None) -> bool:
        mask = self.target.mask if mask is None else mask
        return bool(np.all(self.union_mask(fld)[mask]))


class _Coverer:
    def __init__(self, fld, region, r, target, eta, beta, budget, density):
        self.fld = fld
        self.region = region
        self.r = r
        self.target = target
        self.eta = eta
        self.beta = beta
        self.budget = budget
        self.density = density
        self.region_mask = region.mask(fld.grid)
        self.maps: dict[float, np.ndarray] = {}
        self.balls: list[Ball] = []
        self.trace: list[PinchRecord] = []
        self.visited = 0

    def theta_at(self, radius: float) -> np.ndarray:
        radius = max(radius, 2.0 * self.fld.h)
        key = round(radius, 12)
        if key not in self.maps:
            self.maps[key] = theta_map(self.fld, radius, self.density)
        return self.maps[key]

    def samples(self, center, radius) -> np.ndarray:
        """Flat node indices on a sub-lattice of spacing max(h, R/10) in B_{2R}(center)."""
        g = self.fld.grid
        stride = max(1, int(round(radius / 10.0 / g.h)))
        c = np.asarray(center)
        d2 = np.sum((g.coords - c) ** 2, axis=-1)
        sel = (d2 < (2.0 * radius) ** 2) & self.region_mask
        lattice = np.zeros(g.shape, dtype=bool)
        lattice[::stride, ::stride, ::stride] = True
        pts = sel & lattice
        if not pts.any():
            pts = sel
        if not pts.any():
            pts = np.zeros(g.shape, dtype=bool)
            pts[g.index_of(c)] = True
        return np.flatnonzero(pts)

    def bad_in(self, ball: Ball) -> np.ndarray:
        return self.target.mask & ball.mask(self.fld.grid)

    def tick(self) -> None:
        self.visited += 1
        if self.visited > self.budget:
            raise BudgetExceeded(f"covering visited more than {self.budget} balls")

    def emit(self, center, radius) -> Ball:
        b = Ball(tuple(center), radius)
        self.balls.append(b)
        return b

    def cover(self, center, radius: float, depth: int = 0) -> None:
        """Cover target bad nodes in B_radius(center)."""
        self.tick()
        start = Ball(tuple(center), radius)
        if not self.bad_in(start).any():
            return
        if radius <= self.r * (1 + 1e-12):
            self.emit(center, max(radius, self.r))
            return
        coords = self.fld.grid.coords.reshape(-1, 3)
        # pinching chain with the energy level frozen at the top of the chain
        idx = self.samples(center, radius)
        top = float(self.theta_at(radius).ravel()[idx].max())
        x, rho = np.asarray(center, dtype=float), radius
        chain_ball = None
        while True:
            idx = self.samples(x, rho)
            inner = self.theta_at(rho / 20.0).ravel()[idx]
            pinched = inner > top - self.eta
            imax = float(inner.max())
            self.trace.append(
                PinchRecord(tuple(float(v) for v in x), rho, top, imax, top - imax, int(pinched.sum()), depth)
            )
            if not pinched.any():
                chain_ball = self.emit(x, rho)
                break
            x = coords[idx[np.argmax(np.where(pinched, inner, -np.inf))]].copy()
            if rho / 2.0 <= self.r:
                chain_ball = self.emit(x, self.r)
                break
            rho = rho / 2.0
        # remaining bad nodes of B_radius(center): recurse on half-radius sub-balls
        rest = self.bad_in(start) & ~chain_ball.mask(self.fld.grid)
        if not rest.any():
            return
        sub = radius / 2.0
        spacing = 2.0 * sub / math.sqrt(3.0)
        pts = coords[rest.ravel()]
        keys = np.floor((pts - np.asarray(center)) / spacing + 0.5).astype(int)
        for key in np.unique(keys, axis=0):
            c = np.asarray(center) + key * spacing
            self.cover(c, max(sub, self.r), depth + 1)


def cover_bad_set(
    fld: QField,
    region: Ball,
    r: float,
    delta: float,
    eta: float | None = None,
    beta: float = 0.25,
    budget: int = 4096,
    density: np.ndarray | None = None,
    target: BadSetMask | None = None,
) -> CoverResult:
    """Cover Bad(r, delta) within ``region`` by balls found through pinching.

    Starting from the region ball B_R(x0), the chain freezes
    E = max Theta_R over B_2R(x0) and repeatedly moves to the sample
    maximising Theta_{rho/20} among the pinched set
    {Theta_{rho/20} > E - eta}, halving rho until the pinched set is empty
    or rho reaches r. Bad nodes of B_R(x0) left outside the chain's ball are
    covered recursively from half-radius sub-balls, so the result always
    contains the pointwise bad set.

    ``eta`` defaults to 0.05 times the top-level maximum of Theta_R.
    """
    if r < 4.0 * fld.h * (1 - 1e-12):
        raise ResolutionError(f"covering scale {r:.4g} below 4h = {4 * fld.h:.4g}")
    if not (0.0 < beta < 0.5):
        raise ValueError("beta must lie in (0, 1/2)")
    if density is None:
        density = energy_density(fld)
    if target is None:
        target = bad_set(fld, region, min(r, 1.0), delta, density)
    cov = _Coverer(fld, region, r, target, 0.0, beta, budget, density)
    if eta is None:
        idx = cov.samples(region.center, region.radius)
        e_top = float(cov.theta_at(region.radius).ravel()[idx].max())
        eta = 0.05 * e_top if e_top > 0 else 1.0
    if eta <= 0:
        raise ValueError("eta must be positive")
    cov.eta = eta
    if target.mask.any():
        cov.cover(region.center, region.radius)
    return CoverResult(cov.balls, cov.trace, target, eta, cov.visited)


def neighborhood_volume(fld: QField, balls: list[Ball], region: Ball, r: float) -> float:
    """Volume of the r-neighbourhood of (union of balls) intersected with region.

    Measured on a lattice of spacing h over the region's bounding box grown
    by r, so the neighbourhood is not clipped by the cube.
    """
    h = fld.h
    c = np.asarray(region.center)
    half = region.radius + r + 2 * h
    m = int(math.ceil(half / h))
    ax = np.arange(-m, m + 1) * h
    pts = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1) + c
    in_region = np.sum((pts - c) ** 2, axis=-1) < region.radius**2
    covered = np.zeros(in_region.shape, dtype=bool)
    for b in balls:
        covered |= np.sum((pts - np.asarray(b.center)) ** 2, axis=-1) < b.radius**2
    seed = covered & in_region
    if not seed.any():
        return 0.0
    dist = ndimage.distance_transform_edt(~seed) * h
    return float(np.count_nonzero(dist < r) * h**3)


def mask_neighborhood_volume(fld: QField, mask: np.ndarray, r: float) -> float:
    """Volume of the r-neighbourhood of the nodes in ``mask``, unclipped."""
    if not mask.any():
        return 0.0
    h = fld.h
    pad = int(math.ceil(r / h)) + 1
    padded = np.pad(mask, pad)
    dist = ndimage.distance_transform_edt(~padded) * h
    return float(np.count_nonzero(dist < r) * h**3)


# -- weak L^3 ----------------------------------------------------------------


def weak_l3_quasinorm(fld: QField, region: Ball, levels: int = 64) -> float:
    """max_t t * |{x in region : |grad Q| > t}|^(1/3) over a log grid of t."""
    g = gradient_norm(fld)[region.mask(fld.grid)]
    if g.size == 0:
        return 0.0
    gmax = float(g.max())
    if gmax <= 0.0:
        return 0.0
    ts = np.geomspace(1e-2, 10.0 * gmax, levels)
    gs = np.sort(g)
    counts = g.size - np.searchsorted(gs, ts, side="right")
    vals = ts * np.cbrt(counts * fld.h**3)
    return float(vals.max())


def phase_histogram(fld: QField, region: Ball, tol: float = 1e-6) -> dict[str, int]:
    from .qtensor import classify_phases

    tags = classify_phases(fld.data[region.mask(fld.grid)], tol)
    return {
        "isotropic": int(np.sum(tags == 0)),
        "uniaxial": int(np.sum(tags == 1)),
        "biaxial": int(np.sum(tags == 2)),
    }
