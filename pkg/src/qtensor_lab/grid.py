"""Q-tensor fields on a uniform grid over the cube [-1, 1]^3."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .qtensor import MaterialParams, bulk_potential, uniaxial

MAGIC = b"QTNF"
VERSION = 1
_HEADER = struct.Struct("<4sIIddddd12x")
HEADER_SIZE = _HEADER.size  # 64


class FormatError(ValueError):
    """A field file is truncated or has the wrong magic/version."""


class EmptyIntersection(ValueError):
    """No grid node lies inside the requested ball."""


class GridMismatch(ValueError):
    """Two fields live on different grids."""


@dataclass(frozen=True)
class Grid:
    n: int

    def __post_init__(self) -> None:
        if int(self.n) != self.n or self.n < 8:
            raise ValueError(f"grid needs at least 8 nodes per axis, got {self.n}")

    @property
    def h(self) -> float:
        return 2.0 / (self.n - 1)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n, self.n, self.n)

    @cached_property
    def axis(self) -> np.ndarray:
        x = -1.0 + np.arange(self.n) * self.h
        x[-1] = 1.0
        return x

    @cached_property
    def coords(self) -> np.ndarray:
        """Node coordinates, shape (n, n, n, 3)."""
        x = self.axis
        return np.stack(np.meshgrid(x, x, x, indexing="ij"), axis=-1)

    @cached_property
    def radius(self) -> np.ndarray:
        return np.sqrt(np.sum(self.coords**2, axis=-1))

    @cached_property
    def face_mask(self) -> np.ndarray:
        m = np.zeros(self.shape, dtype=bool)
        m[0, :, :] = m[-1, :, :] = True
        m[:, 0, :] = m[:, -1, :] = True
        m[:, :, 0] = m[:, :, -1] = True
        return m

    def index_of(self, x) -> tuple[int, int, int]:
        """Nearest node to point ``x``."""
        idx = np.rint((np.asarray(x, dtype=float) + 1.0) / self.h).astype(int)
        idx = np.clip(idx, 0, self.n - 1)
        return tuple(int(i) for i in idx)

    def node(self, idx) -> np.ndarray:
        return self.coords[tuple(idx)]


@dataclass(frozen=True)
class Ball:
    center: tuple[float, float, float]
    radius: float

    def __post_init__(self) -> None:
        if not self.radius > 0:
            raise ValueError(f"ball radius must be positive, got {self.radius}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    def mask(self, grid: Grid) -> np.ndarray:
        d2 = np.sum((grid.coords - np.asarray(self.center)) ** 2, axis=-1)
        return d2 < self.radius**2


@dataclass
class QField:
    """Nodal Q-tensor coefficients plus Dirichlet mask and solve metadata.

    ``data`` has shape (n, n, n, 5). Nodes where ``mask`` is true are frozen
    at their current values; solvers never write to them.
    """

    grid: Grid
    data: np.ndarray
    mask: np.ndarray
    epsilon: float
    params: MaterialParams = field(default_factory=MaterialParams)

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        self.mask = np.ascontiguousarray(self.mask, dtype=bool)
        if self.data.shape != self.grid.shape + (5,):
            raise ValueError(f"data shape {self.data.shape} does not match grid {self.grid.shape}")
        if self.mask.shape != self.grid.shape:
            raise ValueError(f"mask shape {self.mask.shape} does not match grid {self.grid.shape}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")

    @property
    def h(self) -> float:
        return self.grid.h

    def copy(self, **changes) -> "QField":
        kw = dict(
            grid=self.grid,
            data=self.data.copy(),
            mask=self.mask.copy(),
            epsilon=self.epsilon,
            params=self.params,
        )
        kw.update(changes)
        return QField(**kw)

    def with_epsilon(self, epsilon: float) -> "QField":
        return self.copy(epsilon=epsilon)


# -- boundary data and reference maps ----------------------------------------


def hedgehog_boundary(grid: Grid, p: MaterialParams) -> tuple[np.ndarray, np.ndarray]:
    """Radial vacuum data s_*(x^ x x^ - I/3) on the cube faces.

    Returns ``(values, mask)``; values are zero off the faces.
    """
    mask = grid.face_mask
    values = np.zeros(grid.shape + (5,))
    values[mask] = uniaxial(p.s_star, grid.coords[mask])
    return values, mask


def constant_boundary(grid: Grid, p: MaterialParams, director=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    mask = grid.face_mask
    values = np.zeros(grid.shape + (5,))
    values[mask] = uniaxial(p.s_star, director)
    return values, mask


def hedgehog_reference(
    grid: Grid, p: MaterialParams, core_radius: float = 0.0, epsilon: float = 1.0
) -> QField:
    """Hedgehog s(|x|)(x^ x x^ - I/3) with a linear core of the given radius.

    With ``core_radius == 0`` this is the exact limit map; the origin node (if
    any) is set to zero.
    """
    if core_radius < 0:
        raise ValueError("core_radius must be nonnegative")
    rho = grid.radius
    if core_radius > 0:
        s = p.s_star * np.minimum(1.0, rho / core_radius)
    else:
        s = np.full(grid.shape, p.s_star)
    s = np.where(rho > 0, s, 0.0)
    safe = np.where(rho[..., None] > 0, grid.coords, np.array([0.0, 0.0, 1.0]))
    data = uniaxial(s, safe)
    values, mask = hedgehog_boundary(grid, p)
    data[mask] = values[mask]
    return QField(grid, data, mask, epsilon, p)


def constant_field(grid: Grid, p: MaterialParams, q, epsilon: float = 1.0, mask=None) -> QField:
    data = np.broadcast_to(np.asarray(q, dtype=float), grid.shape + (5,)).copy()
    if mask is None:
        mask = grid.face_mask
    return QField(grid, data, mask, epsilon, p)


def vacuum_field(grid: Grid, p: MaterialParams, epsilon: float = 1.0, director=(0.0, 0.0, 1.0)) -> QField:
    """Constant vacuum state with matching constant Dirichlet data."""
    return constant_field(grid, p, uniaxial(p.s_star, director), epsilon)


# -- pointwise densities -----------------------------------------------------


def forward_differences(data: np.ndarray, h: float) -> list[np.ndarray]:
    """Per-node difference quotients along each axis, shape (n, n, n, 5) each.

    Node i uses the link (i, i+1); the last node on an axis reuses the link
    (n-2, n-1), i.e. a one-sided inward difference.
    """
    out = []
    for ax in range(3):
        d = np.diff(data, axis=ax) / h
        last = np.take(d, [-1], axis=ax)
        out.append(np.concatenate([d, last], axis=ax))
    return out


def discrete_gradient_sq(fld: QField) -> np.ndarray:
    """|grad Q|^2 per node from the three outgoing links."""
    total = np.zeros(fld.grid.shape)
    for d in forward_differences(fld.data, fld.h):
        total += np.einsum("...a,...a->...", d, d)
    return total


def gradient_norm(fld: QField) -> np.ndarray:
    return np.sqrt(discrete_gradient_sq(fld))


def bulk_density(fld: QField) -> np.ndarray:
    return bulk_potential(fld.data, fld.params)


def energy_density(fld: QField) -> np.ndarray:
    """e_eps = |grad Q|^2 / 2 + f(Q) / eps^2 per node."""
    return 0.5 * discrete_gradient_sq(fld) + bulk_density(fld) / fld.epsilon**2


def integrate_ball(grid: Grid | QField, density: np.ndarray, ball: Ball) -> float:
    """Voxel-center rule h^3 * sum of ``density`` over nodes strictly inside ``ball``."""
    if isinstance(grid, QField):
        grid = grid.grid
    inside = ball.mask(grid)
    if not inside.any():
        raise EmptyIntersection(f"no node inside ball at {ball.center} with radius {ball.radius}")
    density = np.broadcast_to(np.asarray(density, dtype=float), grid.shape)
    return float(grid.h**3 * np.sum(density[inside]))


# -- serialization -----------------------------------------------------------


def save_field(fld: QField, path) -> None:
    n = fld.grid.n
    p = fld.params
    header = _HEADER.pack(MAGIC, VERSION, n, fld.h, fld.epsilon, p.a, p.b, p.c)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(fld.mask.astype(np.uint8).tobytes(order="C"))
        fh.write(fld.data.astype("<f8").tobytes(order="C"))
    tmp.replace(path)


def load_field(path) -> QField:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, n, h, eps, a, b, c = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version, expected {VERSION}, found {version}")
    nodes = n**3
    expected = HEADER_SIZE + nodes + 8 * 5 * nodes
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for n={n}, found {len(raw)}")
    grid = Grid(n)
    if h != grid.h:
        raise FormatError(f"{path}: spacing {h!r} inconsistent with n={n}")
    mask = np.frombuffer(raw, dtype=np.uint8, count=nodes, offset=HEADER_SIZE)
    if mask.max(initial=0) > 1:
        raise FormatError(f"{path}: mask bytes must be 0 or 1")
    data = np.frombuffer(raw, dtype="<f8", count=5 * nodes, offset=HEADER_SIZE + nodes)
    return QField(
        grid,
        data.reshape(grid.shape + (5,)).astype(np.float64),
        mask.reshape(grid.shape).astype(bool),
        eps,
        MaterialParams(a, b, c),
    )
