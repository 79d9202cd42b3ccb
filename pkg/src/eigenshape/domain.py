"""Level-set representation of open planar domains on a uniform grid.

A domain is the sublevel set {phi < 0} of a nodal scalar field on a uniform
Cartesian grid. This module provides the geometric primitives everything else
builds on: area measurement, dilation, boundary sampling with normals and
arclength weights, local density ratios, signed-distance reinitialization,
and a few analytic shape constructors for tests and initial guesses.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "Grid",
    "GridDomain",
    "BoundaryMesh",
    "inside_fraction",
    "bilinear",
    "volume",
    "dilate",
    "extract_boundary",
    "density_ratio",
    "reinitialize",
    "connected_components",
    "perimeter",
    "roundness",
    "disk",
    "rectangle",
    "half_plane",
    "star_blob",
    "union",
    "intersection",
    "difference",
    "write_field_dump",
    "read_field_dump",
    "write_grid_dump",
    "read_grid_dump",
    "write_boundary_csv",
]


@dataclasses.dataclass(frozen=True)
class Grid:
    """Uniform node-centered grid covering [x0, x0+(nx-1)h] x [y0, y0+(ny-1)h].

    Fields are immutable; arrays indexed [j, i] with j along y and i along x,
    matching the on-disk dump layout (rows from y0 upward).
    """

    nx: int
    ny: int
    h: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        if self.nx < 8 or self.ny < 8:
            raise ValueError(f"grid must be at least 8x8, got {self.nx}x{self.ny}")
        if not self.h > 0:
            raise ValueError(f"grid spacing must be positive, got {self.h}")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def xs(self) -> np.ndarray:
        return self.origin[0] + self.h * np.arange(self.nx)

    @property
    def ys(self) -> np.ndarray:
        return self.origin[1] + self.h * np.arange(self.ny)

    def meshgrid(self) -> tuple[np.ndarray, np.ndarray]:
        """Node coordinate arrays X, Y of shape (ny, nx)."""
        return np.meshgrid(self.xs, self.ys)

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(x0, y0, x1, y1) of the covered box."""
        x0, y0 = self.origin
        return (x0, y0, x0 + (self.nx - 1) * self.h, y0 + (self.ny - 1) * self.h)

    @property
    def diameter(self) -> float:
        x0, y0, x1, y1 = self.extent
        return math.hypot(x1 - x0, y1 - y0)

    @classmethod
    def from_box(cls, x0: float, y0: float, x1: float, y1: float, nx: int, ny: int) -> "Grid":
        """Grid over the closed box; spacings in x and y must agree to 1e-9."""
        hx = (x1 - x0) / (nx - 1)
        hy = (y1 - y0) / (ny - 1)
        if abs(hx - hy) > 1e-9 * max(hx, hy):
            raise ValueError(f"anisotropic spacing not supported (hx={hx}, hy={hy})")
        return cls(nx=nx, ny=ny, h=hx, origin=(x0, y0))


@dataclasses.dataclass(frozen=True, eq=False)
class GridDomain:
    """An open planar set Omega = {phi < 0} sampled at grid nodes.

    ``generation`` is a revision counter bumped by :meth:`with_phi`, used to
    detect stale derived data (spectra computed for an older phi).
    """

    grid: Grid
    phi: np.ndarray
    generation: int = 0

    def __post_init__(self) -> None:
        phi = np.ascontiguousarray(self.phi, dtype=float)
        if phi.shape != (self.grid.ny, self.grid.nx):
            raise ValueError(
                f"phi shape {phi.shape} does not match grid ({self.grid.ny}, {self.grid.nx})"
            )
        if not np.all(np.isfinite(phi)):
            raise ValueError("phi must be finite at every node")
        phi.flags.writeable = False
        object.__setattr__(self, "phi", phi)

    def with_phi(self, phi: np.ndarray) -> "GridDomain":
        return GridDomain(self.grid, phi, generation=self.generation + 1)

    @property
    def inside(self) -> np.ndarray:
        """Boolean node mask of Omega."""
        return self.phi < 0

    @property
    def is_empty(self) -> bool:
        return not bool(self.inside.any())


@dataclasses.dataclass(frozen=True, eq=False)
class BoundaryMesh:
    """Boundary samples: zero-crossings of phi along grid edges.

    points: (m, 2) positions; normals: (m, 2) unit outward vectors;
    weights: (m,) arclength weights whose sum approximates the perimeter.
    """

    points: np.ndarray
    normals: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def is_empty(self) -> bool:
        return len(self) == 0


# ---------------------------------------------------------------------------
# quadrature helpers
# ---------------------------------------------------------------------------

def inside_fraction(phi: np.ndarray, eps: float) -> np.ndarray:
    """Smoothed indicator of {phi < 0} with transition half-width ``eps``.

    1 where phi <= -eps, 0 where phi >= eps, and a C^1 sine ramp in between.
    """
    phi = np.asarray(phi, dtype=float)
    t = np.clip(phi / eps, -1.0, 1.0)
    # clip: sin(pi) roundoff would otherwise leave values ~ -1e-17 outside [0, 1]
    return np.clip(0.5 * (1.0 - t - np.sin(np.pi * t) / np.pi), 0.0, 1.0)


def _node_weights(grid: Grid) -> np.ndarray:
    """Tensor trapezoid weights: h^2, halved on the outer box faces."""
    tx = np.ones(grid.nx)
    tx[0] = tx[-1] = 0.5
    ty = np.ones(grid.ny)
    ty[0] = ty[-1] = 0.5
    return grid.h * grid.h * np.outer(ty, tx)


def bilinear(grid: Grid, field: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Bilinear interpolation of a nodal field at points (m, 2).

    Coordinates are clamped to the grid box; callers that care about
    out-of-box queries must handle them beforehand.
    """
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    fx = (pts[:, 0] - grid.origin[0]) / grid.h
    fy = (pts[:, 1] - grid.origin[1]) / grid.h
    i0 = np.clip(np.floor(fx).astype(int), 0, grid.nx - 2)
    j0 = np.clip(np.floor(fy).astype(int), 0, grid.ny - 2)
    tx = np.clip(fx - i0, 0.0, 1.0)
    ty = np.clip(fy - j0, 0.0, 1.0)
    f00 = field[j0, i0]
    f10 = field[j0, i0 + 1]
    f01 = field[j0 + 1, i0]
    f11 = field[j0 + 1, i0 + 1]
    return (
        (1 - tx) * (1 - ty) * f00
        + tx * (1 - ty) * f10
        + (1 - tx) * ty * f01
        + tx * ty * f11
    )


# ---------------------------------------------------------------------------
# measurements
# ---------------------------------------------------------------------------

def volume(d: GridDomain) -> float:
    """Area of Omega by smoothed-Heaviside node quadrature (width 1.5h)."""
    chi = inside_fraction(d.phi, 1.5 * d.grid.h)
    return float(np.sum(_node_weights(d.grid) * chi))


def dilate(d: GridDomain, t: float) -> GridDomain:
    """The dilated domain t*Omega on the same grid.

    Samples phi(x/t) bilinearly and rescales by t, so a signed-distance input
    stays a signed distance. Query points that fall outside the original box
    pick up the clamped value plus the overshoot distance, keeping far-field
    positivity.
    """
    if not t > 0:
        raise ValueError(f"dilation factor must be positive, got {t}")
    if t == 1.0:
        return d.with_phi(d.phi.copy())
    X, Y = d.grid.meshgrid()
    qx = X.ravel() / t
    qy = Y.ravel() / t
    vals = bilinear(d.grid, d.phi, np.column_stack([qx, qy]))
    x0, y0, x1, y1 = d.grid.extent
    over = np.hypot(
        np.maximum(x0 - qx, 0.0) + np.maximum(qx - x1, 0.0),
        np.maximum(y0 - qy, 0.0) + np.maximum(qy - y1, 0.0),
    )
    phi = t * (vals + over)
    return d.with_phi(phi.reshape(d.phi.shape))


def density_ratio(d: GridDomain, x: Sequence[float], r: float) -> float:
    """|B_r(x) inside Omega| / |B_r(x)| by mollified node quadrature.

    Both numerator and denominator use the same one-cell-mollified ball
    weights, so the result lies in [0, 1] exactly and equals 1 for balls
    fully inside Omega. For balls clipped by the grid box the ratio is
    relative to the in-box part.
    """
    h = d.grid.h
    if r < 2 * h:
        raise ValueError(f"radius {r} below resolvable 2h = {2 * h}")
    cx, cy = float(x[0]), float(x[1])
    # restrict to the window of nodes that can carry ball weight
    pad = r + 2 * h
    i_lo = max(0, int(math.floor((cx - pad - d.grid.origin[0]) / h)))
    i_hi = min(d.grid.nx, int(math.ceil((cx + pad - d.grid.origin[0]) / h)) + 1)
    j_lo = max(0, int(math.floor((cy - pad - d.grid.origin[1]) / h)))
    j_hi = min(d.grid.ny, int(math.ceil((cy + pad - d.grid.origin[1]) / h)) + 1)
    if i_lo >= i_hi or j_lo >= j_hi:
        return 0.0
    xs = d.grid.xs[i_lo:i_hi]
    ys = d.grid.ys[j_lo:j_hi]
    X, Y = np.meshgrid(xs, ys)
    dist = np.hypot(X - cx, Y - cy)
    ball_w = inside_fraction(dist - r, h)
    den = float(ball_w.sum())
    if den <= 0.0:
        return 0.0
    om = inside_fraction(d.phi[j_lo:j_hi, i_lo:i_hi], 1.5 * h)
    return float(np.sum(ball_w * om) / den)


def connected_components(d: GridDomain) -> int:
    """Number of 4-connected components of the inside node mask."""
    _, n = ndimage.label(d.inside)
    return int(n)


def split_components(d: GridDomain) -> list["GridDomain"]:
    """One GridDomain per 4-connected component, largest volume first.

    Every node is assigned to its nearest component (so each part keeps its
    own smoothing skirt and the parts' volumes sum exactly to the total);
    foreign nodes are pushed well outside the indicator ramp.
    """
    labels, n = ndimage.label(d.inside)
    if n <= 1:
        return [d]
    _, (jn, inx) = ndimage.distance_transform_edt(~d.inside, return_indices=True)
    owner = labels[jn, inx]
    far = 3.0 * d.grid.h
    parts = [
        d.with_phi(np.where(owner == i, d.phi, far)) for i in range(1, n + 1)
    ]
    parts.sort(key=volume, reverse=True)
    return parts


def perimeter(d: GridDomain) -> float:
    return float(extract_boundary(d).weights.sum())


def roundness(d: GridDomain) -> float:
    """Isoperimetric quotient 4*pi*|Omega| / P^2 (1 for a disk)."""
    p = perimeter(d)
    if p == 0.0:
        return 0.0
    return 4.0 * math.pi * volume(d) / p**2


# ---------------------------------------------------------------------------
# boundary extraction
# ---------------------------------------------------------------------------

def extract_boundary(d: GridDomain) -> BoundaryMesh:
    """Sample the zero level set of phi on sign-change grid edges.

    One sample per edge whose endpoints straddle zero, positioned by linear
    interpolation. Normals are the bilinearly interpolated central-difference
    gradient of phi, normalized (outward = toward phi > 0). Arclength weights
    come from the marching-squares polyline: each cell segment contributes
    half its length to each of its two endpoint samples, so the weight sum
    tracks the perimeter.
    """
    phi = d.phi
    grid = d.grid
    h = grid.h
    inside = phi < 0

    # --- crossing points on horizontal and vertical edges ---
    hx_mask = inside[:, :-1] != inside[:, 1:]
    vy_mask = inside[:-1, :] != inside[1:, :]
    if not hx_mask.any() and not vy_mask.any():
        empty = np.zeros((0, 2))
        return BoundaryMesh(points=empty, normals=empty, weights=np.zeros(0))

    jH, iH = np.nonzero(hx_mask)
    jV, iV = np.nonzero(vy_mask)

    phiH1 = phi[jH, iH]
    phiH2 = phi[jH, iH + 1]
    thH = phiH1 / (phiH1 - phiH2)
    ptsH = np.column_stack([grid.xs[iH] + thH * h, grid.ys[jH]])

    phiV1 = phi[jV, iV]
    phiV2 = phi[jV + 1, iV]
    thV = phiV1 / (phiV1 - phiV2)
    ptsV = np.column_stack([grid.xs[iV], grid.ys[jV] + thV * h])

    pts = np.vstack([ptsH, ptsV])
    n_h = len(jH)

    # --- normals from the interpolated nodal gradient ---
    gy, gx = np.gradient(phi, h)
    nx_ = bilinear(grid, gx, pts)
    ny_ = bilinear(grid, gy, pts)
    norms = np.hypot(nx_, ny_)
    # degenerate gradient: fall back to the edge direction, oriented outward
    bad = norms < 1e-12
    if bad.any():
        fall = np.zeros((len(pts), 2))
        fall[:n_h, 0] = np.sign(phiH2 - phiH1)
        fall[n_h:, 1] = np.sign(phiV2 - phiV1)
        nx_ = np.where(bad, fall[:, 0], nx_)
        ny_ = np.where(bad, fall[:, 1], ny_)
        norms = np.where(bad, np.hypot(nx_, ny_), norms)
    normals = np.column_stack([nx_ / norms, ny_ / norms])

    # --- arclength weights via per-cell segments ---
    Hid = np.full(hx_mask.shape, -1, dtype=int)
    Hid[jH, iH] = np.arange(n_h)
    Vid = np.full(vy_mask.shape, -1, dtype=int)
    Vid[jV, iV] = np.arange(len(jV)) + n_h

    weights = np.zeros(len(pts))
    # cells owning at least one crossing edge
    cell_mask = np.zeros((grid.ny - 1, grid.nx - 1), dtype=bool)
    cell_mask |= hx_mask[:-1, :]   # bottom edges
    cell_mask |= hx_mask[1:, :]    # top edges
    cell_mask |= vy_mask[:, :-1]   # left edges
    cell_mask |= vy_mask[:, 1:]    # right edges

    def _add_segment(a: int, b: int) -> None:
        seg = 0.5 * math.hypot(pts[a, 0] - pts[b, 0], pts[a, 1] - pts[b, 1])
        weights[a] += seg
        weights[b] += seg

    for j, i in zip(*np.nonzero(cell_mask)):
        bottom = Hid[j, i]
        top = Hid[j + 1, i]
        left = Vid[j, i]
        right = Vid[j, i + 1]
        ids = [k for k in (bottom, right, top, left) if k >= 0]
        if len(ids) == 2:
            _add_segment(ids[0], ids[1])
        elif len(ids) == 4:
            # saddle cell: pair crossings by the sign of the center value
            center = 0.25 * (phi[j, i] + phi[j, i + 1] + phi[j + 1, i] + phi[j + 1, i + 1])
            corner00_in = inside[j, i]
            # center inside <-> the two outside corners are isolated
            if (center < 0) == corner00_in:
                _add_segment(bottom, right)
                _add_segment(top, left)
            else:
                _add_segment(bottom, left)
                _add_segment(top, right)

    return BoundaryMesh(points=pts, normals=normals, weights=weights)


# ---------------------------------------------------------------------------
# reinitialization
# ---------------------------------------------------------------------------

def _one_sided_diffs(phi: np.ndarray, h: float):
    """Backward/forward differences per axis with replicated edges."""
    pad_x = np.pad(phi, ((0, 0), (1, 1)), mode="edge")
    pad_y = np.pad(phi, ((1, 1), (0, 0)), mode="edge")
    dxm = (phi - pad_x[:, :-2]) / h
    dxp = (pad_x[:, 2:] - phi) / h
    dym = (phi - pad_y[:-2, :]) / h
    dyp = (pad_y[2:, :] - phi) / h
    return dxm, dxp, dym, dyp


def reinitialize(d: GridDomain, tol: float = 1e-3, max_iter: int = 400) -> GridDomain:
    """Relax phi toward the signed distance of its own zero level set.

    Runs the standard reinitialization relaxation phi_tau = S(phi0)(1 - |grad
    phi|) with Godunov upwinding, anchoring interface nodes to the sub-cell
    target distance h*phi0/|grad phi0| so the zero level set does not drift.
    Stops when the sup-norm update drops below ``tol`` or after ``max_iter``
    sweeps.
    """
    h = d.grid.h
    phi0 = d.phi.copy()
    phi = phi0.copy()

    sign0 = np.where(phi0 >= 0, 1.0, -1.0)
    smooth_sign = phi0 / np.sqrt(phi0**2 + h**2)

    # interface nodes: any 4-neighbor on the other side of zero
    inside = phi0 < 0
    iface = np.zeros_like(inside)
    iface[:, :-1] |= inside[:, :-1] != inside[:, 1:]
    iface[:, 1:] |= inside[:, :-1] != inside[:, 1:]
    iface[:-1, :] |= inside[:-1, :] != inside[1:, :]
    iface[1:, :] |= inside[:-1, :] != inside[1:, :]

    gy, gx = np.gradient(phi0, h)
    gnorm = np.maximum(np.hypot(gx, gy), 1e-6)
    target = np.clip(phi0 / gnorm, -h, h)  # sub-cell signed distance at the interface

    dtau = 0.5 * h
    for _ in range(max_iter):
        dxm, dxp, dym, dyp = _one_sided_diffs(phi, h)
        # Godunov gradient magnitude for the eikonal update, by phi0 side
        gp = np.sqrt(
            np.maximum(np.maximum(dxm, 0.0) ** 2, np.minimum(dxp, 0.0) ** 2)
            + np.maximum(np.maximum(dym, 0.0) ** 2, np.minimum(dyp, 0.0) ** 2)
        )
        gm = np.sqrt(
            np.maximum(np.minimum(dxm, 0.0) ** 2, np.maximum(dxp, 0.0) ** 2)
            + np.maximum(np.minimum(dym, 0.0) ** 2, np.maximum(dyp, 0.0) ** 2)
        )
        grad = np.where(phi0 >= 0, gp, gm)
        update = -dtau * smooth_sign * (grad - 1.0)
        # anchored update at interface nodes (sub-cell fixed point)
        update_if = -(dtau / h) * (sign0 * np.abs(phi) - sign0 * np.abs(target))
        update = np.where(iface, update_if, update)
        phi += update
        if np.max(np.abs(update)) < tol:
            break
    return d.with_phi(phi)


# ---------------------------------------------------------------------------
# shape constructors
# ---------------------------------------------------------------------------

def disk(grid: Grid, center: Sequence[float] = (0.0, 0.0), radius: float = 1.0) -> GridDomain:
    """Signed-distance disk."""
    X, Y = grid.meshgrid()
    return GridDomain(grid, np.hypot(X - center[0], Y - center[1]) - radius)


def rectangle(grid: Grid, x0: float, y0: float, x1: float, y1: float) -> GridDomain:
    """Signed-distance axis-aligned rectangle (x0, x1) x (y0, y1)."""
    X, Y = grid.meshgrid()
    dx = np.maximum(x0 - X, X - x1)
    dy = np.maximum(y0 - Y, Y - y1)
    outside = np.hypot(np.maximum(dx, 0.0), np.maximum(dy, 0.0))
    inside = np.minimum(np.maximum(dx, dy), 0.0)
    return GridDomain(grid, outside + inside)


def half_plane(grid: Grid, normal: Sequence[float] = (0.0, 1.0), offset: float = 0.0) -> GridDomain:
    """Half-plane {x . n < offset} with unit outward normal n."""
    n = np.asarray(normal, dtype=float)
    n = n / np.hypot(*n)
    X, Y = grid.meshgrid()
    return GridDomain(grid, X * n[0] + Y * n[1] - offset)


def star_blob(
    grid: Grid,
    center: Sequence[float],
    r0: float,
    amp: float,
    n_modes: int,
    rng: np.random.Generator,
    mirror_x: bool = False,
) -> GridDomain:
    """Random star-shaped blob r(theta) = r0 (1 + perturbation).

    Harmonics 2..n_modes+1 with Gaussian coefficients, rescaled so the total
    relative perturbation stays below ``amp``. With ``mirror_x`` the blob is
    symmetrized about the vertical axis through its center (used for paired
    initial data).
    """
    ms = np.arange(2, n_modes + 2)
    a = rng.standard_normal(len(ms))
    b = rng.standard_normal(len(ms))
    scale = amp / max(np.sum(np.abs(a)) + np.sum(np.abs(b)), 1e-12)
    a *= scale
    b *= scale
    if mirror_x:
        b[:] = 0.0  # cosine-only profile is even in theta

    X, Y = grid.meshgrid()
    dx = X - center[0]
    dy = Y - center[1]
    theta = np.arctan2(dy, dx)
    r_of_theta = r0 * (
        1.0
        + sum(a[k] * np.cos(m * theta) for k, m in enumerate(ms))
        + sum(b[k] * np.sin(m * theta) for k, m in enumerate(ms))
    )
    return GridDomain(grid, np.hypot(dx, dy) - r_of_theta)


def union(a: GridDomain, b: GridDomain) -> GridDomain:
    return a.with_phi(np.minimum(a.phi, b.phi))


def intersection(a: GridDomain, b: GridDomain) -> GridDomain:
    return a.with_phi(np.maximum(a.phi, b.phi))


def difference(a: GridDomain, b: GridDomain) -> GridDomain:
    """Set difference a \\ b."""
    return a.with_phi(np.maximum(a.phi, -b.phi))


# ---------------------------------------------------------------------------
# dump I/O
# ---------------------------------------------------------------------------

_DUMP_MAGIC = "GRIDDUMP v1"


def write_field_dump(grid: Grid, field: np.ndarray, path) -> None:
    """Text dump of any nodal field: header "GRIDDUMP v1 nx ny h x0 y0",
    then ny rows of nx values, row-major from y0 upward. Floats use repr for
    exact round-trip."""
    with open(path, "w") as f:
        f.write(
            f"{_DUMP_MAGIC} {grid.nx} {grid.ny} {grid.h!r} "
            f"{grid.origin[0]!r} {grid.origin[1]!r}\n"
        )
        for j in range(grid.ny):
            f.write(" ".join(repr(float(v)) for v in field[j]))
            f.write("\n")


def read_field_dump(path) -> tuple[Grid, np.ndarray]:
    with open(path) as f:
        header = f.readline().split()
        if header[:2] != _DUMP_MAGIC.split():
            raise ValueError(f"not a grid dump: {path}")
        nx, ny = int(header[2]), int(header[3])
        h, x0, y0 = float(header[4]), float(header[5]), float(header[6])
        field = np.empty((ny, nx))
        for j in range(ny):
            row = np.array(f.readline().split(), dtype=float)
            if row.size != nx:
                raise ValueError(f"grid dump row {j} has {row.size} values, expected {nx}")
            field[j] = row
    return Grid(nx=nx, ny=ny, h=h, origin=(x0, y0)), field


def write_grid_dump(d: GridDomain, path) -> None:
    """Dump a domain's level-set field (see :func:`write_field_dump`)."""
    write_field_dump(d.grid, d.phi, path)


def read_grid_dump(path) -> GridDomain:
    grid, phi = read_field_dump(path)
    return GridDomain(grid, phi)


def write_boundary_csv(bm: BoundaryMesh, path) -> None:
    with open(path, "w") as f:
        f.write("x,y,nux,nuy,w\n")
        for p, n, w in zip(bm.points, bm.normals, bm.weights):
            f.write(f"{float(p[0])!r},{float(p[1])!r},{float(n[0])!r},"
                    f"{float(n[1])!r},{float(w)!r}\n")
