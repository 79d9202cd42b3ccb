"""Free-boundary measurements on (domain, spectrum, weights) triples.

Scaled boundary energies and their almost-monotonicity constant, the
first-order optimality residual on the boundary, density-based boundary
point classification, a torsion-function nondegeneracy probe, and small
reports on eigenvalue scaling and cluster structure. Everything here is a
pure measurement: synthetic spectra and weight vectors are accepted as
readily as converged optimizer output.
"""

from __future__ import annotations

import dataclasses
import enum
import functools
import math

import numpy as np

from .domain import (
    BoundaryMesh,
    GridDomain,
    _node_weights,
    bilinear,
    density_ratio,
    inside_fraction,
)
from .objective import ObjectiveSpec, WeightVector, eval_F
from .spectral import Spectrum, TorsionField, normal_derivative

__all__ = [
    "WeissProbe",
    "BoundaryClass",
    "BoundaryLabel",
    "ELResidual",
    "ProbeFlag",
    "ScalingReport",
    "SimplicityReport",
    "weiss_energy",
    "weiss_profile",
    "el_residual",
    "classify_boundary",
    "torsion_probe",
    "scaling_check",
    "simplicity_report",
    "write_weiss_csv",
]


# ---------------------------------------------------------------------------
# Weiss-type boundary energies
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True, eq=False)
class WeissProbe:
    """W(x, r) samples at one center plus the fitted drift constant.

    ``c_hat`` is the smallest C >= 0 such that r -> W(x,r) + C*r is
    nondecreasing across the sampled radii; 0 for a single radius.
    """

    center: tuple[float, float]
    radii: tuple[float, ...]
    values: tuple[float, ...]
    c_hat: float


@functools.lru_cache(maxsize=8)
def _mode_gradients(sp: Spectrum, d: GridDomain) -> np.ndarray:
    """Mode gradients, shape (M, 2, ny, nx), interface-aware.

    Central differences in the bulk; where a stencil arm pokes out of
    Omega, the one-sided difference into the domain is used instead, so the
    kink of the zero-extended modes does not halve the boundary gradient.
    """
    h = d.grid.h
    inside = d.inside
    out = np.empty((len(sp), 2, *sp.modes.shape[1:]))

    def axis_grad(u, axis):
        um = np.roll(u, 1, axis=axis)
        up = np.roll(u, -1, axis=axis)
        im = np.roll(inside, 1, axis=axis)
        ip = np.roll(inside, -1, axis=axis)
        edge_lo = [slice(None)] * u.ndim
        edge_lo[axis] = 0
        edge_hi = [slice(None)] * u.ndim
        edge_hi[axis] = -1
        um[tuple(edge_lo)] = 0.0
        im[tuple(edge_lo)] = False
        up[tuple(edge_hi)] = 0.0
        ip[tuple(edge_hi)] = False
        grad = (up - um) / (2.0 * h)
        grad = np.where(im & ~ip, (u - um) / h, grad)
        grad = np.where(ip & ~im, (up - u) / h, grad)
        return grad

    for k in range(len(sp)):
        u = sp.modes[k]
        out[k, 0] = axis_grad(u, 1)
        out[k, 1] = axis_grad(u, 0)
    return out


def _ball_window(d: GridDomain, x: tuple[float, float], r: float):
    """Index slices covering B_r(x) plus the mollifier skirt."""
    g = d.grid
    pad = r + 2.0 * g.h
    i0 = max(0, int(math.floor((x[0] - pad - g.origin[0]) / g.h)))
    i1 = min(g.nx, int(math.ceil((x[0] + pad - g.origin[0]) / g.h)) + 1)
    j0 = max(0, int(math.floor((x[1] - pad - g.origin[1]) / g.h)))
    j1 = min(g.ny, int(math.ceil((x[1] + pad - g.origin[1]) / g.h)) + 1)
    return slice(j0, j1), slice(i0, i1)


def weiss_energy(
    d: GridDomain,
    sp: Spectrum,
    w: WeightVector,
    x: tuple[float, float],
    r: float,
) -> float:
    """Scaled boundary energy at center ``x`` and radius ``r`` (2D scaling).

    W(x,r) = r^-2 * int_{B_r(x) & Omega} (sum_k xi_k |grad u_k|^2 + xi0)
           - r^-3 * int_{bd B_r(x)} sum_k xi_k u_k^2.

    The volume part uses smoothed ball and domain indicators on the node
    quadrature; the ring part samples the circle and interpolates the modes
    bilinearly. Half-plane data with unit gradient and unit weights gives
    pi/2. Requires r >= 4h.
    """
    h = d.grid.h
    if r < 4.0 * h - 1e-12:
        raise ValueError(f"probe radius {r} below resolvable 4h = {4 * h}")
    xis = w.symmetrized()
    grads = _mode_gradients(sp, d)

    rows, cols = _ball_window(d, x, r)
    X, Y = d.grid.meshgrid()
    Xw, Yw = X[rows, cols], Y[rows, cols]
    dist = np.hypot(Xw - x[0], Yw - x[1])
    ball = inside_fraction(dist - r, h)
    chi = inside_fraction(d.phi[rows, cols], 1.5 * h)
    nodes = np.column_stack([Xw.ravel(), Yw.ravel()])
    integ = w.xi0_at(nodes).reshape(Xw.shape)
    for k in range(len(xis)):
        gk = grads[k][:, rows, cols]
        integ = integ + xis[k] * (gk[0] ** 2 + gk[1] ** 2)
    wts = _node_weights(d.grid)[rows, cols]
    vol_term = float(np.sum(wts * ball * chi * integ)) / r**2

    nsamp = max(64, int(4.0 * math.pi * r / h))
    theta = (np.arange(nsamp) + 0.5) * (2.0 * math.pi / nsamp)
    ring_pts = np.column_stack(
        [x[0] + r * np.cos(theta), x[1] + r * np.sin(theta)]
    )
    ring_vals = np.zeros(nsamp)
    for k in range(len(xis)):
        ring_vals += xis[k] * bilinear(d.grid, sp.modes[k], ring_pts) ** 2
    ring_term = (2.0 * math.pi * r / nsamp) * float(ring_vals.sum()) / r**3
    return vol_term - ring_term


def weiss_profile(
    d: GridDomain,
    sp: Spectrum,
    w: WeightVector,
    x: tuple[float, float],
    radii,
) -> WeissProbe:
    """W(x, r) over ascending radii with the fitted drift constant."""
    radii = tuple(float(r) for r in radii)
    if any(b <= a for a, b in zip(radii, radii[1:])):
        raise ValueError(f"radii must be strictly ascending, got {radii}")
    values = tuple(weiss_energy(d, sp, w, x, r) for r in radii)
    c_hat = 0.0
    for (ra, wa), (rb, wb) in zip(zip(radii, values), zip(radii[1:], values[1:])):
        c_hat = max(c_hat, (wa - wb) / (rb - ra))
    return WeissProbe(center=(float(x[0]), float(x[1])), radii=radii,
                      values=values, c_hat=c_hat)


def write_weiss_csv(probes, path) -> None:
    """Plot-ready rows, one per (center, radius) sample: x,y,r,W."""
    with open(path, "w") as f:
        f.write("x,y,r,W\n")
        for probe in probes:
            for r, val in zip(probe.radii, probe.values):
                f.write(f"{repr(probe.center[0])},{repr(probe.center[1])},"
                        f"{repr(r)},{repr(val)}\n")


# ---------------------------------------------------------------------------
# Euler-Lagrange residual
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True, eq=False)
class ELResidual:
    """Signed optimality defect sum_k xi_k (u_k)_nu^2 - xi0 per boundary point.

    Only points whose normal-derivative stencils were reliable are kept.
    """

    points: np.ndarray
    values: np.ndarray

    @property
    def median(self) -> float:
        """Signed median (negative means the boundary wants to shrink)."""
        return float(np.median(self.values))

    @property
    def median_abs(self) -> float:
        return float(np.median(np.abs(self.values)))

    @property
    def p90_abs(self) -> float:
        return float(np.percentile(np.abs(self.values), 90))


def el_residual(
    d: GridDomain,
    sp: Spectrum,
    w: WeightVector,
    bm: BoundaryMesh,
) -> ELResidual:
    """First-order optimality residual over the boundary samples.

    Uses cluster-averaged weights so near-degenerate modes contribute
    through their invariant subspace; the squares make the result blind to
    eigenfunction sign choices. Raises if every sample is unreliable.
    """
    xis = w.symmetrized()
    vals = -w.xi0_at(bm.points)
    reliable = np.ones(len(bm), dtype=bool)
    for k in range(len(xis)):
        nd = normal_derivative(sp.modes[k], bm, d)
        vals = vals + xis[k] * nd.values**2
        reliable &= nd.reliable
    if not reliable.any():
        raise ValueError("no reliable boundary samples for the residual")
    return ELResidual(points=bm.points[reliable], values=vals[reliable])


# ---------------------------------------------------------------------------
# density-based boundary classification
# ---------------------------------------------------------------------------

class BoundaryClass(enum.Enum):
    REDUCED = "REDUCED"
    SINGULAR_CANDIDATE = "SINGULAR_CANDIDATE"
    CUSP_CANDIDATE = "CUSP_CANDIDATE"


@dataclasses.dataclass(frozen=True)
class BoundaryLabel:
    """Per-point classification with its density evidence.

    ``density`` is taken at the smallest probe radius; ``trend`` is that
    value minus the density at the largest radius (positive: the occupied
    fraction grows as the probe shrinks).
    """

    label: BoundaryClass
    density: float
    trend: float


def classify_boundary(d: GridDomain, bm: BoundaryMesh, radii) -> list[BoundaryLabel]:
    """Label each boundary sample by its occupied-volume fraction profile.

    Density ~ 1/2, stable across radii: flat boundary (REDUCED). Density
    near 1 and growing as r shrinks: cusp-like pocket (CUSP_CANDIDATE).
    Anything else - corners, slits, thin necks - lands in
    SINGULAR_CANDIDATE. Thresholds are declared heuristics at grid scale,
    not limits.
    """
    radii = tuple(float(r) for r in radii)
    h = d.grid.h
    if any(b <= a for a, b in zip(radii, radii[1:])):
        raise ValueError(f"radii must be strictly ascending, got {radii}")
    if radii[0] < 4.0 * h - 1e-12:
        raise ValueError(f"smallest radius {radii[0]} below resolvable 4h = {4 * h}")
    labels = []
    for pt in bm.points:
        rho = np.array([density_ratio(d, pt, r) for r in radii])
        rho0 = float(rho[0])
        trend = rho0 - float(rho[-1])
        if 0.35 <= rho0 <= 0.65 and float(rho.max() - rho.min()) <= 0.15:
            cls = BoundaryClass.REDUCED
        elif rho0 >= 0.9 and trend >= -0.02:
            cls = BoundaryClass.CUSP_CANDIDATE
        else:
            cls = BoundaryClass.SINGULAR_CANDIDATE
        labels.append(BoundaryLabel(label=cls, density=rho0, trend=trend))
    return labels


# ---------------------------------------------------------------------------
# torsion nondegeneracy probe
# ---------------------------------------------------------------------------

class ProbeFlag(enum.Enum):
    OK = "OK"
    VIOLATION = "VIOLATION"


def _ball_mean(d: GridDomain, field: np.ndarray, x, r: float):
    """Mollified mean and max of |field| over B_r(x)."""
    rows, cols = _ball_window(d, x, r)
    X, Y = d.grid.meshgrid()
    dist = np.hypot(X[rows, cols] - x[0], Y[rows, cols] - x[1])
    wts = inside_fraction(dist - r, d.grid.h)
    total = float(wts.sum())
    if total <= 0.0:
        return 0.0, 0.0
    f = field[rows, cols]
    return float((wts * f).sum() / total), float(np.abs(f[wts > 0]).max())


def torsion_probe(
    d: GridDomain,
    tf: TorsionField,
    x: tuple[float, float],
    r: float,
    c0: float = 0.06,
    vtol: float = 1e-8,
) -> ProbeFlag:
    """Mean-value nondegeneracy check on the torsion function.

    If the mean of v over B_r(x) falls below c0*r, v must vanish on the
    quarter ball B_{r/4}(x); a nonzero v there is flagged VIOLATION. c0 is
    calibrated so every probe on the optimal single ball passes. Points
    with v = 0 on both balls pass vacuously. Requires r >= 4h.
    """
    h = d.grid.h
    if r < 4.0 * h - 1e-12:
        raise ValueError(f"probe radius {r} below resolvable 4h = {4 * h}")
    mean_r, _ = _ball_mean(d, tf.v, x, r)
    if mean_r > c0 * r:
        return ProbeFlag.OK
    _, inner_max = _ball_mean(d, tf.v, x, max(r / 4.0, 1.5 * h))
    return ProbeFlag.VIOLATION if inner_max > vtol else ProbeFlag.OK


# ---------------------------------------------------------------------------
# scaling quotients and cluster structure
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True, eq=False)
class ScalingReport:
    """Difference quotients of F along the all-ones direction.

    forward[j] = [F(lam + s_j) - F(lam)] / s_j, backward[j] the same from
    below. Strict growth shows as min_forward > 0; Lipschitz control as a
    finite max_backward. Coordinate and softmin families give exactly 1.
    """

    s_values: np.ndarray
    forward: np.ndarray
    backward: np.ndarray

    @property
    def min_forward(self) -> float:
        return float(self.forward.min())

    @property
    def max_backward(self) -> float:
        return float(self.backward.max())


def scaling_check(spec: ObjectiveSpec, sp: Spectrum, s_values=None) -> ScalingReport:
    """Probe monotonicity and Lipschitz quotients of F at sp's eigenvalues."""
    lam = np.asarray(sp.lambdas[: spec.n], dtype=float)
    if s_values is None:
        s_values = float(lam.min()) * 0.5 ** np.arange(2, 7)
    s_values = np.asarray(s_values, dtype=float)
    if np.any(s_values >= lam.min()):
        raise ValueError("shift s must stay below min(lambda) to keep lambda - s positive")
    F0 = eval_F(spec, lam)
    fwd = np.array([(eval_F(spec, lam + s) - F0) / s for s in s_values])
    bwd = np.array([(eval_F(spec, lam - s) - F0) / (-s) for s in s_values])
    return ScalingReport(s_values=s_values, forward=fwd, backward=bwd)


@dataclasses.dataclass(frozen=True, eq=False)
class SimplicityReport:
    """Relative gaps between consecutive eigenvalues and the cluster split."""

    rel_gaps: tuple[float, ...]
    clusters: tuple[tuple[int, ...], ...]

    @property
    def min_gap(self) -> float:
        return min(self.rel_gaps) if self.rel_gaps else math.inf


def simplicity_report(sp: Spectrum, tol: float = 1e-3) -> SimplicityReport:
    lam = sp.lambdas
    gaps = tuple(
        float((lam[k + 1] - lam[k]) / max(abs(lam[k]), 1e-300))
        for k in range(len(lam) - 1)
    )
    clusters = tuple(tuple(c) for c in sp.clusters(tol))
    return SimplicityReport(rel_gaps=gaps, clusters=clusters)
