"""Objective families and their p-regularization, plus the anchoring penalty.

The optimizer never works with F(kappa) directly. It minimizes the smoothed
functional

    F_p(kappa) = G_p(tau_1, ..., tau_N) + (1/p) sum_k (N+1-k) kappa_k,

where tau_k = (sum_{l<=k} kappa_l^p)^(1/p) and G_p averages F over the cell
[0, 1/p]^N. F_p is smooth, strictly increasing in every argument, and
collapses to F as p -> infinity; its partial derivatives xi_k weight the
eigenfunctions in the boundary velocity. The penalty E(Omega) anchors a
domain to a reference via capped distance integrals and a volume mismatch
term chi.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from typing import Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import ndimage

from .domain import GridDomain, bilinear, inside_fraction, volume

__all__ = [
    "ObjectiveSpec",
    "RegularizationParams",
    "PenaltySpec",
    "WeightVector",
    "eval_F",
    "tau_kp",
    "eval_Gp",
    "eval_Fp",
    "grad_Fp",
    "eval_penalty_E",
    "xi0_field",
    "kappa_clusters",
]

_FAMILIES = ("single", "linear", "softmin")


@dataclasses.dataclass(frozen=True)
class ObjectiveSpec:
    """One of the supported F families on kappa = (kappa_1, ..., kappa_n).

    single:  F = kappa_index (coordinate projection, default index = n)
    linear:  F = sum_k coeffs[k] * kappa_k, coeffs >= 0, one strictly positive
    softmin: F = -(1/beta) log mean_{k in subset} exp(-beta kappa_k)

    Every family is continuous, nondecreasing in each argument, diverges
    along the diagonal, and is locally Lipschitz — the admissibility
    conditions the flags report.
    """

    family: str
    n: int
    index: int | None = None
    coeffs: tuple[float, ...] | None = None
    subset: tuple[int, ...] | None = None
    beta: float = 1.0

    def __post_init__(self) -> None:
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown family {self.family!r}, expected one of {_FAMILIES}")
        if not 1 <= self.n <= 4:
            raise ValueError(f"n must be in 1..4 (tensor quadrature cap), got {self.n}")
        if self.family == "single":
            idx = self.n if self.index is None else int(self.index)
            if not 1 <= idx <= self.n:
                raise ValueError(f"single index {idx} out of range 1..{self.n}")
            object.__setattr__(self, "index", idx)
        elif self.family == "linear":
            if self.coeffs is None or len(self.coeffs) != self.n:
                raise ValueError(f"linear family needs {self.n} coefficients")
            c = tuple(float(v) for v in self.coeffs)
            if any(v < 0 for v in c) or not any(v > 0 for v in c):
                raise ValueError("linear coefficients must be >= 0 with at least one > 0")
            object.__setattr__(self, "coeffs", c)
        else:  # softmin
            sub = tuple(range(1, self.n + 1)) if self.subset is None else tuple(
                sorted(set(int(k) for k in self.subset))
            )
            if not sub or sub[0] < 1 or sub[-1] > self.n:
                raise ValueError(f"softmin subset {sub} out of range 1..{self.n}")
            if not self.beta > 0:
                raise ValueError(f"softmin beta must be positive, got {self.beta}")
            object.__setattr__(self, "subset", sub)

    @property
    def assumptions(self) -> dict[str, bool]:
        """Admissibility flags, all true by construction for these families."""
        return {
            "continuous": True,
            "nondecreasing": True,
            "diverges_along_diagonal": True,
            "locally_lipschitz": True,
        }

    # ---- evaluation --------------------------------------------------
    def values(self, K: np.ndarray) -> np.ndarray:
        """F at a batch of points, shape (m, n) -> (m,)."""
        K = np.atleast_2d(np.asarray(K, dtype=float))
        if K.shape[1] != self.n:
            raise ValueError(f"kappa has {K.shape[1]} entries, spec expects {self.n}")
        if self.family == "single":
            return K[:, self.index - 1].copy()
        if self.family == "linear":
            return K @ np.asarray(self.coeffs)
        sub = np.asarray(self.subset) - 1
        Ks = K[:, sub]
        m = Ks.min(axis=1, keepdims=True)
        return (m[:, 0]
                - np.log(np.mean(np.exp(-self.beta * (Ks - m)), axis=1)) / self.beta)

    def grads(self, K: np.ndarray) -> np.ndarray:
        """dF/dkappa at a batch of points, shape (m, n) -> (m, n)."""
        K = np.atleast_2d(np.asarray(K, dtype=float))
        m = K.shape[0]
        if self.family == "single":
            g = np.zeros((m, self.n))
            g[:, self.index - 1] = 1.0
            return g
        if self.family == "linear":
            return np.tile(np.asarray(self.coeffs), (m, 1))
        sub = np.asarray(self.subset) - 1
        Ks = K[:, sub]
        mn = Ks.min(axis=1, keepdims=True)
        w = np.exp(-self.beta * (Ks - mn))
        w /= w.sum(axis=1, keepdims=True)
        g = np.zeros((m, self.n))
        g[:, sub] = w
        return g


def eval_F(spec: ObjectiveSpec, kappa: Sequence[float]) -> float:
    """F(kappa); kappa must be strictly positive."""
    kappa = np.asarray(kappa, dtype=float)
    if np.any(kappa <= 0):
        raise ValueError(f"kappa must be strictly positive, got {kappa}")
    return float(spec.values(kappa[None, :])[0])


@dataclasses.dataclass(frozen=True)
class RegularizationParams:
    """Smoothing exponent p and the Gauss node count for the cell average."""

    p: float = 32.0
    quad_nodes: int = 4

    def __post_init__(self) -> None:
        if not (math.isfinite(self.p) and self.p >= 2):
            raise ValueError(f"p must be finite and >= 2, got {self.p}")
        if self.quad_nodes < 2:
            raise ValueError(f"need at least 2 quadrature nodes, got {self.quad_nodes}")


@dataclasses.dataclass(frozen=True, eq=False)
class PenaltySpec:
    """Anchoring penalty E(Omega) toward a reference domain.

    E = s * int_Omega min(dist(x, ref), 1)
      + s * int_{box \\ Omega} min(dist(x, ref^c), 1)
      + chi(|ref| - |Omega|),       chi(t) = (sqrt(1+t^2) - 1) / 2.

    chi vanishes to second order at 0 and has |chi'| <= 1/2, so the volume
    term never dominates. With s = 0 and matched volumes, E = 0.
    """

    s: float = 0.02
    reference: GridDomain | None = None

    def __post_init__(self) -> None:
        if self.s < 0:
            raise ValueError(f"penalty strength must be >= 0, got {self.s}")

    @staticmethod
    def chi(t: float) -> float:
        return 0.5 * (math.hypot(1.0, t) - 1.0)

    @staticmethod
    def chi_prime(t: float) -> float:
        return 0.5 * t / math.hypot(1.0, t)

    @functools.cached_property
    def _fields(self):
        """Capped distance-to-reference and distance-to-complement fields,
        plus the reference volume (lazily computed, reference grid nodes)."""
        if self.reference is None:
            raise ValueError("penalty has no reference domain")
        ref = self.reference
        h = ref.grid.h
        ins = ref.inside
        dist_to_ref = ndimage.distance_transform_edt(~ins, sampling=h)
        dist_to_comp = ndimage.distance_transform_edt(ins, sampling=h)
        return (
            np.minimum(dist_to_ref, 1.0),
            np.minimum(dist_to_comp, 1.0),
            volume(ref),
        )


def tau_kp(kappa: Sequence[float], k: int, p: float) -> float:
    """The running p-norm tau_k = (sum_{l<=k} kappa_l^p)^(1/p).

    Computed in log-sum-exp form so large p never overflows.
    """
    kappa = np.asarray(kappa, dtype=float)
    if not 1 <= k <= len(kappa):
        raise ValueError(f"k={k} out of range 1..{len(kappa)}")
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if np.any(kappa[:k] <= 0):
        raise ValueError("kappa entries must be strictly positive")
    return float(_tau_all(kappa[:k], p)[-1])


def _tau_all(kappa: np.ndarray, p: float) -> np.ndarray:
    """All running p-norms tau_1..tau_N, via log-sum-exp."""
    logk = np.log(kappa)
    taus = np.empty(len(kappa))
    for k in range(len(kappa)):
        m = logk[: k + 1].max()
        taus[k] = math.exp(m + math.log(np.sum(np.exp(p * (logk[: k + 1] - m)))) / p)
    return taus


@functools.lru_cache(maxsize=32)
def _cell_rule(quad_nodes: int, ndim: int):
    """Tensor Gauss-Legendre rule on the unit cell [0,1]^ndim.

    Returns (offsets, weights): offsets (q^ndim, ndim) in [0,1], weights
    summing to 1, so a cell average is weights @ f(offsets).
    """
    x, w = leggauss(quad_nodes)
    x01 = 0.5 * (x + 1.0)
    w01 = 0.5 * w
    grids = np.meshgrid(*([x01] * ndim), indexing="ij")
    offsets = np.column_stack([g.ravel() for g in grids])
    wgrids = np.meshgrid(*([w01] * ndim), indexing="ij")
    weights = np.prod(np.column_stack([g.ravel() for g in wgrids]), axis=1)
    return offsets, weights


def eval_Gp(spec: ObjectiveSpec, kappa: Sequence[float], p: float, quad_nodes: int = 4) -> float:
    """Average of F over the cell kappa + [0, 1/p]^N (tensor Gauss rule).

    Exact for the linear and single families; spectrally accurate for
    softmin.
    """
    kappa = np.asarray(kappa, dtype=float)
    offsets, weights = _cell_rule(quad_nodes, spec.n)
    return float(weights @ spec.values(kappa[None, :] + offsets / p))


def _grad_Gp(spec: ObjectiveSpec, kappa: np.ndarray, p: float, quad_nodes: int) -> np.ndarray:
    offsets, weights = _cell_rule(quad_nodes, spec.n)
    return weights @ spec.grads(kappa[None, :] + offsets / p)


def eval_Fp(spec: ObjectiveSpec, kappa: Sequence[float], p: float, quad_nodes: int = 4) -> float:
    """The regularized objective F_p(kappa) (see module docstring).

    Always >= F(kappa), with gap O(1/p).
    """
    kappa = np.asarray(kappa, dtype=float)
    if np.any(kappa <= 0):
        raise ValueError(f"kappa must be strictly positive, got {kappa}")
    taus = _tau_all(kappa, p)
    n = spec.n
    pert = float(np.arange(n, 0, -1) @ kappa) / p
    return eval_Gp(spec, taus, p, quad_nodes) + pert


def kappa_clusters(kappa: Sequence[float], tol: float = 1e-3) -> tuple[tuple[int, ...], ...]:
    """Partition of 0-based indices into near-degenerate consecutive groups."""
    kappa = np.asarray(kappa, dtype=float)
    groups: list[list[int]] = [[0]]
    for k in range(1, len(kappa)):
        gap = (kappa[k] - kappa[k - 1]) / max(abs(kappa[k - 1]), 1e-300)
        if gap < tol:
            groups[-1].append(k)
        else:
            groups.append([k])
    return tuple(tuple(g) for g in groups)


@dataclasses.dataclass(frozen=True, eq=False)
class WeightVector:
    """The gradient xi_k = dF_p/dkappa_k plus the boundary weight field xi0.

    ``xi`` holds the raw derivatives; :meth:`symmetrized` averages them
    within each near-degenerate cluster (preserving cluster sums), which is
    what rotation-invariant velocities of degenerate modes require.
    """

    xi: np.ndarray
    cluster_tags: tuple[tuple[int, ...], ...]
    pen: PenaltySpec
    current_volume: float | None = None

    def xi0_at(self, points: np.ndarray) -> np.ndarray:
        return xi0_field(points, self.pen, self.current_volume)

    def symmetrized(self) -> np.ndarray:
        out = self.xi.copy()
        for tag in self.cluster_tags:
            if len(tag) > 1:
                out[list(tag)] = self.xi[list(tag)].mean()
        return out

    @property
    def sum(self) -> float:
        return float(self.xi.sum())


def grad_Fp(
    spec: ObjectiveSpec,
    kappa: Sequence[float],
    p: float,
    quad_nodes: int = 4,
    pen: PenaltySpec | None = None,
    current_volume: float | None = None,
    cluster_tol: float = 1e-3,
) -> WeightVector:
    """Exact gradient of :func:`eval_Fp` at kappa.

        xi_k = (N+1-k)/p + sum_{j>=k} (kappa_k / tau_j)^(p-1) * dG_p/dkappa_j

    with dG_p evaluated at (tau_1, ..., tau_N) under the same quadrature as
    eval_Fp, so finite differences of eval_Fp reproduce xi to roundoff. The
    power ratios are computed as exp((p-1)(log kappa_k - log tau_j)), which
    stays in (0, 1]. All xi_k are strictly positive (the (N+1-k)/p floor).
    """
    kappa = np.asarray(kappa, dtype=float)
    if np.any(kappa <= 0):
        raise ValueError(f"kappa must be strictly positive, got {kappa}")
    n = spec.n
    taus = _tau_all(kappa, p)
    gG = _grad_Gp(spec, taus, p, quad_nodes)
    logk = np.log(kappa)
    logt = np.log(taus)
    xi = np.empty(n)
    for k in range(n):
        ratios = np.exp((p - 1.0) * (logk[k] - logt[k:]))
        xi[k] = (n - k) / p + float(ratios @ gG[k:])
    return WeightVector(
        xi=xi,
        cluster_tags=kappa_clusters(kappa, cluster_tol),
        pen=pen if pen is not None else PenaltySpec(s=0.0),
        current_volume=current_volume,
    )


def eval_penalty_E(d: GridDomain, pen: PenaltySpec) -> float:
    """The anchoring penalty E(Omega) of the domain against pen.reference.

    Vanishes (to quadrature accuracy) at Omega = reference, and is zero by
    convention while no reference is anchored. Complement integration is
    truncated to the grid box.
    """
    if pen.s == 0.0 or pen.reference is None:
        return 0.0
    dist_ref, dist_comp, vol_ref = pen._fields
    if d.grid != pen.reference.grid:
        raise ValueError("domain and penalty reference live on different grids")
    h = d.grid.h
    chi_om = inside_fraction(d.phi, 1.5 * h)
    tx = np.ones(d.grid.nx)
    tx[0] = tx[-1] = 0.5
    ty = np.ones(d.grid.ny)
    ty[0] = ty[-1] = 0.5
    w = h * h * np.outer(ty, tx)
    vol_d = float(np.sum(w * chi_om))
    term_in = float(np.sum(w * chi_om * dist_ref))
    term_out = float(np.sum(w * (1.0 - chi_om) * dist_comp))
    return pen.s * (term_in + term_out) + PenaltySpec.chi(vol_ref - vol_d)


def xi0_field(
    points: np.ndarray,
    pen: PenaltySpec,
    current_volume: float | None = None,
) -> np.ndarray:
    """The boundary weight xi0 at arbitrary points.

    xi0(x) = 1 + s min(dist(x, ref), 1) - s min(dist(x, ref^c), 1)
           + s chi'(|ref| - |Omega_current|).

    Identically 1 when s = 0 or when no reference domain is anchored yet.
    The chi' term needs the current domain's volume; when unknown it is
    dropped (exact whenever the volumes match, and bounded by s/2 otherwise).
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if pen.s == 0.0 or pen.reference is None:
        return np.ones(points.shape[0])
    dist_ref, dist_comp, vol_ref = pen._fields
    grid = pen.reference.grid
    vals = (
        1.0
        + pen.s * bilinear(grid, dist_ref, points)
        - pen.s * bilinear(grid, dist_comp, points)
    )
    if current_volume is not None:
        vals = vals + pen.s * PenaltySpec.chi_prime(vol_ref - current_volume)
    return vals
