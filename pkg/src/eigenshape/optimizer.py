"""Level-set gradient flow minimizing F_p(lambda(Omega)) + |Omega| + E(Omega).

Each step: solve the spectrum, weight the squared eigenfunction normal
derivatives by xi = grad F_p, subtract the boundary cost xi0, extend that
normal speed off the interface, advect phi upwind, and backtrack until the
true objective decreases. Reinitialization keeps phi close to a signed
distance. A p-continuation driver chains runs over an ascending p schedule,
anchoring each stage's penalty to the previous minimizer.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy.spatial import cKDTree

from .domain import (
    BoundaryMesh,
    GridDomain,
    _one_sided_diffs,
    extract_boundary,
    reinitialize,
    volume,
)
from .objective import (
    ObjectiveSpec,
    PenaltySpec,
    RegularizationParams,
    WeightVector,
    eval_F,
    eval_Fp,
    eval_penalty_E,
    grad_Fp,
)
from .spectral import SpectralError, Spectrum, normal_derivative, solve_spectrum

__all__ = [
    "OptimizerConfig",
    "TraceRecord",
    "OptimizerTrace",
    "FlowState",
    "OptimizeAborted",
    "shape_velocity",
    "extend_velocity",
    "advect",
    "make_state",
    "step",
    "optimize",
    "p_continuation",
    "write_trace_csv",
]


class OptimizeAborted(RuntimeError):
    """Mid-run solver failure; carries the partial trace accumulated so far."""

    def __init__(self, message: str, trace: "OptimizerTrace"):
        super().__init__(message)
        self.trace = trace


@dataclasses.dataclass(frozen=True, eq=False)
class OptimizerConfig:
    spec: ObjectiveSpec
    reg: RegularizationParams = dataclasses.field(default_factory=RegularizationParams)
    pen: PenaltySpec = dataclasses.field(default_factory=lambda: PenaltySpec(s=0.0))
    dt0: float = 0.5
    max_steps: int = 200
    conv_tol: float = 1e-6
    reinit_every: int = 5
    seed: int = 0
    eig_tol: float = 1e-8
    modes: int | None = None          # eigenpairs tracked; default n + 1
    velocity_band: float = 6.0        # extension band, in units of h
    cfl: float = 0.9

    def __post_init__(self) -> None:
        if not self.dt0 > 0:
            raise ValueError(f"dt0 must be positive, got {self.dt0}")
        if not self.conv_tol > 0:
            raise ValueError(f"conv_tol must be positive, got {self.conv_tol}")
        if self.max_steps < 1 or self.reinit_every < 1:
            raise ValueError("max_steps and reinit_every must be >= 1")

    @property
    def n_modes(self) -> int:
        return self.spec.n + 1 if self.modes is None else self.modes


@dataclasses.dataclass(frozen=True)
class TraceRecord:
    step: int
    objective: float            # F_p + |Omega| + E, the quantity that descends
    volume: float
    lambdas: tuple[float, ...]  # first n eigenvalues
    sum_xi: float
    E: float
    dt: float


@dataclasses.dataclass(eq=False)
class OptimizerTrace:
    """Per-step records plus the final (domain, spectrum, weights) triple."""

    records: list[TraceRecord] = dataclasses.field(default_factory=list)
    domain: GridDomain | None = None
    spectrum: Spectrum | None = None
    weights: WeightVector | None = None
    converged: bool = False
    stalled: bool = False
    objective_F: float | None = None    # unregularized F(lambda) + |Omega| at the end


# ---------------------------------------------------------------------------
# velocity
# ---------------------------------------------------------------------------

def shape_velocity(
    d: GridDomain,
    sp: Spectrum,
    w: WeightVector,
    bm: BoundaryMesh,
) -> tuple[np.ndarray, np.ndarray]:
    """First-variation normal speed at the boundary samples.

    V(x) = sum_k xi_k (u_k)_nu^2 (x) - xi0(x), positive V expanding Omega.
    Near-degenerate modes enter with their cluster-averaged weights so the
    speed is invariant under basis rotations inside a cluster. Returns
    (V, reliable); unreliable samples inherit flags from the probe stencils.
    """
    if sp.generation != d.generation:
        raise ValueError(
            f"spectrum generation {sp.generation} does not match domain {d.generation}"
        )
    xis = w.symmetrized()
    V = -w.xi0_at(bm.points)
    reliable = np.ones(len(bm), dtype=bool)
    for k in range(len(xis)):
        nd = normal_derivative(sp.modes[k], bm, d)
        V = V + xis[k] * nd.values**2
        reliable &= nd.reliable
    return V, reliable


def extend_velocity(
    d: GridDomain,
    bm: BoundaryMesh,
    V: np.ndarray,
    reliable: np.ndarray,
    band_h: float = 6.0,
) -> np.ndarray:
    """Constant-along-normal extension of the boundary speed to grid nodes.

    Each node within ``band_h * h`` of the interface (phi as distance proxy)
    takes the speed of its nearest boundary sample; unreliable samples are
    first overwritten from their nearest reliable neighbor. Nodes outside
    the band get zero.
    """
    if not reliable.any():
        raise ValueError("no reliable boundary samples to extend")
    if not reliable.all():
        V = V.copy()
        tree_ok = cKDTree(bm.points[reliable])
        _, j = tree_ok.query(bm.points[~reliable])
        V[~reliable] = V[reliable][j]
    h = d.grid.h
    band = np.abs(d.phi) <= band_h * h
    out = np.zeros_like(d.phi)
    if band.any():
        X, Y = d.grid.meshgrid()
        pts = np.column_stack([X[band], Y[band]])
        _, j = cKDTree(bm.points).query(pts)
        out[band] = V[j]
    return out


def advect(phi: np.ndarray, V: np.ndarray, dt: float, h: float) -> np.ndarray:
    """One upwind (Godunov) step of phi_t + V |grad phi| = 0."""
    dxm, dxp, dym, dyp = _one_sided_diffs(phi, h)
    grad_plus = np.sqrt(
        np.maximum(dxm, 0.0) ** 2 + np.minimum(dxp, 0.0) ** 2
        + np.maximum(dym, 0.0) ** 2 + np.minimum(dyp, 0.0) ** 2
    )
    grad_minus = np.sqrt(
        np.minimum(dxm, 0.0) ** 2 + np.maximum(dxp, 0.0) ** 2
        + np.minimum(dym, 0.0) ** 2 + np.maximum(dyp, 0.0) ** 2
    )
    return phi - dt * (np.maximum(V, 0.0) * grad_plus + np.minimum(V, 0.0) * grad_minus)


# ---------------------------------------------------------------------------
# state and stepping
# ---------------------------------------------------------------------------

@dataclasses.dataclass(eq=False)
class FlowState:
    cfg: OptimizerConfig
    domain: GridDomain
    spectrum: Spectrum
    weights: WeightVector
    mesh: BoundaryMesh
    Fp: float
    vol: float
    E: float

    @property
    def objective(self) -> float:
        return self.Fp + self.vol + self.E

    @property
    def kappa(self) -> np.ndarray:
        return self.spectrum.lambdas[: self.cfg.spec.n]


def _evaluate(cfg: OptimizerConfig, d: GridDomain, warm: Spectrum | None):
    """Spectrum, weights and the objective pieces for a candidate domain."""
    sp = solve_spectrum(d, cfg.n_modes, tol=cfg.eig_tol, seed=cfg.seed, warm=warm)
    kappa = sp.lambdas[: cfg.spec.n]
    vol = volume(d)
    E = eval_penalty_E(d, cfg.pen)
    Fp = eval_Fp(cfg.spec, kappa, cfg.reg.p, cfg.reg.quad_nodes)
    w = grad_Fp(
        cfg.spec, kappa, cfg.reg.p, cfg.reg.quad_nodes,
        pen=cfg.pen, current_volume=vol,
    )
    return sp, w, Fp, vol, E


def make_state(cfg: OptimizerConfig, d: GridDomain, warm: Spectrum | None = None) -> FlowState:
    sp, w, Fp, vol, E = _evaluate(cfg, d, warm)
    return FlowState(cfg=cfg, domain=d, spectrum=sp, weights=w,
                     mesh=extract_boundary(d), Fp=Fp, vol=vol, E=E)


def step(state: FlowState, dt: float, baseline: float | None = None) -> tuple[FlowState, float, bool]:
    """One line-searched flow step from ``state``.

    Advects with the current velocity at step ``dt`` (CFL-capped), halving up
    to 8 times until the objective does not increase (beyond 1e-10). Returns
    (new_state, dt_used, stalled); on stall the input state is returned
    unchanged. ``baseline`` tightens the acceptance threshold below the
    current objective (used to keep the recorded trace nonincreasing across
    reinitializations, which perturb phi between accepted steps).
    """
    cfg = state.cfg
    d = state.domain
    h = d.grid.h
    V, reliable = shape_velocity(d, state.spectrum, state.weights, state.mesh)
    Vg = extend_velocity(d, state.mesh, V, reliable, band_h=cfg.velocity_band)
    vmax = float(np.max(np.abs(Vg)))
    if vmax < 1e-14:
        return state, 0.0, True
    dt_try = min(dt, cfg.cfl * h / vmax)
    J0 = state.objective if baseline is None else min(baseline, state.objective)
    last_err: SpectralError | None = None
    for _ in range(9):  # initial dt plus 8 halvings
        trial = d.with_phi(advect(d.phi, Vg, dt_try, h))
        if int(trial.inside.sum()) < cfg.n_modes + 5:
            dt_try *= 0.5
            continue
        try:
            sp, w, Fp, vol, E = _evaluate(cfg, trial, warm=state.spectrum)
        except SpectralError as err:
            last_err = err
            dt_try *= 0.5
            continue
        if Fp + vol + E <= J0 + 1e-10:
            new = FlowState(cfg=cfg, domain=trial, spectrum=sp, weights=w,
                            mesh=extract_boundary(trial), Fp=Fp, vol=vol, E=E)
            return new, dt_try, False
        dt_try *= 0.5
    if last_err is not None:
        raise last_err
    return state, 0.0, True


def optimize(cfg: OptimizerConfig, init: GridDomain) -> OptimizerTrace:
    """Run the flow from ``init`` until convergence, stall, or max_steps.

    Convergence: relative objective decrease below conv_tol on two
    consecutive accepted steps. A line-search stall also flags convergence
    (no descent direction at this resolution) with ``stalled`` recorded.
    Raises OptimizeAborted (carrying the partial trace) if the eigensolver
    fails irrecoverably mid-run.
    """
    if init.is_empty:
        raise ValueError("initial domain is empty: {phi < 0} has no nodes")
    trace = OptimizerTrace()
    d = reinitialize(init)
    try:
        state = make_state(cfg, d)
    except SpectralError as err:
        raise OptimizeAborted(f"initial spectrum failed: {err}", trace) from err

    def record(i: int, st: FlowState, dt: float) -> None:
        trace.records.append(TraceRecord(
            step=i,
            objective=st.objective,
            volume=st.vol,
            lambdas=tuple(float(v) for v in st.kappa),
            sum_xi=st.weights.sum,
            E=st.E,
            dt=dt,
        ))

    record(0, state, 0.0)
    dt = cfg.dt0
    small_steps = 0
    floor = state.objective  # last recorded value; trace never rises above it
    for i in range(1, cfg.max_steps + 1):
        if i > 1 and (i - 1) % cfg.reinit_every == 0:
            d_re = reinitialize(state.domain)
            try:
                state = make_state(cfg, d_re, warm=state.spectrum)
            except SpectralError as err:
                _finalize(trace, state)
                raise OptimizeAborted(f"spectrum failed after reinit: {err}", trace) from err
        J0 = floor
        try:
            state, dt_used, stalled = step(state, dt, baseline=floor)
        except SpectralError as err:
            _finalize(trace, state)
            raise OptimizeAborted(f"spectrum failed at step {i}: {err}", trace) from err
        if stalled:
            trace.stalled = True
            trace.converged = True
            break
        record(i, state, dt_used)
        floor = state.objective
        rel_dec = (J0 - state.objective) / max(abs(J0), 1e-300)
        if rel_dec < cfg.conv_tol:
            small_steps += 1
            if small_steps >= 2:
                trace.converged = True
                break
        else:
            small_steps = 0
        dt = min(cfg.dt0, 2.0 * dt_used)
    _finalize(trace, state)
    return trace


def _finalize(trace: OptimizerTrace, state: FlowState) -> None:
    trace.domain = state.domain
    trace.spectrum = state.spectrum
    trace.weights = state.weights
    trace.objective_F = eval_F(state.cfg.spec, state.kappa) + state.vol


def p_continuation(
    cfg: OptimizerConfig,
    init: GridDomain,
    schedule: list[float],
) -> list[OptimizerTrace]:
    """Chain optimize() over an ascending p schedule.

    Each stage warm-starts from the previous minimizer and anchors its
    penalty reference there (the first stage keeps cfg.pen as given). A
    failing stage truncates the returned list.
    """
    if any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError(f"p schedule must be strictly ascending, got {schedule}")
    traces: list[OptimizerTrace] = []
    d = init
    pen = cfg.pen
    for p in schedule:
        stage = dataclasses.replace(
            cfg,
            reg=dataclasses.replace(cfg.reg, p=float(p)),
            pen=pen,
        )
        try:
            tr = optimize(stage, d)
        except OptimizeAborted as err:
            traces.append(err.trace)
            break
        traces.append(tr)
        d = tr.domain
        pen = PenaltySpec(s=cfg.pen.s, reference=tr.domain)
    return traces


def write_trace_csv(trace: OptimizerTrace, path, n_lambdas: int) -> None:
    """Deterministic CSV: step,objective,volume,lambda1..lambdaN,E,dt."""
    cols = ["step", "objective", "volume"]
    cols += [f"lambda{k}" for k in range(1, n_lambdas + 1)]
    cols += ["E", "dt"]
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")
        for r in trace.records:
            vals = [str(r.step), repr(r.objective), repr(r.volume)]
            vals += [repr(v) for v in r.lambdas]
            vals += [repr(r.E), repr(r.dt)]
            f.write(",".join(vals) + "\n")
