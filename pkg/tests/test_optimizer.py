"""Velocity assembly, advection, line-searched stepping, and the outer flow.

Oracles: for a ball of radius R the ground-state boundary slope squared is
j01^2 / (pi R^4), so with unit weights the normal speed is positive for
R < (j01^2/pi)^(1/4), negative beyond it, and near zero at that radius —
where the flow from a ball should stop with F(lambda) + volume close to
2 * j01 * sqrt(pi).
"""

import math

import numpy as np
import pytest

import eigenshape.optimizer as optimizer_mod
from eigenshape import (
    Grid,
    ObjectiveSpec,
    OptimizeAborted,
    OptimizerConfig,
    PenaltySpec,
    RegularizationParams,
    SpectralError,
    WeightVector,
    dilate,
    disk,
    extract_boundary,
    half_plane,
    shape_velocity,
    solve_spectrum,
    step,
    volume,
)
from eigenshape.optimizer import (
    advect,
    extend_velocity,
    make_state,
    optimize,
    p_continuation,
    write_trace_csv,
)

J01 = 2.404825557695773
R_STAR = (J01**2 / math.pi) ** 0.25  # ball radius where the speed vanishes


def base_config(**kw):
    defaults = dict(
        spec=ObjectiveSpec("single", n=1),
        reg=RegularizationParams(p=32.0),
        dt0=0.5,
        max_steps=40,
        conv_tol=1e-6,
        seed=0,
    )
    defaults.update(kw)
    return OptimizerConfig(**defaults)


@pytest.fixture(scope="module")
def grid129():
    return Grid.from_box(-2.0, -2.0, 2.0, 2.0, 129, 129)


@pytest.fixture(scope="module")
def grid97():
    return Grid.from_box(-2.0, -2.0, 2.0, 2.0, 97, 97)


# ---- velocity ---------------------------------------------------------


def test_velocity_zero_weights_is_pure_shrink(grid129):
    d = disk(grid129, (0.0, 0.0), 1.0)
    sp = solve_spectrum(d, 2)
    w = WeightVector(xi=np.zeros(2), cluster_tags=((0,), (1,)), pen=PenaltySpec(s=0.0))
    bm = extract_boundary(d)
    V, reliable = shape_velocity(d, sp, w, bm)
    assert np.all(V == -1.0)
    assert reliable.any()


@pytest.mark.parametrize("radius,sign", [(1.6, -1.0), (0.8, +1.0)])
def test_velocity_sign_off_optimum(grid129, radius, sign):
    d = disk(grid129, (0.0, 0.0), radius)
    sp = solve_spectrum(d, 2)
    w = WeightVector(
        xi=np.array([1.0, 0.0]), cluster_tags=((0,), (1,)), pen=PenaltySpec(s=0.0)
    )
    bm = extract_boundary(d)
    V, reliable = shape_velocity(d, sp, w, bm)
    expected = J01**2 / (math.pi * radius**4) - 1.0
    assert np.all(sign * V[reliable] > 0.05)
    assert np.median(V[reliable]) == pytest.approx(expected, abs=0.08)


def test_velocity_vanishes_at_optimal_ball(grid129):
    d = disk(grid129, (0.0, 0.0), R_STAR)
    sp = solve_spectrum(d, 2)
    w = WeightVector(
        xi=np.array([1.0, 0.0]), cluster_tags=((0,), (1,)), pen=PenaltySpec(s=0.0)
    )
    V, reliable = shape_velocity(d, sp, w, extract_boundary(d))
    assert np.median(np.abs(V[reliable])) <= 0.1


def test_velocity_generation_mismatch(grid129):
    d = disk(grid129, (0.0, 0.0), 1.0)
    sp = solve_spectrum(d, 1)
    moved = dilate(d, 1.1)
    w = WeightVector(xi=np.ones(1), cluster_tags=((0,),), pen=PenaltySpec(s=0.0))
    with pytest.raises(ValueError, match="generation"):
        shape_velocity(moved, sp, w, extract_boundary(moved))


def test_extend_velocity_band(grid129):
    d = disk(grid129, (0.0, 0.0), 1.0)
    bm = extract_boundary(d)
    V = np.full(len(bm), 2.0)
    reliable = np.zeros(len(bm), dtype=bool)
    reliable[::2] = True  # odd samples must inherit from even neighbors
    field = extend_velocity(d, bm, V, reliable, band_h=6.0)
    h = d.grid.h
    band = np.abs(d.phi) <= 6.0 * h
    assert np.all(field[band] == 2.0)
    assert np.all(field[~band] == 0.0)
    with pytest.raises(ValueError, match="reliable"):
        extend_velocity(d, bm, V, np.zeros(len(bm), dtype=bool))


@pytest.mark.parametrize("speed", [1.0, -1.0])
def test_advect_uniform_speed_on_planar_front(grid129, speed):
    # upwind advection translates a planar distance function exactly
    d = half_plane(grid129, normal=(1.0, 2.0), offset=0.1)
    h = grid129.h
    dt = 0.7 * h
    V = np.full_like(d.phi, speed)
    moved = advect(d.phi, V, dt, h)
    mask = np.zeros_like(d.phi, dtype=bool)
    mask[2:-2, 2:-2] = True
    assert np.max(np.abs(moved[mask] - (d.phi[mask] - speed * dt))) < 1e-12


def test_advect_curved_front_first_order(grid129):
    # on a curved front the error is O(h): bounded well below the motion itself
    d = disk(grid129, (0.0, 0.0), 1.0)
    h = grid129.h
    dt = 0.7 * h
    moved = advect(d.phi, np.full_like(d.phi, -1.0), dt, h)
    X, Y = grid129.meshgrid()
    mask = np.zeros_like(d.phi, dtype=bool)
    mask[2:-2, 2:-2] = True
    mask &= np.hypot(X, Y) > 0.5  # stay away from the center kink
    err = np.abs(moved[mask] - (d.phi[mask] + dt))
    assert np.max(err) < 0.2 * dt


# ---- single step ------------------------------------------------------


def test_step_descends_from_oversized_ball(grid97):
    cfg = base_config()
    state = make_state(cfg, disk(grid97, (0.0, 0.0), 1.6))
    new, dt_used, stalled = step(state, cfg.dt0)
    assert not stalled
    assert 0.0 < dt_used <= cfg.dt0
    assert new.objective < state.objective - 1e-3
    assert new.vol < state.vol  # the oversized ball shrinks
    h = grid97.h
    assert dt_used <= cfg.cfl * h / 1e-14 + 1.0  # finite
    # CFL: the accepted step cannot outrun one cell per sweep
    assert dt_used * 1.0 <= cfg.dt0 + 1e-12


def test_step_stall_returns_input_state(grid97):
    cfg = base_config()
    state = make_state(cfg, disk(grid97, (0.0, 0.0), 1.6))
    # an absurdly low baseline forces every halving to fail
    out, dt_used, stalled = step(state, cfg.dt0, baseline=0.0)
    assert stalled
    assert dt_used == 0.0
    assert out is state


# ---- outer flow -------------------------------------------------------


def test_optimize_empty_init_raises(grid97):
    cfg = base_config()
    d = disk(grid97, (0.0, 0.0), 1.0)
    with pytest.raises(ValueError, match="empty"):
        optimize(cfg, d.with_phi(np.abs(d.phi) + d.grid.h))


def test_optimize_config_validation():
    with pytest.raises(ValueError, match="dt0"):
        base_config(dt0=0.0)
    with pytest.raises(ValueError, match="conv_tol"):
        base_config(conv_tol=0.0)
    with pytest.raises(ValueError, match="max_steps"):
        base_config(max_steps=0)
    assert base_config().n_modes == 2  # spec.n + 1
    assert base_config(modes=5).n_modes == 5


@pytest.fixture(scope="module")
def ball_flow(grid97):
    cfg = base_config(max_steps=60, conv_tol=1e-6, dt0=0.3)
    return cfg, optimize(cfg, disk(grid97, (0.0, 0.0), 1.45))


def test_optimize_reaches_ball_optimum(ball_flow):
    cfg, trace = ball_flow
    assert trace.converged
    target = 2.0 * J01 * math.sqrt(math.pi)
    assert trace.objective_F == pytest.approx(target, rel=0.02)
    assert trace.domain is not None and trace.spectrum is not None


def test_optimize_trace_is_monotone(ball_flow):
    _, trace = ball_flow
    objs = [r.objective for r in trace.records]
    assert len(objs) >= 3
    assert np.all(np.diff(objs) <= 1e-10)
    assert all(r.volume > 0 for r in trace.records)
    assert all(len(r.lambdas) == 1 and r.lambdas[0] > 0 for r in trace.records)
    assert trace.records[0].step == 0 and trace.records[0].dt == 0.0
    # weights on a single tracked eigenvalue: sum_xi = 1 + 1/p
    for r in trace.records:
        assert r.sum_xi == pytest.approx(1.0 + 1.0 / 32.0, abs=1e-12)
        assert r.E == 0.0


def test_optimize_is_deterministic(grid97):
    cfg = base_config(max_steps=6)
    init = disk(grid97, (0.3, -0.2), 1.3)
    a = optimize(cfg, init)
    b = optimize(cfg, init)
    assert [r.objective for r in a.records] == [r.objective for r in b.records]
    assert [r.lambdas for r in a.records] == [r.lambdas for r in b.records]
    assert np.array_equal(a.domain.phi, b.domain.phi)


def test_optimize_abort_carries_partial_trace(grid97, monkeypatch):
    cfg = base_config(max_steps=20)
    real_solve = optimizer_mod.solve_spectrum
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] > 4:
            raise SpectralError("synthetic failure", residuals=np.array([1.0]))
        return real_solve(*args, **kwargs)

    monkeypatch.setattr(optimizer_mod, "solve_spectrum", flaky)
    with pytest.raises(OptimizeAborted) as exc:
        optimize(cfg, disk(grid97, (0.0, 0.0), 1.5))
    partial = exc.value.trace
    assert len(partial.records) >= 1
    assert partial.domain is not None
    assert partial.objective_F is not None


def test_optimize_abort_at_init(grid97, monkeypatch):
    def broken(*args, **kwargs):
        raise SpectralError("no spectrum", residuals=None)

    monkeypatch.setattr(optimizer_mod, "solve_spectrum", broken)
    with pytest.raises(OptimizeAborted) as exc:
        optimize(base_config(), disk(grid97, (0.0, 0.0), 1.0))
    assert exc.value.trace.records == []


# ---- p-continuation ---------------------------------------------------


def test_p_continuation_schedule_validation(grid97):
    cfg = base_config()
    with pytest.raises(ValueError, match="ascending"):
        p_continuation(cfg, disk(grid97, (0.0, 0.0), 1.0), [8.0, 8.0])


def test_p_continuation_stages(grid97):
    cfg = base_config(max_steps=8, conv_tol=1e-5, pen=PenaltySpec(s=0.02))
    traces = p_continuation(cfg, disk(grid97, (0.0, 0.0), 1.4), [8.0, 32.0])
    assert len(traces) == 2
    # per-stage weights reflect that stage's p exactly (single eigenvalue)
    assert traces[0].weights.xi[0] == pytest.approx(1.0 + 1.0 / 8.0, abs=1e-12)
    assert traces[1].weights.xi[0] == pytest.approx(1.0 + 1.0 / 32.0, abs=1e-12)
    # the second stage is anchored at the first stage's minimizer
    assert traces[1].weights.pen.reference is traces[0].domain
    assert traces[0].weights.pen.reference is None
    # each stage starts from the previous minimizer, so stage objectives descend
    assert traces[1].objective_F <= traces[0].objective_F + 1e-6
    for tr in traces:
        objs = [r.objective for r in tr.records]
        assert np.all(np.diff(objs) <= 1e-10)


# ---- trace serialization ----------------------------------------------


def test_trace_csv_roundtrip(tmp_path, ball_flow):
    _, trace = ball_flow
    path = tmp_path / "trace.csv"
    write_trace_csv(trace, path, n_lambdas=1)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "step,objective,volume,lambda1,E,dt"
    assert len(lines) == 1 + len(trace.records)
    first = lines[1].split(",")
    assert int(first[0]) == 0
    assert float(first[1]) == trace.records[0].objective  # repr round-trips
    last = lines[-1].split(",")
    assert float(last[2]) == trace.records[-1].volume
