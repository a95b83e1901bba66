import json
import math

import numpy as np
import pytest

from stochwave import Box, CoefficientSpec, Control, CovarianceSpec, Grid, InitialData, SolverConfig, solve
from stochwave.kernel import propagator
from stochwave.ldp import gaussian_rate_oracle
from stochwave.noise import density_table
from stochwave.rate import EventSpec, RateOptions, minimize_rate, mode_mask, rate_functional, skeleton_solve
from stochwave.regularity import Region, holder_norm
from stochwave.solver import Trajectory, homogeneous_trajectory

from conftest import single_mode


def small_config(sigma="constant:1", b="constant:0", N=8, J=16):
    g = Grid(8.0, N)
    init = InitialData.zeros(g)
    return SolverConfig(g, 1.0, J, init, CovarianceSpec(1.0), CoefficientSpec.parse(sigma, b))


def test_event_validation(grid16):
    with pytest.raises(ValueError):
        EventSpec("point_exceed", -1.0, site=(0, 0, 0))
    with pytest.raises(ValueError):
        EventSpec("sup_exceed", 1.0)
    with pytest.raises(ValueError):
        EventSpec("linear_exceed", 1.0, g=np.full(grid16.shape, np.nan))
    with pytest.raises(ValueError):
        EventSpec("tail_exceed", 1.0)


def test_skeleton_zero_control_is_w(additive16):
    traj = skeleton_solve(additive16, Control.zeros(additive16.grid, additive16.spec, additive16.dt, additive16.J))
    assert np.array_equal(traj.snapshots, homogeneous_trajectory(additive16))


def test_skeleton_single_mode_linear_response(additive16):
    cfg = additive16
    g = cfg.grid
    c = 0.7 - 0.2j
    idx = (1, 2, 3)  # (z, y, x) lattice index of xi*
    neg = tuple((-i) % g.N for i in idx)
    coeffs = np.zeros((cfg.J,) + g.shape, dtype=complex)
    coeffs[:, idx[0], idx[1], idx[2]] = c
    coeffs[:, neg[0], neg[1], neg[2]] = np.conj(c)
    h = Control(g, cfg.spec, cfg.dt, coeffs)
    v = skeleton_solve(cfg, h).snapshots[-1] - homogeneous_trajectory(cfg)[-1]
    xi = np.array([g.wavenumbers[i] for i in idx])  # (z, y, x)
    k = float(np.linalg.norm(xi))
    mu = density_table(cfg.spec, g)[idx]
    z, y, x = g.coords()
    mode = (2.0 / g.volume) * np.real(c * np.exp(1j * (xi[0] * z + xi[1] * y + xi[2] * x)))
    total = sum(cfg.dt * math.sin((cfg.T - j * cfg.dt) * k) / k for j in range(cfg.J))
    assert np.max(np.abs(v - total * mu * mode)) < 1e-10


def test_weak_null_oscillation(additive16):
    cfg = additive16
    g = cfg.grid
    profile = single_mode(g, 1, 1, 0)
    v0 = homogeneous_trajectory(cfg)
    sups = []
    for n in (4, 16, 64):
        amps = np.sin(n * cfg.times[:-1])
        h = Control.from_fields(g, cfg.spec, cfg.dt, amps[:, None, None, None] * profile)
        sups.append(float(np.max(np.abs(skeleton_solve(cfg, h).snapshots - v0))))
    assert sups[0] > sups[1] > sups[2]


def test_rate_functional_basics(additive16):
    cfg = additive16
    g = cfg.grid
    assert rate_functional(Control.zeros(g, cfg.spec, cfg.dt, cfg.J)) == 0.0
    h = Control.from_fields(g, cfg.spec, cfg.dt, np.random.default_rng(1).standard_normal((cfg.J,) + g.shape))
    assert rate_functional(h.scaled(2.0)) == pytest.approx(4 * rate_functional(h), rel=1e-12)


def test_rate_functional_reference_control():
    # h(t_j, x) = a_j cos(xi . x): coefficients V a_j / 2 at +-xi, so ||h||^2 = sum_j dt a_j^2 mu(xi) V / 2
    g = Grid(8.0, 16)
    spec = CovarianceSpec(1.3)
    J, dt = 5, 0.2
    a = np.array([0.3, -1.0, 2.0, 0.5, 1.5])
    h = Control.from_fields(g, spec, dt, a[:, None, None, None] * single_mode(g, 2, 1, 0))
    mu = density_table(spec, g)[0, 1, 2]
    expected = 0.5 * float(np.sum(dt * a**2) * mu * g.volume / 2)
    assert rate_functional(h) == pytest.approx(expected, rel=1e-12)


def test_mode_mask_counts(grid16):
    assert mode_mask(grid16, 8).all()
    assert mode_mask(grid16, 2).sum() == 5**3


def test_zero_threshold_gives_zero_rate(additive16):
    ev = EventSpec("point_exceed", 0.0, site=(8, 8, 8))
    rep = minimize_rate(ev, additive16, RateOptions(restarts=2))
    assert rep.I_hat == 0.0 and not np.any(rep.control.coeffs)


def test_point_event_matches_oracle_and_is_certified(additive16):
    ev = EventSpec("point_exceed", 0.8, site=(8, 8, 8))
    rep = minimize_rate(ev, additive16, RateOptions(restarts=3))
    oracle = gaussian_rate_oracle(ev, additive16)
    assert rep.status == "certified"
    assert rep.I_hat == pytest.approx(oracle, rel=0.01)
    rates = np.array(rep.restart_rates)
    assert np.max(np.abs(rates / rates[0] - 1)) < 1e-6
    replay = skeleton_solve(additive16, rep.control)
    assert ev.value(replay, homogeneous_trajectory(additive16)) >= 0.8 * (1 - 1e-6)
    json.loads(rep.dumps())


def test_linear_event_matches_oracle(additive16):
    g = additive16.grid
    r = g.distance_from((4.0, 4.0, 4.0))
    ev = EventSpec("linear_exceed", 0.5, g=np.exp(-(r**2) / 2))
    rep = minimize_rate(ev, additive16, RateOptions(restarts=2))
    assert rep.I_hat == pytest.approx(gaussian_rate_oracle(ev, additive16), rel=0.01)


def test_sup_event_cheapest_point():
    cfg = small_config()
    ev = EventSpec("sup_exceed", 0.5, region=Box.centered(cfg.grid, 1))
    rep = minimize_rate(ev, cfg, RateOptions(restarts=2))
    point = gaussian_rate_oracle(EventSpec("point_exceed", 0.5, site=(4, 4, 4)), cfg)
    assert rep.residual <= 0.5e-6
    # the sup event is the union of point events; zero data make every site and the final time cheapest
    assert rep.I_hat == pytest.approx(point, rel=0.01)


def test_monotone_in_threshold_nonlinear():
    cfg = small_config("affine:1.0,0.3", "constant:0")
    rates = []
    for r in (0.1, 0.2, 0.4, 0.6):
        rep = minimize_rate(EventSpec("point_exceed", r, site=(4, 4, 4)), cfg, RateOptions(restarts=1))
        assert rep.status == "local"
        rates.append(rep.I_hat)
    assert all(b >= a for a, b in zip(rates, rates[1:]))


def test_nonlinear_gradient_is_exact():
    from stochwave.rate import _SkeletonProblem

    cfg = small_config("bounded_smooth:1.5", "affine:0.1,0.4")
    ev = EventSpec("point_exceed", 1.0, site=(3, 4, 5))
    prob = _SkeletonProblem(ev, cfg, 8)
    z = prob.project(0.3 * np.random.default_rng(0).standard_normal((cfg.J,) + cfg.grid.shape))
    u = prob.forward(z)
    _, a = prob.smooth_value_and_direct(u, 0.0)
    grad = prob.adjoint(u, z, a)
    d = prob.project(np.random.default_rng(1).standard_normal(z.shape))
    eps = 1e-6
    fp = prob.exact_value(prob.forward(z + eps * d))
    fm = prob.exact_value(prob.forward(z - eps * d))
    assert np.sum(grad * d) == pytest.approx((fp - fm) / (2 * eps), rel=1e-6)


def test_norm_bound_respected_and_infeasible_flag():
    cfg = small_config()
    ev = EventSpec("point_exceed", 0.5, site=(4, 4, 4))
    free = minimize_rate(ev, cfg, RateOptions(restarts=1))
    loose = minimize_rate(ev, cfg, RateOptions(restarts=1, norm_bound=2 * free.control.norm))
    assert loose.feasible and loose.control.norm <= 2 * free.control.norm + 1e-9
    tight = minimize_rate(ev, cfg, RateOptions(restarts=1, norm_bound=0.5 * free.control.norm))
    assert tight.status == "infeasible"
    assert tight.control.norm <= 0.5 * free.control.norm + 1e-9
    assert tight.trace


def test_skeleton_map_uniformly_continuous():
    cfg = small_config("affine:1.0,0.3", "bounded_smooth:0.5")
    g = cfg.grid
    rs = np.random.default_rng(5)
    bound = 3.0
    controls = []
    for _ in range(32):
        h = Control.from_fields(g, cfg.spec, cfg.dt, rs.standard_normal((cfg.J,) + g.shape))
        controls.append(h.scaled(bound * rs.uniform(0.2, 1.0) / h.norm))
    outs = [skeleton_solve(cfg, h).snapshots for h in controls]
    region = Region(Box.centered(g, 1))
    d_in, d_out = [], []
    for i in range(32):
        for j in range(i + 1, 32):
            d_in.append(Control(g, cfg.spec, cfg.dt, controls[i].coeffs - controls[j].coeffs).norm)
            diff = Trajectory(cfg, cfg.times, outs[i] - outs[j])
            d_out.append(holder_norm(diff, 0.5, region))
    d_in, d_out = np.log(d_in), np.log(d_out)
    slope, icpt = np.polyfit(d_in, d_out, 1)
    assert slope > 0.5
    assert np.max(d_out - (icpt + slope * d_in)) < math.log(3.0)
