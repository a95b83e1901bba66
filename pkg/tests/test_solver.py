import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from stochwave import (
    Coefficient,
    CoefficientSpec,
    Control,
    CovarianceSpec,
    Field,
    Grid,
    InitialData,
    SolverConfig,
    picard_solve,
    solve,
    step,
)
from stochwave.kernel import homogeneous_solution
from stochwave.noise import density_table, noise_increments
from stochwave.solver import (
    PicardDivergence,
    SolverError,
    additive_variance_field,
    homogeneous_trajectory,
    integrate,
)

from conftest import single_mode

ZERO = CoefficientSpec(Coefficient("constant", (0.0,)), Coefficient("constant", (0.0,)))


def variance_oracle(cfg):
    """sum_j dt (1/V) sum_k mu_k (sin((T - t_j)|xi_k|)/|xi_k|)^2, looped over steps."""
    g = cfg.grid
    mu = density_table(cfg.spec, g)
    k = g.kmag
    total = 0.0
    for j in range(cfg.J):
        tau = cfg.T - j * cfg.dt
        with np.errstate(invalid="ignore", divide="ignore"):
            m = np.where(k > 0, np.sin(tau * k) / np.where(k > 0, k, 1.0), tau)
        total += cfg.dt * float(np.sum(mu * m * m)) / g.volume
    return total


def random_init(g, seed=0, amp=0.3):
    rs = np.random.default_rng(seed)
    return InitialData(Field(g, amp * rs.standard_normal(g.shape)), Field(g, amp * rs.standard_normal(g.shape)))


# --- coefficients -------------------------------------------------------


@pytest.mark.parametrize("text", ["constant:2.5", "affine:0.5,-1.25", "bounded_smooth:3"])
def test_coefficient_parse_roundtrip(text):
    c = Coefficient.parse(text)
    assert Coefficient.parse(str(c)) == c


def test_coefficient_rejects_unknown():
    with pytest.raises(ValueError):
        Coefficient.parse("cubic:1")
    with pytest.raises(ValueError):
        Coefficient.parse("affine:1")


@given(
    kind=st.sampled_from(["constant:0.7", "affine:0.3,-2.0", "affine:1,0.5", "bounded_smooth:1.5"]),
    x=st.floats(-50, 50),
    y=st.floats(-50, 50),
)
def test_lipschitz_honoured(kind, x, y):
    c = Coefficient.parse(kind)
    fx, fy = c(np.array([x])), c(np.array([y]))
    assert abs(fx[0] - fy[0]) <= c.lipschitz * abs(x - y) * (1 + 1e-12) + 1e-12


@given(kind=st.sampled_from(["affine:0.3,-2.0", "bounded_smooth:1.5"]), x=st.floats(-5, 5))
def test_derivative_matches_difference(kind, x):
    c = Coefficient.parse(kind)
    h = 1e-6
    fd = (c(np.array([x + h]))[0] - c(np.array([x - h]))[0]) / (2 * h)
    assert c.derivative(np.array([x]))[0] == pytest.approx(fd, rel=1e-6, abs=1e-8)


# --- configuration and controls -------------------------------------------


def test_config_validation(grid16):
    init = InitialData.zeros(grid16)
    spec = CovarianceSpec(1.0)
    with pytest.raises(ValueError, match="L/4"):
        SolverConfig(grid16, 2.0, 8, init, spec)
    with pytest.raises(ValueError):
        SolverConfig(grid16, 1.0, 8, init, spec, epsilon=1.5)
    with pytest.raises(ValueError):
        SolverConfig(grid16, 1.0, 0, init, spec)
    with pytest.raises(ValueError):
        SolverConfig(Grid(8.0, 8), 1.0, 8, init, spec)


def test_control_norm_two_paths(grid16):
    g = grid16
    spec = CovarianceSpec(1.0)
    J, dt = 4, 0.25
    rs = np.random.default_rng(3)
    h = rs.standard_normal((J,) + g.shape)
    ctl = Control.from_fields(g, spec, dt, h)
    # direct lattice sum over modes and steps with explicit exponentials
    mu = density_table(spec, g)
    z, y, x = g.coords()
    total = 0.0
    for j in range(J):
        for idx in np.ndindex(*g.shape):
            kz, ky, kx = (g.wavenumbers[i] for i in idx)
            if idx[2] > 2 and idx[1] > 2:  # sampled subset keeps the loop short
                continue
            coeff = np.sum(h[j] * np.exp(-1j * (kx * x + ky * y + kz * z))) * g.cell_volume
            total += dt * mu[idx] * abs(coeff) ** 2 / g.volume
    partial = 0.0
    sel = np.zeros(g.shape, bool)
    for idx in np.ndindex(*g.shape):
        sel[idx] = not (idx[2] > 2 and idx[1] > 2)
    partial = dt * np.sum(np.abs(ctl.coeffs) ** 2 * (mu * sel)[None]) / g.volume
    assert partial == pytest.approx(total, rel=1e-12)
    assert ctl.norm_sq == pytest.approx(ctl.compute_norm_sq(), rel=1e-14)
    assert np.max(np.abs(ctl.fields() - h)) < 1e-12


def test_control_bound_enforced(grid16):
    spec = CovarianceSpec(1.0)
    h = np.ones((2,) + grid16.shape)
    ctl = Control.from_fields(grid16, spec, 0.5, h)
    Control.from_fields(grid16, spec, 0.5, h, bound=ctl.norm * 1.0001)
    with pytest.raises(ValueError):
        Control.from_fields(grid16, spec, 0.5, h, bound=ctl.norm * 0.999)


def test_control_scaling(grid16):
    ctl = Control.from_fields(grid16, CovarianceSpec(1.2), 0.1, np.random.default_rng(0).standard_normal((3,) + grid16.shape))
    assert ctl.scaled(2.0).norm_sq == pytest.approx(4 * ctl.norm_sq, rel=1e-12)


# --- step ----------------------------------------------------------------------


def test_step_without_forcing_is_propagator(grid16):
    g = grid16
    init = random_init(g)
    cfg = SolverConfig(g, 1.0, 8, init, CovarianceSpec(1.0), ZERO)
    u, v = step((init.v0, init.v0_tilde), 0.125, None, None, cfg)
    assert np.max(np.abs(u.values - homogeneous_solution(init, g, 0.125).values)) < 1e-12


def test_step_rejects_nonfinite(grid16):
    g = grid16
    cfg = SolverConfig(g, 1.0, 8, InitialData.zeros(g), CovarianceSpec(1.0))
    bad = np.zeros(g.shape)
    bad[0, 0, 0] = np.inf
    state = (Field.__new__(Field), Field(g, np.zeros(g.shape)))
    state[0].grid, state[0].values = g, bad
    with pytest.raises(SolverError, match="step"):
        step(state, 0.1, None, None, cfg)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_integrate_reports_step_of_blow_up(grid16):
    g = grid16
    init = InitialData(Field(g, np.full(g.shape, 1.0)), Field(g, np.zeros(g.shape)))
    cfg = SolverConfig(g, 1.0, 64, init, CovarianceSpec(1.0), CoefficientSpec.parse("constant:0", "affine:0,1e200"))
    with pytest.raises(SolverError, match="step"):
        solve(cfg)


def test_manual_steps_match_solve(grid16):
    g = grid16
    init = random_init(g, 5)
    cfg = SolverConfig(g, 1.0, 8, init, CovarianceSpec(1.0), CoefficientSpec.parse("affine:1,0.5", "bounded_smooth:0.3"), epsilon=0.5)
    noise = noise_increments(cfg.spec, g, cfg.J, cfg.dt, 11)
    ctl = Control.from_fields(g, cfg.spec, cfg.dt, 0.1 * np.random.default_rng(2).standard_normal((cfg.J,) + g.shape))
    traj = solve(cfg, ctl, noise)
    state = (init.v0, init.v0_tilde)
    for j in range(cfg.J):
        scaled = Field(g, noise[j].values)
        state = step(state, cfg.dt, scaled, ctl.coeffs[j], cfg)
        assert np.max(np.abs(state[0].values - traj.snapshots[j + 1])) < 1e-12


# --- solve -----------------------------------------------------------------


def test_skeleton_without_control_is_w(grid16):
    g = grid16
    init = random_init(g, 7)
    cfg = SolverConfig(g, 1.0, 16, init, CovarianceSpec(1.0), epsilon=0.0)
    traj = solve(cfg, None, 3)
    for j, t in enumerate(cfg.times):
        assert np.max(np.abs(traj.snapshots[j] - homogeneous_solution(init, g, t).values)) < 1e-12
    assert np.array_equal(traj.snapshots[0], init.v0.values)


def test_solve_is_deterministic(grid16):
    cfg = SolverConfig(grid16, 1.0, 16, random_init(grid16), CovarianceSpec(1.0), CoefficientSpec.parse("bounded_smooth:1"))
    a, b = solve(cfg, None, 99), solve(cfg, None, 99)
    assert np.array_equal(a.snapshots, b.snapshots)
    assert not np.array_equal(a.snapshots, solve(cfg, None, 100).snapshots)


def test_variance_field_matches_loop_oracle(additive16):
    assert additive_variance_field(additive16).sum() == pytest.approx(variance_oracle(additive16), rel=1e-12)


def test_pointwise_variance_monte_carlo(additive16):
    cfg = additive16
    M = 10_000
    vals = []
    for b0 in range(0, M, 500):
        u_hat, _ = integrate(cfg, None, 21, tuple(range(b0, b0 + 500)))
        vals.append(cfg.grid.irfft(u_hat)[:, 8, 8, 8])
    var = np.var(np.concatenate(vals))
    assert var == pytest.approx(variance_oracle(cfg), rel=0.05)


def test_refinement_in_time(grid16):
    base = SolverConfig(grid16, 1.0, 64, InitialData.zeros(grid16), CovarianceSpec(1.0))
    v64 = variance_oracle(base)
    v128 = variance_oracle(base.replace(J=128))
    assert abs(v128 / v64 - 1) < 0.02


def test_epsilon_scaling_of_variance(grid16):
    cfg = SolverConfig(grid16, 1.0, 16, InitialData.zeros(grid16), CovarianceSpec(1.0), CoefficientSpec.parse("constant:1.5"))
    var = {}
    for eps, seed in ((1.0, 1), (0.25, 2)):
        c = cfg.replace(epsilon=eps)
        vals = []
        for b0 in range(0, 10_000, 1000):
            u_hat, _ = integrate(c, None, seed, tuple(range(b0, b0 + 1000)))
            vals.append(grid16.irfft(u_hat)[:, 3, 4, 5])
        var[eps] = np.var(np.concatenate(vals))
    assert var[1.0] / var[0.25] == pytest.approx(4.0, rel=0.05)


@pytest.mark.parametrize("q", [2, 4, 8])
def test_moments_bounded_under_refinement(q):
    moments = []
    for N in (8, 16):
        g = Grid(8.0, N)
        cfg = SolverConfig(g, 1.0, 32, InitialData.zeros(g), CovarianceSpec(1.0), CoefficientSpec.parse("affine:1,0.3"))
        u_hat, _ = integrate(cfg, None, 4, tuple(range(200)))
        u = g.irfft(u_hat)
        moments.append(float(np.mean(np.abs(u) ** q)))
    assert all(np.isfinite(moments))
    assert 0.5 < moments[1] / moments[0] < 2.0


@pytest.mark.parametrize("lip", [0.5, 1.0, 2.0, 4.0])
def test_stable_for_growing_lipschitz(grid16, lip):
    cfg = SolverConfig(grid16, 1.0, 64, random_init(grid16), CovarianceSpec(1.0), CoefficientSpec.parse(f"affine:1,{lip}", f"bounded_smooth:{lip}"))
    assert np.all(np.isfinite(solve(cfg, None, 8).snapshots))


def test_trajectory_dump(tmp_path, grid16):
    cfg = SolverConfig(grid16, 1.0, 4, InitialData.zeros(grid16), CovarianceSpec(1.0))
    traj = solve(cfg, None, 5)
    d = traj.dump(tmp_path / "run", seed=5)
    manifest = json.loads((d / "manifest.json").read_text())
    assert manifest["seed"] == 5 and manifest["J"] == 4 and manifest["config_hash"] == cfg.fingerprint()
    assert np.array_equal(Field.load(d / manifest["files"][3]).values, traj.snapshots[3])


# --- Picard ---------------------------------------------------------------------


def test_picard_zero_coefficients_one_iteration(grid16):
    cfg = SolverConfig(grid16, 1.0, 8, random_init(grid16), CovarianceSpec(1.0), ZERO)
    noise = noise_increments(cfg.spec, grid16, cfg.J, cfg.dt, 1)
    traj, its, gaps = picard_solve(cfg, None, noise, tol=0.0)
    assert its == 1 and gaps == [0.0]
    assert np.max(np.abs(traj.snapshots - homogeneous_trajectory(cfg))) == 0.0


def test_picard_exact_after_causal_passes(grid16):
    cfg = SolverConfig(grid16, 1.0, 8, random_init(grid16, 3), CovarianceSpec(1.0), CoefficientSpec.parse("affine:1,0.8", "bounded_smooth:0.5"))
    noise = noise_increments(cfg.spec, grid16, cfg.J, cfg.dt, 2)
    traj, its, gaps = picard_solve(cfg, None, noise, tol=0.0)
    assert its <= cfg.J + 1 and gaps[-1] == 0.0
    assert np.max(np.abs(traj.snapshots - solve(cfg, None, noise).snapshots)) < 1e-12


def test_picard_budget_error_carries_gaps(grid16):
    cfg = SolverConfig(grid16, 1.0, 8, random_init(grid16, 3), CovarianceSpec(1.0), CoefficientSpec.parse("affine:1,0.8"))
    noise = noise_increments(cfg.spec, grid16, cfg.J, cfg.dt, 2)
    with pytest.raises(PicardDivergence) as info:
        picard_solve(cfg, None, noise, tol=0.0, max_iter=3)
    assert len(info.value.gaps) == 3
