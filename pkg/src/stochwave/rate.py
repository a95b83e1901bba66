"""Skeleton equation, the quadratic rate functional, and its constrained minimisation.

The minimiser works in whitened control coordinates ``z`` (one real field per
time step) for which ``||h||^2_{H_T} = |z|^2``.  Gradients of the event
functional come from the discrete adjoint of the scheme, which is exact for
every smooth coefficient family.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.fft as sfft
from scipy import optimize

from . import rng
from .grid import Box, Grid
from .noise import density_table
from .solver import Control, SolverConfig, Trajectory, homogeneous_trajectory, integrate, solve

EVENT_KINDS = ("point_exceed", "sup_exceed", "linear_exceed")


@dataclass
class EventSpec:
    """Rare-event set ``{F(u - w) >= threshold}``.

    ``point_exceed``: ``F = (u - w)(T, site)`` with ``site`` an ``(ix, iy, iz)`` index;
    ``sup_exceed``: ``F = max |u - w|`` over ``region`` and all ``t_j``;
    ``linear_exceed``: ``F = dx^3 sum_x (u - w)(T, x) g(x)``.
    """

    kind: str
    threshold: float
    site: tuple[int, int, int] | None = None
    region: Box | None = None
    g: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")
        if self.threshold < 0:
            raise ValueError("threshold must be >= 0")
        if self.kind == "point_exceed" and self.site is None:
            raise ValueError("point_exceed needs a site")
        if self.kind == "sup_exceed" and self.region is None:
            raise ValueError("sup_exceed needs a region")
        if self.kind == "linear_exceed":
            if self.g is None or not np.all(np.isfinite(self.g)):
                raise ValueError("linear_exceed needs a finite test field g")
            self.g = np.asarray(self.g, dtype=float)

    @property
    def needs_path(self) -> bool:
        return self.kind == "sup_exceed"

    def with_threshold(self, r: float) -> "EventSpec":
        return EventSpec(self.kind, r, self.site, self.region, self.g)

    def final_value(self, d_T: np.ndarray, grid: Grid) -> np.ndarray:
        """Functional of ``(u - w)(T)``; batched over a leading axis."""
        if self.kind == "point_exceed":
            ix, iy, iz = self.site
            return d_T[..., iz, iy, ix]
        if self.kind == "linear_exceed":
            return grid.cell_volume * np.einsum("...zyx,zyx->...", d_T, self.g)
        raise ValueError("sup_exceed depends on the whole path")

    def path_value(self, d: np.ndarray) -> np.ndarray:
        """``max |u - w|`` over region and time for ``d`` of shape ``(..., J+1, N, N, N)``."""
        sl = (Ellipsis, slice(None)) + self.region.slices
        return np.abs(d[sl]).reshape(d.shape[:-4] + (-1,)).max(axis=-1)

    def value(self, traj: Trajectory, w: np.ndarray) -> float:
        d = traj.snapshots - w
        if self.needs_path:
            return float(self.path_value(d))
        return float(self.final_value(d[-1], traj.config.grid))

    def to_json(self) -> dict:
        out = {"kind": self.kind, "threshold": self.threshold}
        if self.site is not None:
            out["site"] = list(self.site)
        if self.region is not None:
            out["region"] = {"lo": list(self.region.lo), "hi": list(self.region.hi)}
        if self.g is not None:
            out["g_l2"] = float(np.sqrt(np.sum(self.g**2)))
        return out


def skeleton_solve(config: SolverConfig, h: Control) -> Trajectory:
    """``V^h``: the controlled equation with ``eps = 0``; no random stream is touched."""
    return solve(config.replace(epsilon=0.0), h, noise=None)


def rate_functional(h: Control) -> float:
    return 0.5 * h.norm_sq


@dataclass
class RateOptions:
    K: int = 8
    restarts: int = 4
    penalties: Sequence[float] = (1.0, 1e2, 1e4, 1e6, 1e8)
    kappas: Sequence[float] = (4.0, 16.0, 64.0, 256.0, 1024.0)
    max_iter: int = 300
    seed: int = 0
    norm_bound: float | None = None
    feasibility_tol: float = 1e-6
    start_scale: float = 0.1


@dataclass
class RateReport:
    event: EventSpec
    control: Control
    I_hat: float
    residual: float
    status: str
    trace: list = field(default_factory=list)
    K: int = 8
    restart_rates: list = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return self.status in ("certified", "local")

    def to_json(self) -> dict:
        return {
            "event": self.event.to_json(),
            "I_hat": self.I_hat,
            "residual": self.residual,
            "status": self.status,
            "K": self.K,
            "control_norm": self.control.norm,
            "restart_rates": self.restart_rates,
            "trace": self.trace,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def mode_mask(grid: Grid, K: int) -> np.ndarray:
    """Modes whose integer indices all satisfy ``|k_i| <= K``."""
    k = np.abs(grid.index_lattice)
    keep = k <= K
    return keep[:, None, None] & keep[None, :, None] & keep[None, None, :]


class _SkeletonProblem:
    """Forward map ``z -> V^h`` and its adjoint for one event and configuration."""

    def __init__(self, event: EventSpec, config: SolverConfig, K: int):
        self.event = event
        self.config = config.replace(epsilon=0.0)
        g = config.grid
        self.grid = g
        self.J = config.J
        self.dt = config.dt
        self.mask = mode_mask(g, K)
        mu = density_table(config.spec, g)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(self.mask & (mu > 0), np.sqrt(g.volume / (self.dt * np.where(mu > 0, mu, 1.0))), 0.0)
        # h_hat = D fft(z) with |z|^2 = ||h||^2 on the masked subspace
        self.D = d / g.N**1.5
        self.K_op = (self.dt * mu * self.D / g.cell_volume)[..., : g.N // 2 + 1]
        self.w = homogeneous_trajectory(self.config)
        from .kernel import propagator

        c, m, s = propagator(self.dt, g.kmag_r)
        self.c, self.m, self.s = c, m, s
        self.sigma = config.coeffs.sigma
        self.b = config.coeffs.b

    def _op(self, mult, x):
        return sfft.irfftn(mult * sfft.rfftn(x, axes=(-3, -2, -1)), s=self.grid.shape, axes=(-3, -2, -1))

    def project(self, z: np.ndarray) -> np.ndarray:
        mr = self.mask[..., : self.grid.N // 2 + 1]
        return self._op(mr, z)

    def control(self, z: np.ndarray) -> Control:
        coeffs = self.D * sfft.fftn(z, axes=(-3, -2, -1))
        return Control(self.grid, self.config.spec, self.dt, coeffs)

    def forward(self, z: np.ndarray) -> np.ndarray:
        snaps = np.empty((self.J + 1,) + self.grid.shape)

        def record(j, u):
            snaps[j] = u[0]

        integrate(self.config, self.control(z), None, (0,), on_step=record)
        snaps[0] = self.config.init.v0.values
        return snaps

    def exact_value(self, u: np.ndarray) -> float:
        d = u - self.w
        if self.event.needs_path:
            return float(self.event.path_value(d))
        return float(self.event.final_value(d[-1], self.grid))

    def active_point(self, u: np.ndarray):
        """``(j, iz, iy, ix, sign)`` where ``|u - w|`` peaks inside the region."""
        d = (u - self.w)[(slice(None),) + self.event.region.slices]
        j, iz, iy, ix = np.unravel_index(int(np.argmax(np.abs(d))), d.shape)
        lo = self.event.region.lo
        sign = 1.0 if d[j, iz, iy, ix] >= 0 else -1.0
        return int(j), int(iz + lo[2]), int(iy + lo[1]), int(ix + lo[0]), sign

    def smooth_value_and_direct(self, u: np.ndarray, kappa: float, active=None):
        """Event functional (log-sum-exp relaxed for sup events) and ``dF/du_j``.

        ``active`` pins a sup event to a single signed space-time point.
        """
        d = u - self.w
        a = np.zeros_like(u)
        ev = self.event
        if active is not None:
            j, iz, iy, ix, sign = active
            a[j, iz, iy, ix] = sign
            return float(sign * d[j, iz, iy, ix]), a
        if ev.kind == "point_exceed":
            ix, iy, iz = ev.site
            a[-1, iz, iy, ix] = 1.0
            return float(d[-1, iz, iy, ix]), a
        if ev.kind == "linear_exceed":
            a[-1] = self.grid.cell_volume * ev.g
            return float(self.grid.cell_volume * np.sum(d[-1] * ev.g)), a
        sl = (slice(None),) + ev.region.slices
        sub = d[sl]
        stacked = np.stack([sub, -sub])
        top = stacked.max()
        e = np.exp(kappa * (stacked - top))
        tot = e.sum()
        val = top + math.log(tot) / kappa
        wts = e / tot
        a[sl] = wts[0] - wts[1]
        return float(val), a

    def adjoint(self, u: np.ndarray, z: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Gradient of ``sum_j <a_j, u_j>`` with respect to ``z``."""
        c, m, s = self.c, self.m, self.s
        rf = lambda x: sfft.rfftn(x, axes=(-3, -2, -1))
        irf = lambda x: sfft.irfftn(x, s=self.grid.shape, axes=(-3, -2, -1))
        sigma_const = self.sigma.is_constant
        b_const = self.b.is_constant
        grad = np.zeros_like(z)
        p_hat = rf(a[-1])
        q_hat = np.zeros_like(p_hat)
        g_all = None
        if not sigma_const:
            g_all = self._op(self.K_op, z)
        for j in range(self.J - 1, -1, -1):
            r_hat = m * p_hat + c * q_hat
            r = irf(r_hat)
            sig_u = self.sigma(u[j])
            grad[j] = self._op(self.K_op, sig_u * r)
            p_new = c * p_hat + s * q_hat
            if not (sigma_const and b_const):
                lin = self.b.derivative(u[j]) * self.dt
                if not sigma_const:
                    lin = lin + self.sigma.derivative(u[j]) * g_all[j]
                p_new = p_new + rf(lin * r)
            if j > 0 and np.any(a[j]):
                p_new = p_new + rf(a[j])
            q_hat = m * p_hat + c * q_hat
            p_hat = p_new
        return grad


def _polish(problem: _SkeletonProblem, z: np.ndarray, r: float, tol: float):
    """Smallest scaling ``s`` of ``z`` (bisection) whose exact event value reaches ``r``."""
    if r == 0:
        return z, 0.0
    f = lambda s: problem.exact_value(problem.forward(s * z))
    if f(1.0) >= r:
        lo, hi = 0.0, 1.0
        if f(0.0) >= r:
            return 0.0 * z, f(0.0)
    else:
        lo, hi = 1.0, 2.0
        while f(hi) < r:
            lo, hi = hi, 2 * hi
            if hi > 1e8:
                return z, f(1.0)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) >= r:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-14 * hi:
            break
    return hi * z, f(hi)


def minimize_rate(event: EventSpec, config: SolverConfig, opts: RateOptions | None = None) -> RateReport:
    """Minimise ``1/2 ||h||^2`` over truncated controls subject to ``V^h`` hitting ``event``."""
    opts = opts or RateOptions()
    problem = _SkeletonProblem(event, config, opts.K)
    r = event.threshold
    shape = (config.J,) + config.grid.shape
    linear = config.coeffs.additive

    if r == 0:
        z0 = np.zeros(shape)
        u0 = problem.forward(z0)
        if problem.exact_value(u0) >= 0:
            ctl = problem.control(z0)
            return RateReport(event, ctl, 0.0, 0.0, "certified" if linear else "local", [0.0], opts.K, [0.0])

    def run_stage(z, lam, kappa, active):
        def fun(x):
            zz = x.reshape(shape)
            u = problem.forward(zz)
            val, a = problem.smooth_value_and_direct(u, kappa, active)
            viol = max(0.0, 1.0 - val / r)
            obj = 0.5 * float(np.dot(x, x)) + lam * viol * viol
            grad = x.copy()
            if viol > 0:
                grad -= (2 * lam * viol / r) * problem.adjoint(u, zz, a).reshape(-1)
            if opts.norm_bound is not None:
                nrm = math.sqrt(float(np.dot(x, x)))
                excess = nrm - opts.norm_bound
                if excess > 0:
                    obj += lam * excess * excess
                    grad += (2 * lam * excess / nrm) * x
            return obj, grad

        res = optimize.minimize(
            fun,
            z.reshape(-1),
            jac=True,
            method="L-BFGS-B",
            options={"maxiter": opts.max_iter, "gtol": 1e-12, "ftol": 1e-15},
        )
        return res.x.reshape(shape), float(res.fun)

    results = []
    for restart in range(opts.restarts):
        if restart == 0:
            z = np.zeros(shape)
            if event.needs_path:
                # the smooth max is flat at h = 0; start along the cheapest direction for the region centre
                box = event.region
                centre = tuple((l + h - 1) // 2 for l, h in zip(box.lo[::-1], box.hi[::-1]))
                a = np.zeros((config.J + 1,) + config.grid.shape)
                a[(-1,) + centre] = 1.0
                u0 = problem.forward(z)
                z = problem.adjoint(u0, z, a)
                z *= opts.start_scale * r / max(float(np.sum(z * z)), 1e-300)
        else:
            g = rng.stream(opts.seed, restart, 1 << 40)
            z = problem.project(opts.start_scale * g.standard_normal(shape))
        trace = []
        for stage, lam in enumerate(opts.penalties):
            kappa = opts.kappas[min(stage, len(opts.kappas) - 1)] / max(r, 1e-300)
            z, obj = run_stage(z, lam, kappa, None)
            trace.append(obj)
            if linear and not event.needs_path:
                if problem.exact_value(problem.forward(z)) >= r * (1 - opts.feasibility_tol):
                    break
        if event.needs_path:
            # remove the log-sum-exp bias: refine on the peak point, then polish
            active = problem.active_point(problem.forward(z))
            for lam in opts.penalties:
                z, obj = run_stage(z, lam, 0.0, active)
                trace.append(obj)
        z, val = _polish(problem, z, r, opts.feasibility_tol)
        if opts.norm_bound is not None:
            nrm = math.sqrt(float(np.sum(z * z)))
            if nrm > opts.norm_bound:
                z = z * (opts.norm_bound / nrm)
                val = problem.exact_value(problem.forward(z))
        rate = 0.5 * float(np.sum(z * z))
        residual = max(0.0, r - val)
        results.append((rate, residual, z, trace))

    feasible = [
        (i, res) for i, res in enumerate(results) if res[1] <= opts.feasibility_tol * max(r, 1e-300)
    ]
    restart_rates = [res[0] for res in results]
    if feasible:
        best_rate = min(res[0] for _, res in feasible)
        i, best = next((i, res) for i, res in feasible if res[0] <= best_rate * (1 + 1e-9))
        status = "certified" if linear else "local"
    else:
        i = int(np.argmin([res[1] for res in results]))
        best = results[i]
        status = "infeasible"
    rate, residual, z, trace = best
    ctl = problem.control(z)
    if opts.norm_bound is not None:
        ctl.bound = opts.norm_bound
    return RateReport(event, ctl, 0.5 * ctl.norm_sq, residual, status, trace, opts.K, restart_rates)
