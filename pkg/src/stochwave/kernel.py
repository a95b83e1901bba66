"""Fundamental solution of the 3-D wave equation in Fourier form.

``G(t)`` acts on the torus as the multiplier ``m(t, xi) = sin(t|xi|)/|xi|`` and
its time derivative as ``cos(t|xi|)``.  The surface-measure form of ``G`` is
never used by the solver.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate

from .grid import Field, Grid
from .noise import CovarianceError, CovarianceSpec


def sinc_multiplier(t: float, kmag) -> np.ndarray:
    """``sin(t k)/k`` with the continuous value ``t`` at ``k = 0``."""
    if t < 0:
        raise ValueError(f"negative time t={t}")
    kmag = np.asarray(kmag, dtype=float)
    return t * np.sinc(t * kmag / np.pi)


def kernel_multiplier(t: float, xi) -> float | np.ndarray:
    """Fourier multiplier of ``G(t)`` at frequency vector(s) ``xi`` (last axis of length 3)."""
    xi = np.asarray(xi, dtype=float)
    return sinc_multiplier(t, np.linalg.norm(xi, axis=-1))


def propagator(t: float, kmag) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Entries ``(cos, m, -k sin)`` of the per-mode map ``(u, u_t)(0) -> (u, u_t)(t)``.

    The full matrix is ``[[cos, m], [-k sin, cos]]``.
    """
    kmag = np.asarray(kmag, dtype=float)
    c = np.cos(t * kmag)
    return c, sinc_multiplier(t, kmag), -kmag * np.sin(t * kmag)


def _sin2_power_integral(t: float, p: float, split: float = 1.0) -> float:
    """``int_0^inf sin^2(t r) r^p dr`` for ``-3 < p < -1``."""
    a = split / t
    head, _ = integrate.quad(
        lambda r: np.sinc(t * r / np.pi) ** 2 * t * t, 0.0, a, weight="alg", wvar=(p + 2, 0.0), limit=200
    )
    tail_flat = a ** (p + 1) / (2 * (-p - 1))
    tail_osc, _ = integrate.quad(lambda r: 0.5 * r**p, a, np.inf, weight="cos", wvar=2 * t, limlst=200)
    return head + tail_flat - tail_osc


def dalang_integral(spec: CovarianceSpec, t: float) -> float:
    """``int |F G(t)(xi)|^2 mu(dxi)`` over R^3 for constant ``phi``, by radial quadrature."""
    if not 0 < spec.beta < 2:
        raise CovarianceError(f"beta={spec.beta}: the integral diverges outside ]0,2[")
    if spec.phi != "constant":
        raise ValueError("dalang_integral is implemented for constant phi only")
    if not t > 0:
        raise ValueError("t must be positive")
    radial = _sin2_power_integral(t, spec.beta - 3)
    return 4 * math.pi * spec.normalization * radial


@dataclass
class InitialData:
    """Position ``v0`` and velocity ``v0_tilde`` with declared Hölder metadata."""

    v0: Field
    v0_tilde: Field
    gamma1: float = 1.0
    gamma2: float = 1.0
    bound: float = field(init=False)

    def __post_init__(self):
        if self.v0.grid != self.v0_tilde.grid:
            raise ValueError("initial fields live on different grids")
        for name, g in (("gamma1", self.gamma1), ("gamma2", self.gamma2)):
            if not 0 < g <= 1:
                raise ValueError(f"{name}={g} outside ]0,1]")
        self.bound = max(self.v0.sup(), self.v0_tilde.sup())

    @property
    def grid(self) -> Grid:
        return self.v0.grid

    @classmethod
    def zeros(cls, grid: Grid, **kw) -> "InitialData":
        z = np.zeros(grid.shape)
        return cls(Field(grid, z), Field(grid, z.copy()), **kw)


def check_horizon(grid: Grid, t: float) -> None:
    if t >= grid.L / 4:
        raise ValueError(f"t={t} reaches the wraparound bound L/4={grid.L / 4}")


def homogeneous_solution(init: InitialData, grid: Grid, t: float) -> Field:
    """``w(t) = d/dt G(t) * v0 + G(t) * v0_tilde`` evaluated spectrally."""
    if t < 0:
        raise ValueError("negative time")
    check_horizon(grid, t)
    c, m, _ = propagator(t, grid.kmag_r)
    w_hat = c * grid.rfft(init.v0.values) + m * grid.rfft(init.v0_tilde.values)
    return Field(grid, grid.irfft(w_hat))


# Mollifier psi: normalised exp(-1/(1-|x|^2)) supported in the unit ball.

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(256)


def _bump_profile(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = r < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    return out


@lru_cache(maxsize=1)
def _bump_mass() -> float:
    val, _ = integrate.quad(lambda r: 4 * math.pi * r * r * math.exp(-1.0 / (1.0 - r * r)), 0.0, 1.0, epsabs=0, epsrel=1e-13)
    return val


def mollifier(r) -> np.ndarray:
    """Radial profile of ``psi`` (unit mass, support in the closed unit ball)."""
    return _bump_profile(r) / _bump_mass()


def mollifier_transform(kappa) -> np.ndarray:
    """Fourier transform of ``psi`` at radial frequency ``kappa``."""
    kappa = np.asarray(kappa, dtype=float)
    r = 0.5 * (_GL_NODES + 1.0)
    w = 0.5 * _GL_WEIGHTS * 4 * math.pi * r * r * mollifier(r)
    flat = kappa.reshape(-1)
    uniq, inv = np.unique(flat, return_inverse=True)
    vals = np.sinc(np.outer(uniq, r) / np.pi) @ w
    return vals[inv].reshape(kappa.shape)


def mollified_multiplier(n: int, t: float, xi) -> float | np.ndarray:
    """Multiplier of ``G_n(t) = psi_n(t, .) * G(t)``, with ``psi_n(t,x) = (n/t)^3 psi(n x / t)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if not t > 0:
        raise ValueError("t must be positive")
    k = np.linalg.norm(np.asarray(xi, dtype=float), axis=-1)
    return mollifier_transform(t * k / n) * sinc_multiplier(t, k)


def mollified_kernel_field(n: int, t: float, grid: Grid, nodes: int = 96) -> Field:
    """Real-space samples of ``G_n(t)`` centred at the origin (minimum image).

    Uses the spherical-mean form ``G_n(t)(rho) = t/2 int_{-1}^{1} psi_n(|y|) du``
    with ``|y|^2 = rho^2 + t^2 - 2 rho t u``; the integrand vanishes unless
    ``|y| < t/n``, so only that sub-interval is integrated.
    """
    if n < 1 or not t > 0:
        raise ValueError("need n >= 1 and t > 0")
    rho = grid.distance_from((0.0, 0.0, 0.0))
    eps = t / n
    out = np.zeros(grid.shape)
    uniq, inv = np.unique(rho.reshape(-1), return_inverse=True)
    vals = np.zeros_like(uniq)
    xg, wg = np.polynomial.legendre.leggauss(nodes)
    for i, p in enumerate(uniq):
        if p == 0.0 or abs(p - t) >= eps:
            continue
        u0 = max(-1.0, (p * p + t * t - eps * eps) / (2 * p * t))
        if u0 >= 1.0:
            continue
        u = u0 + (1.0 - u0) * 0.5 * (xg + 1.0)
        y = np.sqrt(np.maximum(p * p + t * t - 2 * p * t * u, 0.0))
        psi_n = (n / t) ** 3 * mollifier(y / eps)
        vals[i] = 0.5 * t * (1.0 - u0) * 0.5 * np.dot(wg, psi_n)
    out = vals[inv].reshape(grid.shape)
    return Field(grid, out)


def wave_energy(grid: Grid, u_hat: np.ndarray, ut_hat: np.ndarray) -> float:
    """Discrete energy ``sum |u_t_hat|^2 + |xi|^2 |u_hat|^2`` over the full lattice."""
    return float(np.sum(np.abs(ut_hat) ** 2 + grid.kmag**2 * np.abs(u_hat) ** 2))
