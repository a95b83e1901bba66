"""Spatial covariance ``phi(x)|x|^-beta``, its spectral density, and noise sampling.

Torus conventions (used everywhere in the package): a field ``f`` has
continuum-normalised coefficients ``f_hat(xi_k) = dx^3 * DFT(f)``, the periodised
covariance is ``(1/V) sum_k mu_k exp(i xi_k . x)``, and the noise increment
over a step ``dt`` is the centred Gaussian field with that covariance times ``dt``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft as sfft
from scipy import integrate

from . import rng
from .grid import Field, Grid

PHI_FAMILIES = ("constant", "gaussian_bump")

# Relative clamp threshold for round-off negativity of a sampled density.
NEGATIVITY_CLAMP = 1e-10


class CovarianceError(ValueError):
    pass


def riesz_normalization(beta: float) -> float:
    """Constant ``c`` in the 3-D Fourier pair ``|x|^-beta <-> c |xi|^(beta-3)``.

    Defined for ``0 < beta < 3`` (the pair itself), which is wider than the
    range admitted by :class:`CovarianceSpec`.
    """
    if not 0 < beta < 3:
        raise CovarianceError(f"Riesz pair undefined for beta={beta}")
    return math.pi**1.5 * 2.0 ** (3 - beta) * math.gamma((3 - beta) / 2) / math.gamma(beta / 2)


def _unit_cube_power_integral(p: float) -> float:
    """``int_{[0,1]^3} |u|^p du`` for ``p > -3``.

    Splits the cube into three pyramids with apex at the origin; the radial
    integral is done analytically and leaves a smooth 2-D integrand.
    """
    val, _ = integrate.dblquad(
        lambda w, v: (1.0 + v * v + w * w) ** (p / 2), 0.0, 1.0, 0.0, 1.0, epsabs=1e-14, epsrel=1e-13
    )
    return 3.0 * val / (3.0 + p)


@dataclass(frozen=True)
class CovarianceSpec:
    """Noise law: ``Gamma(dx) = phi(x) |x|^-beta dx``.

    ``phi`` is ``c`` for the ``constant`` family and
    ``c * (1 + amplitude * exp(-|x|^2 / (2 width^2)))`` for ``gaussian_bump``.
    ``delta`` is the declared Hölder exponent of ``grad phi``.
    """

    beta: float
    phi: str = "constant"
    c: float = 1.0
    amplitude: float = 0.0
    width: float = 1.0
    delta: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.beta < 2.0:
            raise CovarianceError(
                f"beta={self.beta} outside ]0,2[ required by hypothesis (H)-2; "
                "the spectral integral of the wave kernel diverges there"
            )
        if self.phi not in PHI_FAMILIES:
            raise CovarianceError(f"unknown phi family {self.phi!r}; supported: {PHI_FAMILIES}")
        if not self.c > 0:
            raise CovarianceError("phi must be positive (c > 0)")
        if self.phi == "gaussian_bump" and (self.amplitude < 0 or not self.width > 0):
            raise CovarianceError("gaussian_bump needs amplitude >= 0 and width > 0")
        if not 0.0 < self.delta <= 1.0:
            raise CovarianceError(f"delta={self.delta} outside ]0,1]")

    @property
    def normalization(self) -> float:
        """Multiplier of ``|xi|^(beta-3)`` in the large-``|xi|`` density."""
        return self.c * riesz_normalization(self.beta)

    def phi_values(self, r: np.ndarray) -> np.ndarray:
        if self.phi == "constant":
            return np.full_like(np.asarray(r, dtype=float), self.c)
        return self.c * (1.0 + self.amplitude * np.exp(-np.asarray(r) ** 2 / (2 * self.width**2)))

    def covariance(self, r) -> np.ndarray:
        """Continuum covariance density at distance ``r > 0``."""
        r = np.asarray(r, dtype=float)
        return self.phi_values(r) * r ** (-self.beta)


def zero_mode_weight(spec: CovarianceSpec, grid: Grid) -> float:
    """Average of ``normalization * |xi|^(beta-3)`` over the origin's Brillouin cell."""
    a = math.pi / grid.L
    return spec.normalization * a ** (spec.beta - 3) * _unit_cube_power_integral(spec.beta - 3)


def _bump_density(spec: CovarianceSpec, grid: Grid) -> np.ndarray:
    """DFT of the sampled bump part ``c*a*exp(-r^2/2w^2) |x|^-beta``.

    The ``|x| = 0`` cell carries the cell average of ``|x|^-beta``.  Only this
    rapidly decaying part is sampled; the constant part of ``phi`` keeps its
    exact density, so periodisation never truncates a slowly decaying tail.
    """
    r = grid.distance_from((0.0, 0.0, 0.0))
    with np.errstate(divide="ignore"):
        cov = spec.c * spec.amplitude * np.exp(-(r**2) / (2 * spec.width**2)) * r ** (-spec.beta)
    h = grid.dx / 2
    cov[0, 0, 0] = spec.c * spec.amplitude * h ** (-spec.beta) * _unit_cube_power_integral(-spec.beta)
    return grid.fft(cov).real


@lru_cache(maxsize=64)
def _density_table(spec: CovarianceSpec, grid: Grid) -> np.ndarray:
    k = grid.kmag
    with np.errstate(divide="ignore"):
        mu = spec.normalization * k ** (spec.beta - 3)
    mu[0, 0, 0] = zero_mode_weight(spec, grid)
    if spec.phi == "gaussian_bump" and spec.amplitude > 0:
        mu = mu + _bump_density(spec, grid)
        top = mu.max()
        if mu.min() < -NEGATIVITY_CLAMP * top:
            raise CovarianceError(
                f"sampled covariance is not positive definite on this grid "
                f"(min density {mu.min():.3e}, max {top:.3e}); reduce the bump width"
            )
        mu = np.maximum(mu, 0.0)
    mu.setflags(write=False)
    return mu


def density_table(spec: CovarianceSpec, grid: Grid) -> np.ndarray:
    """Spectral density ``mu_k`` on the full FFT lattice (read-only, cached)."""
    return _density_table(spec, grid)


def spectral_density(spec: CovarianceSpec, xi, grid: Grid | None = None) -> float:
    """Spectral density at frequency vector ``xi``.

    For constant ``phi`` away from the origin this is closed form.  The zero
    mode and every non-constant ``phi`` depend on the lattice, so ``grid`` is
    required there and ``xi`` must be one of its frequencies.
    """
    xi = np.asarray(xi, dtype=float)
    kn = float(np.linalg.norm(xi))
    if spec.phi == "constant" and kn > 0:
        return spec.normalization * kn ** (spec.beta - 3)
    if grid is None:
        raise CovarianceError("zero mode and non-constant phi need a grid")
    idx = []
    for comp in xi[::-1]:  # (z, y, x) array order
        k = comp * grid.L / (2 * np.pi)
        ki = int(round(k))
        if abs(k - ki) > 1e-9:
            raise CovarianceError(f"{tuple(xi)} is not a lattice frequency")
        idx.append(ki % grid.N)
    return float(density_table(spec, grid)[tuple(idx)])


def lattice_covariance(spec: CovarianceSpec, grid: Grid) -> np.ndarray:
    """Grid-discretised covariance ``(1/V) sum_k mu_k exp(i xi_k x)`` at every lag."""
    return grid.ifft(density_table(spec, grid).astype(complex))


def synthesis_amplitude(spec: CovarianceSpec, grid: Grid) -> np.ndarray:
    """``sqrt(mu_k / dx^3)`` on the rfft half-lattice.

    Multiplying the DFT of unit white noise by this and inverting gives a field
    with the lattice covariance.
    """
    mu = density_table(spec, grid)[..., : grid.N // 2 + 1]
    return np.sqrt(mu / grid.cell_volume)


def _colour(white: np.ndarray, spec: CovarianceSpec, grid: Grid) -> np.ndarray:
    amp = synthesis_amplitude(spec, grid)
    return sfft.irfftn(sfft.rfftn(white, axes=(-3, -2, -1)) * amp, s=grid.shape, axes=(-3, -2, -1))


def sample_field(spec: CovarianceSpec, grid: Grid, seed: int, replicate: int = 0) -> Field:
    """One draw of the centred stationary field with the lattice covariance."""
    white = rng.standard_normal(seed, replicate, 0, grid.shape)
    return Field(grid, _colour(white, spec, grid))


@dataclass
class NoiseIncrements:
    grid: Grid
    J: int
    dt: float
    seed: int
    increments: np.ndarray  # (J, N, N, N)
    replicate: int = 0

    def __getitem__(self, j: int) -> Field:
        return Field(self.grid, self.increments[j])


def noise_increments(
    spec: CovarianceSpec, grid: Grid, J: int, dt: float, seed: int, replicate: int = 0
) -> NoiseIncrements:
    """``J`` independent increments, step ``j`` drawn from the ``(seed, replicate, j)`` stream."""
    if J < 1:
        raise ValueError("J must be >= 1")
    if not dt > 0:
        raise ValueError("dt must be positive")
    white = np.stack([rng.standard_normal(seed, replicate, j, grid.shape) for j in range(J)])
    inc = _colour(white, spec, grid) * math.sqrt(dt)
    return NoiseIncrements(grid, J, dt, seed, inc, replicate)


def white_to_increment_hat(white_hat: np.ndarray, spec: CovarianceSpec, grid: Grid, dt: float) -> np.ndarray:
    """Continuum-normalised rfft coefficients of increments from the rfft of white noise."""
    return white_hat * (synthesis_amplitude(spec, grid) * math.sqrt(dt) * grid.cell_volume)


__all__ = [
    "CovarianceError",
    "CovarianceSpec",
    "NoiseIncrements",
    "density_table",
    "lattice_covariance",
    "noise_increments",
    "riesz_normalization",
    "sample_field",
    "spectral_density",
    "zero_mode_weight",
]
