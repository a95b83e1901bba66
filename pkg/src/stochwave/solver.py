"""Stochastic trigonometric scheme for the controlled mild equation.

One step from ``t_j`` to ``t_{j+1}``:

* ``(u, u_t)`` is rotated exactly, mode by mode, by the wave propagator over ``dt``;
* the left-endpoint impulse
  ``f_j = sqrt(eps) sigma(u_j) dW_j + sigma(u_j) (Gamma * h_j) dt + b(u_j) dt``
  is injected through ``m(dt, xi)`` (displacement) and ``cos(dt |xi|)`` (velocity).

``eps = 0`` gives the skeleton equation and ``h = 0`` the uncontrolled one.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import scipy.fft as sfft

from . import rng
from .grid import Field, Grid
from .kernel import InitialData, propagator
from .noise import CovarianceSpec, NoiseIncrements, density_table, synthesis_amplitude


class SolverError(RuntimeError):
    pass


class PicardDivergence(SolverError):
    def __init__(self, message, gaps):
        super().__init__(message)
        self.gaps = list(gaps)


@dataclass(frozen=True)
class Coefficient:
    """Lipschitz nonlinearity ``constant:c``, ``affine:a,b`` (a + b u) or ``bounded_smooth:s`` (s tanh u)."""

    kind: str
    params: tuple[float, ...]

    def __post_init__(self):
        arity = {"constant": 1, "affine": 2, "bounded_smooth": 1}
        if self.kind not in arity:
            raise ValueError(f"unknown coefficient family {self.kind!r}")
        if len(self.params) != arity[self.kind]:
            raise ValueError(f"{self.kind} takes {arity[self.kind]} parameter(s), got {self.params}")

    @classmethod
    def parse(cls, text: str) -> "Coefficient":
        kind, _, rest = text.strip().partition(":")
        params = tuple(float(p) for p in rest.split(",")) if rest else ()
        return cls(kind.strip(), params)

    def __str__(self):
        return f"{self.kind}:" + ",".join(repr(p) for p in self.params)

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant" or self._slope_zero()

    def _slope_zero(self) -> bool:
        return (self.kind == "affine" and self.params[1] == 0.0) or (
            self.kind == "bounded_smooth" and self.params[0] == 0.0
        )

    @property
    def constant_value(self) -> float:
        if self.kind in ("constant", "affine"):
            return self.params[0]
        return 0.0

    @property
    def is_zero(self) -> bool:
        return self.is_constant and self.constant_value == 0.0

    @property
    def lipschitz(self) -> float:
        if self.kind == "constant":
            return 0.0
        if self.kind == "affine":
            return abs(self.params[1])
        return abs(self.params[0])

    def __call__(self, u: np.ndarray) -> np.ndarray:
        if self.kind == "constant":
            return np.full_like(u, self.params[0])
        if self.kind == "affine":
            return self.params[0] + self.params[1] * u
        return self.params[0] * np.tanh(u)

    def derivative(self, u: np.ndarray) -> np.ndarray:
        if self.kind == "constant":
            return np.zeros_like(u)
        if self.kind == "affine":
            return np.full_like(u, self.params[1])
        return self.params[0] / np.cosh(u) ** 2


@dataclass(frozen=True)
class CoefficientSpec:
    sigma: Coefficient = Coefficient("constant", (1.0,))
    b: Coefficient = Coefficient("constant", (0.0,))

    @classmethod
    def parse(cls, sigma: str, b: str = "constant:0") -> "CoefficientSpec":
        return cls(Coefficient.parse(sigma), Coefficient.parse(b))

    @property
    def additive(self) -> bool:
        """Forcing independent of the solution (constant sigma and b)."""
        return self.sigma.is_constant and self.b.is_constant


@dataclass
class SolverConfig:
    grid: Grid
    T: float
    J: int
    init: InitialData
    spec: CovarianceSpec
    coeffs: CoefficientSpec = field(default_factory=CoefficientSpec)
    epsilon: float = 1.0
    picard_tol: float = 0.0
    noise_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.init.grid != self.grid:
            raise ValueError("initial data grid differs from solver grid")
        if not self.T > 0 or self.J < 1:
            raise ValueError("need T > 0 and J >= 1")
        if self.T >= self.grid.L / 4:
            raise ValueError(f"T={self.T} must stay below L/4={self.grid.L / 4} (wraparound guard)")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon={self.epsilon} outside [0,1]")
        if self.noise_mask is not None and np.shape(self.noise_mask) != self.grid.shape:
            raise ValueError("noise mask shape mismatch")

    @property
    def dt(self) -> float:
        return self.T / self.J

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.J + 1) * self.dt

    def replace(self, **changes) -> "SolverConfig":
        kw = {k: getattr(self, k) for k in self.__dataclass_fields__}
        kw.update(changes)
        return SolverConfig(**kw)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        meta = {
            "L": self.grid.L,
            "N": self.grid.N,
            "T": self.T,
            "J": self.J,
            "spec": [self.spec.beta, self.spec.phi, self.spec.c, self.spec.amplitude, self.spec.width, self.spec.delta],
            "sigma": str(self.coeffs.sigma),
            "b": str(self.coeffs.b),
            "epsilon": self.epsilon,
        }
        h.update(json.dumps(meta, sort_keys=True).encode())
        for arr in (self.init.v0.values, self.init.v0_tilde.values):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        if self.noise_mask is not None:
            h.update(np.ascontiguousarray(self.noise_mask, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass
class Control:
    """Discretised element of ``L^2([0,T]; H)``.

    ``coeffs[j]`` holds the continuum-normalised full-lattice coefficients of
    ``h(t_j, .)``; ``norm_sq = sum_j dt (1/V) sum_k mu_k |h_hat|^2``.
    """

    grid: Grid
    spec: CovarianceSpec
    dt: float
    coeffs: np.ndarray
    bound: float | None = None
    norm_sq: float = field(init=False)

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=complex)
        if self.coeffs.ndim != 4 or self.coeffs.shape[1:] != self.grid.shape:
            raise ValueError(f"control coefficients must have shape (J, N, N, N), got {self.coeffs.shape}")
        self.norm_sq = self.compute_norm_sq()
        if self.bound is not None and math.sqrt(self.norm_sq) > self.bound * (1 + 1e-12):
            raise ValueError(f"control norm {math.sqrt(self.norm_sq):.6g} exceeds the bound {self.bound}")

    @property
    def J(self) -> int:
        return self.coeffs.shape[0]

    def compute_norm_sq(self) -> float:
        mu = density_table(self.spec, self.grid)
        per_step = np.einsum("jzyx,zyx->j", np.abs(self.coeffs) ** 2, mu)
        return float(self.dt * per_step.sum() / self.grid.volume)

    @property
    def norm(self) -> float:
        return math.sqrt(self.norm_sq)

    def fields(self) -> np.ndarray:
        return self.grid.ifft(self.coeffs)

    def is_zero_slice(self, j: int) -> bool:
        return not np.any(self.coeffs[j])

    def scaled(self, s: float) -> "Control":
        return Control(self.grid, self.spec, self.dt, self.coeffs * s)

    @classmethod
    def zeros(cls, grid, spec, dt, J) -> "Control":
        return cls(grid, spec, dt, np.zeros((J,) + grid.shape, dtype=complex))

    @classmethod
    def from_fields(cls, grid, spec, dt, h: np.ndarray, bound=None) -> "Control":
        return cls(grid, spec, dt, grid.fft(np.asarray(h, dtype=float)), bound=bound)


@dataclass
class Trajectory:
    config: SolverConfig | None
    times: np.ndarray
    snapshots: np.ndarray  # (J+1, N, N, N)
    velocities: np.ndarray | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.snapshots)):
            raise SolverError("trajectory contains non-finite values")

    @property
    def grid(self) -> Grid:
        return self.config.grid

    def __getitem__(self, j) -> Field:
        return Field(self.config.grid, self.snapshots[j])

    def dump(self, directory, seed: int | None = None, config_hash: str | None = None) -> Path:
        """Write one ``SWE3`` file per snapshot plus ``manifest.json``.

        ``config_hash`` defaults to the solver fingerprint.
        """
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = []
        for j, snap in enumerate(self.snapshots):
            name = f"u_{j:05d}.swe3"
            Field(self.config.grid, snap).dump(d / name)
            files.append(name)
        manifest = {
            "config_hash": config_hash or self.config.fingerprint(),
            "solver_fingerprint": self.config.fingerprint(),
            "seed": seed,
            "J": self.config.J,
            "dt": self.config.dt,
            "T": self.config.T,
            "files": files,
        }
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return d


class _Engine:
    """Precomputed spectral tables for one configuration."""

    def __init__(self, config: SolverConfig):
        g = config.grid
        self.config = config
        self.grid = g
        self.dt = config.dt
        # complex copies multiply complex state faster than mixed-type broadcasting
        self.cos, self.m, self.msin = (a.astype(complex) for a in propagator(self.dt, g.kmag_r))
        self.mu_r = density_table(config.spec, g)[..., : g.N // 2 + 1]
        self.white_to_dw = synthesis_amplitude(config.spec, g) * math.sqrt(self.dt) * g.cell_volume
        self.sqrt_eps = math.sqrt(config.epsilon)
        self.sigma = config.coeffs.sigma
        self.b = config.coeffs.b
        self.masked = config.noise_mask is not None
        self.u_independent = config.coeffs.additive and not self.masked

    def advance(self, u_hat, v_hat, f_hat):
        c, m, s = self.cos, self.m, self.msin
        drive = v_hat if f_hat is None else v_hat + f_hat
        u_new = c * u_hat
        u_new += m * drive
        v_new = s * u_hat
        v_new += c * drive
        return u_new, v_new

    def noise_hat(self, seed, replicates, j) -> np.ndarray:
        g = self.grid
        white = np.stack([rng.standard_normal(seed, r, j, g.shape) for r in replicates])
        return sfft.rfftn(white, axes=(-3, -2, -1)) * self.white_to_dw

    def forcing_hat(self, u, dw_hat, dw_real, h_hat_r):
        """Continuum-normalised rfft coefficients of ``f_j``; ``None`` when it vanishes."""
        g = self.grid
        dt = self.dt
        noisy = self.sqrt_eps > 0 and (dw_hat is not None or dw_real is not None)
        if self.u_independent:
            sig = self.sigma.constant_value
            bval = self.b.constant_value
            f_hat = None
            if noisy and sig != 0.0:
                if dw_hat is None:
                    dw_hat = g.rfft(dw_real)
                f_hat = (self.sqrt_eps * sig) * dw_hat
            if h_hat_r is not None and sig != 0.0:
                term = (sig * dt) * (self.mu_r * h_hat_r)
                f_hat = term if f_hat is None else f_hat + term
            if bval != 0.0:
                shape = (u.shape[0],) if u is not None and u.ndim == 4 else ()
                term = np.zeros(shape + self.mu_r.shape, dtype=complex)
                term[..., 0, 0, 0] = bval * dt * g.volume
                f_hat = term if f_hat is None else f_hat + term
            return f_hat
        drive = None
        if noisy:
            if dw_real is None:
                dw_real = g.irfft(dw_hat)
            if self.masked:
                dw_real = dw_real * self.config.noise_mask
            drive = self.sqrt_eps * dw_real
        if h_hat_r is not None:
            gh = dt * g.irfft(self.mu_r * h_hat_r)
            drive = gh if drive is None else drive + gh
        f = None
        if drive is not None and not self.sigma.is_zero:
            f = self.sigma(u) * drive
        if not self.b.is_zero:
            fb = self.b(u) * dt
            f = fb if f is None else f + fb
        if f is None:
            return None
        return g.rfft(f)


def _control_slice(control: Control | None, j: int, n_half: int):
    if control is None or control.is_zero_slice(j):
        return None
    return control.coeffs[j][..., :n_half]


def _check_finite(arr, j):
    if not np.all(np.isfinite(arr)):
        raise SolverError(f"non-finite state at step {j}")


def step(state, dt, noise_increment, control_slice, config: SolverConfig):
    """Advance ``(u, u_t)`` by one step of length ``dt``.

    ``noise_increment`` is a real :class:`Field` (or ``None``) and
    ``control_slice`` full-lattice continuum coefficients (or ``None``).
    """
    u, v = state
    if not (np.all(np.isfinite(u.values)) and np.all(np.isfinite(v.values))):
        raise SolverError("non-finite state at step input")
    eng = _Engine(config)
    g = config.grid
    eng.cos, eng.m, eng.msin = propagator(dt, g.kmag_r)
    eng.dt = dt
    n_half = g.N // 2 + 1
    h_r = None if control_slice is None or not np.any(control_slice) else np.asarray(control_slice)[..., :n_half]
    dw = None if noise_increment is None else noise_increment.values
    f_hat = eng.forcing_hat(u.values, None, dw, h_r)
    u_hat, v_hat = eng.advance(g.rfft(u.values), g.rfft(v.values), f_hat)
    return Field(g, g.irfft(u_hat)), Field(g, g.irfft(v_hat))


NoiseSource = NoiseIncrements | int | None


def integrate(
    config: SolverConfig,
    control: Control | None = None,
    noise: NoiseSource = None,
    replicates: Sequence[int] = (0,),
    on_step: Callable[[int, np.ndarray], None] | None = None,
    forcing_from: np.ndarray | None = None,
    keep_velocity: bool = False,
):
    """Core time loop over a batch of replicates.

    ``noise`` is a seed (per-replicate counter streams), explicit increments
    (single replicate) or ``None``.  ``on_step(j, u)`` receives the real batch
    ``u`` of shape ``(B, N, N, N)`` at every ``t_j`` including ``j = 0``.
    ``forcing_from`` substitutes the field used inside the coefficients at each
    step (the Picard map); otherwise the current state is used.

    Returns ``(u_hat, v_hat)`` at ``T`` (rfft layout, batched).
    """
    g = config.grid
    eng = _Engine(config)
    n_half = g.N // 2 + 1
    B = len(replicates)
    if control is not None and (control.J != config.J or control.grid != g):
        raise ValueError("control time grid does not match the configuration")
    if isinstance(noise, NoiseIncrements) and B != 1:
        raise ValueError("explicit noise increments drive a single replicate")
    use_noise = noise is not None and config.epsilon > 0

    v0 = np.broadcast_to(config.init.v0.values, (B,) + g.shape)
    u_real = np.array(v0)
    u_hat = np.broadcast_to(g.rfft(config.init.v0.values), (B,) + eng.mu_r.shape).copy()
    v_hat = np.broadcast_to(g.rfft(config.init.v0_tilde.values), (B,) + eng.mu_r.shape).copy()
    need_real = on_step is not None or not eng.u_independent

    if on_step is not None:
        on_step(0, u_real)
    for j in range(config.J):
        dw_hat = dw_real = None
        if use_noise:
            if isinstance(noise, NoiseIncrements):
                dw_real = noise.increments[j][None]
            else:
                dw_hat = eng.noise_hat(int(noise), replicates, j)
        h_r = _control_slice(control, j, n_half)
        u_arg = u_real if forcing_from is None else forcing_from[j][None]
        f_hat = eng.forcing_hat(u_arg, dw_hat, dw_real, h_r)
        u_hat, v_hat = eng.advance(u_hat, v_hat, f_hat)
        _check_finite(u_hat, j + 1)
        if need_real:
            u_real = g.irfft(u_hat)
        if on_step is not None:
            on_step(j + 1, u_real)
    return u_hat, v_hat


def solve(
    config: SolverConfig,
    control: Control | None = None,
    noise: NoiseSource = None,
    replicate: int = 0,
) -> Trajectory:
    """Full trajectory of the controlled equation; deterministic given its inputs."""
    snaps = np.empty((config.J + 1,) + config.grid.shape)

    def record(j, u):
        snaps[j] = u[0]

    integrate(config, control, noise, (replicate,), on_step=record)
    snaps[0] = config.init.v0.values
    return Trajectory(config, config.times, snaps)


def homogeneous_trajectory(config: SolverConfig) -> np.ndarray:
    """``w(t_j)`` propagated by the scheme's own rotation (no forcing)."""
    zero = config.replace(coeffs=CoefficientSpec(Coefficient("constant", (0.0,)), Coefficient("constant", (0.0,))))
    return solve(zero).snapshots


def picard_solve(
    config: SolverConfig,
    control: Control | None,
    noise: NoiseIncrements | None,
    tol: float | None = None,
    max_iter: int | None = None,
):
    """Successive substitution ``u^(n+1) = Phi(u^(n))`` from ``u^(0) = w``.

    Returns ``(trajectory, iterations, gaps)`` where ``gaps[n-1]`` is the sup
    over ``(j, x)`` of ``|u^(n) - u^(n-1)|``.
    """
    tol = config.picard_tol if tol is None else tol
    max_iter = config.J + 2 if max_iter is None else max_iter
    prev = homogeneous_trajectory(config)
    gaps = []
    for it in range(1, max_iter + 1):
        snaps = np.empty_like(prev)

        def record(j, u):
            snaps[j] = u[0]

        integrate(config, control, noise, (0,), on_step=record, forcing_from=prev)
        snaps[0] = config.init.v0.values
        gap = float(np.max(np.abs(snaps - prev)))
        gaps.append(gap)
        prev = snaps
        if gap <= tol:
            return Trajectory(config, config.times, snaps), it, gaps
    raise PicardDivergence(f"Picard iteration did not reach tol={tol} in {max_iter} iterates", gaps)


def additive_variance_field(config: SolverConfig) -> np.ndarray:
    """Per-mode weights ``sum_j dt mu_k m(T - t_j, xi_k)^2 / V`` on the full lattice.

    Summing them gives the variance of ``u(T, x) - w(T, x)`` for unit ``sigma``
    and ``eps = 1`` under the scheme.
    """
    g = config.grid
    mu = density_table(config.spec, g)
    acc = np.zeros(g.shape)
    for j in range(config.J):
        _, m, _ = propagator(config.T - j * config.dt, g.kmag)
        acc += m * m
    return config.dt * acc * mu / g.volume
