"""Periodic 3-D lattice, real fields on it, and the ``SWE3`` binary dump format.

Arrays are stored with shape ``(N, N, N)`` indexed ``[iz, iy, ix]`` so that a
C-order flatten is row-major with x fastest, which is the on-disk layout.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.fft as sfft

MAGIC = b"SWE3"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIId")


@dataclass(frozen=True)
class Grid:
    """Periodic box ``[0, L)^3`` sampled with ``N`` points per axis."""

    L: float
    N: int

    def __post_init__(self):
        if not self.L > 0:
            raise ValueError(f"box side L must be positive, got {self.L}")
        if self.N < 4 or self.N % 2:
            raise ValueError(f"N must be even and >= 4, got {self.N}")

    @property
    def dx(self) -> float:
        return self.L / self.N

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.N, self.N, self.N)

    @property
    def volume(self) -> float:
        return self.L**3

    @property
    def cell_volume(self) -> float:
        return self.dx**3

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        """1-D angular wavenumbers ``2 pi k / L`` in FFT order."""
        return 2.0 * np.pi * np.fft.fftfreq(self.N, d=self.dx)

    @cached_property
    def kvec(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Broadcastable ``(kz, ky, kx)`` for the full FFT layout."""
        k = self.wavenumbers
        return k[:, None, None], k[None, :, None], k[None, None, :]

    @cached_property
    def kmag(self) -> np.ndarray:
        """``|xi|`` on the full FFT lattice, shape ``(N, N, N)``."""
        kz, ky, kx = self.kvec
        out = np.sqrt(kz**2 + ky**2 + kx**2)
        out.setflags(write=False)
        return out

    @cached_property
    def kmag_r(self) -> np.ndarray:
        """``|xi|`` on the half-spectrum layout used by ``rfftn``."""
        return np.ascontiguousarray(self.kmag[..., : self.N // 2 + 1])

    @cached_property
    def index_lattice(self) -> np.ndarray:
        """Integer mode indices in ``[-N/2, N/2)``, FFT order."""
        return np.fft.fftfreq(self.N, d=1.0 / self.N).astype(int)

    def coords(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Broadcastable physical coordinates ``(z, y, x)`` of the grid points."""
        x = np.arange(self.N) * self.dx
        return x[:, None, None], x[None, :, None], x[None, None, :]

    def distance_from(self, point) -> np.ndarray:
        """Minimum-image Euclidean distance of every grid point to ``point``.

        ``point`` is given in ``(x, y, z)`` order.
        """
        px, py, pz = point
        z, y, x = self.coords()
        d = []
        for c, p in ((z, pz), (y, py), (x, px)):
            r = c - p
            r = r - self.L * np.round(r / self.L)
            d.append(r)
        return np.sqrt(d[0] ** 2 + d[1] ** 2 + d[2] ** 2)

    def fft(self, values: np.ndarray) -> np.ndarray:
        """Continuum-normalised transform ``dx^3 * DFT`` over the last three axes."""
        return sfft.fftn(values, axes=(-3, -2, -1)) * self.cell_volume

    def ifft(self, coeffs: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`fft`; returns the real part."""
        out = sfft.ifftn(coeffs, axes=(-3, -2, -1)) / self.cell_volume
        return out.real

    def rfft(self, values: np.ndarray) -> np.ndarray:
        return sfft.rfftn(values, axes=(-3, -2, -1)) * self.cell_volume

    def irfft(self, coeffs: np.ndarray) -> np.ndarray:
        return sfft.irfftn(coeffs, s=self.shape, axes=(-3, -2, -1)) / self.cell_volume


@dataclass
class Field:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"field shape {self.values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite entries")

    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, FORMAT_VERSION, self.grid.N, float(self.grid.L))
        return head + np.ascontiguousarray(self.values, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Field":
        if len(data) < _HEADER.size:
            raise ValueError("truncated SWE3 header")
        magic, version, n, L = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported SWE3 version {version}")
        payload = data[_HEADER.size:]
        if len(payload) != 8 * n**3:
            raise ValueError(f"payload has {len(payload)} bytes, expected {8 * n**3}")
        values = np.frombuffer(payload, dtype="<f8").reshape(n, n, n).astype(float)
        return cls(Grid(L, n), values)

    def dump(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Field":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class Box:
    """Axis-aligned index box ``lo <= i < hi`` given in ``(x, y, z)`` order."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"empty box {self.lo}..{self.hi}")

    @classmethod
    def centered(cls, grid: Grid, half_width: int) -> "Box":
        c = grid.N // 2
        return cls((c - half_width,) * 3, (c + half_width + 1,) * 3)

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        """Array slices in ``(z, y, x)`` order."""
        return tuple(slice(l, h) for l, h in zip(self.lo[::-1], self.hi[::-1]))

    @property
    def size(self) -> int:
        return int(np.prod([h - l for l, h in zip(self.lo, self.hi)]))

    def mask(self, grid: Grid) -> np.ndarray:
        m = np.zeros(grid.shape, dtype=bool)
        m[self.slices] = True
        return m
