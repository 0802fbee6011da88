"""Uniform periodic position grids for kernel matrices."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Grid:
    """Periodic sampling box [-half_width, half_width) with n points.

    n must be a power of two (>= 64) so every spectral operation runs on
    radix-2 FFTs; rho is the fraction of the half-width regarded as the
    trusted interior, used when sizing measurement windows.
    """

    half_width: float
    n: int
    d: int = 1
    rho: float = 0.5

    def __post_init__(self):
        if self.d != 1:
            raise ValueError("only d = 1 grids are supported")
        if not self.half_width > 0:
            raise ValueError("half_width must be positive")
        if self.n < 64 or (self.n & (self.n - 1)) != 0:
            raise ValueError("n must be a power of two, at least 64")
        if not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")

    @property
    def dx(self):
        return 2.0 * self.half_width / self.n

    @property
    def x(self):
        return -self.half_width + self.dx * np.arange(self.n)

    @property
    def k(self):
        """Angular spatial frequencies matching numpy FFT ordering."""
        return 2.0 * np.pi * np.fft.fftfreq(self.n, d=self.dx)

    @property
    def k_nyquist(self):
        return np.pi / self.dx

    @property
    def inner_half_width(self):
        return self.rho * self.half_width

    def momentum_ceiling(self, hbar):
        """Largest classical momentum the sampling can represent: hbar * pi/dx."""
        return hbar * self.k_nyquist
