"""Physical parameters, forcing, and the simulation state."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .spectral import Field, Grid, project_mean_zero, project_solenoidal
from .vorticity import curl, curl_hat, velocity_from_vorticity


class SimulationAborted(RuntimeError):
    """Raised when a run produces non-finite data; carries the last good state."""

    def __init__(self, message: str, last_state: "SimState"):
        super().__init__(message)
        self.last_state = last_state


class CFLError(ValueError):
    """Raised when the requested step violates the advective stability limit."""

    def __init__(self, dt: float, dt_max: float):
        super().__init__(f"dt={dt:g} violates the CFL limit; use dt <= {dt_max:.6g}")
        self.dt = dt
        self.dt_max = dt_max


@dataclass(frozen=True)
class PhysParams:
    """Viscosity ratio nu, Reynolds number re, Weissenberg number wi, stress diffusion eps."""

    nu: float
    re: float
    wi: float
    eps: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.nu <= 1.0:
            raise ValueError(f"nu must lie in (0, 1], got {self.nu}")
        if not self.re > 0.0:
            raise ValueError(f"re must be positive, got {self.re}")
        if not self.wi > 0.0:
            raise ValueError(f"wi must be positive, got {self.wi}")
        if not self.eps >= 0.0:
            raise ValueError(f"eps must be non-negative, got {self.eps}")

    @property
    def alpha(self) -> float:
        return self.nu / self.re

    @property
    def beta(self) -> float:
        return 1.0 / self.re

    @property
    def gamma(self) -> float:
        return 1.0 / self.wi

    @property
    def delta(self) -> float:
        return (1.0 - self.nu) / self.wi**2

    def with_eps(self, eps: float) -> "PhysParams":
        return PhysParams(self.nu, self.re, self.wi, eps)


FORCING_KINDS = ("none", "sinusoidal", "field")


@dataclass(frozen=True, eq=False)
class ForcingSpec:
    """Body force F(x, t) = amplitude * P(x) * cos(2 pi frequency t).

    For kind "sinusoidal", P = (sin 2 pi m y, sin 2 pi m z, sin 2 pi m x)
    with m = wavenumber. Kind "field" takes P from ``pattern``.
    """

    kind: str = "none"
    amplitude: float = 0.0
    frequency: float = 0.0
    wavenumber: int = 1
    pattern: Field | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in FORCING_KINDS:
            raise ValueError(f"unknown forcing kind {self.kind!r}")
        if not math.isfinite(self.amplitude) or not math.isfinite(self.frequency):
            raise ValueError("forcing amplitude and frequency must be finite")
        if self.kind == "sinusoidal" and (int(self.wavenumber) != self.wavenumber or self.wavenumber < 1):
            raise ValueError("forcing wavenumber must be a positive integer")
        if self.kind == "field":
            if self.pattern is None or self.pattern.rank != 1:
                raise ValueError("field forcing needs a vector pattern")
            if np.max(np.abs(self.pattern.mean())) > 1e-12 * max(1.0, np.max(np.abs(self.pattern.hat))):
                raise ValueError("forcing pattern has nonzero mean")

    @property
    def active(self) -> bool:
        return self.kind != "none" and self.amplitude != 0.0

    def pattern_hat(self, grid: Grid) -> np.ndarray:
        if grid not in self._cache:
            if self.kind == "field":
                if self.pattern.grid != grid:
                    raise ValueError("forcing pattern lives on another grid")
                hat = np.array(self.pattern.hat)
            elif self.kind == "sinusoidal":
                x, y, z = grid.nodes
                m = 2.0 * np.pi * self.wavenumber
                vals = np.stack([np.broadcast_to(c, grid.shape) for c in (np.sin(m * y), np.sin(m * z), np.sin(m * x))])
                hat = grid.forward(vals)
            else:
                hat = np.zeros((3,) + grid.spectral_shape, dtype=complex)
            self._cache[grid] = hat
        return self._cache[grid]

    def time_factor(self, t: float) -> float:
        if not self.active:
            return 0.0
        return self.amplitude * math.cos(2.0 * math.pi * self.frequency * t)

    def hat(self, grid: Grid, t: float) -> np.ndarray:
        return self.pattern_hat(grid) * self.time_factor(t)

    def as_field(self, grid: Grid, t: float) -> Field:
        return Field(grid, hat=self.hat(grid, t))

    def curl_hat(self, grid: Grid, t: float) -> np.ndarray:
        return curl_hat(grid, self.hat(grid, t))

    def sup_l2_sq(self, grid: Grid) -> float:
        """sup over t of ||F(t)||^2."""
        if not self.active:
            return 0.0
        return self.amplitude**2 * grid.parseval(self.pattern_hat(grid))

    def l2_sq(self, grid: Grid, t: float) -> float:
        return self.time_factor(t) ** 2 * grid.parseval(self.pattern_hat(grid))


NO_FORCING = ForcingSpec()


@dataclass(frozen=True, eq=False)
class SimState:
    """Time, vorticity, conformation tensor and the velocity recovered from the vorticity."""

    t: float
    omega: Field
    sigma: Field
    u: Field

    @property
    def grid(self) -> Grid:
        return self.omega.grid

    @classmethod
    def from_velocity(cls, t: float, u: Field, sigma: Field) -> "SimState":
        if u.rank != 1 or sigma.rank != 2:
            raise ValueError("need a vector velocity and a rank-2 conformation tensor")
        if u.grid != sigma.grid:
            raise ValueError("velocity and conformation tensor on different grids")
        u = project_solenoidal(project_mean_zero(u))
        return cls(float(t), curl(u), sigma.symmetrized(), u)

    @classmethod
    def from_vorticity(cls, t: float, omega: Field, sigma: Field) -> "SimState":
        return cls(float(t), omega, sigma, velocity_from_vorticity(omega))

    def is_finite(self) -> bool:
        return self.omega.is_finite() and self.sigma.is_finite()
