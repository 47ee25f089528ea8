"""Compactly supported radial bump mollifier J acting as a Fourier multiplier."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .spectral import Field, Grid, multi_indices


def bump(r: np.ndarray, width: float) -> np.ndarray:
    """Unnormalised bump exp(-1/(1 - (r/h)^2)) supported on r < h."""
    s = np.asarray(r, dtype=float) / width
    out = np.zeros_like(s)
    inside = s < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - s[inside] ** 2))
    return out


@dataclass(frozen=True, eq=False)
class Mollifier:
    """Multiplier table of J on a grid, with J(k=0) = 1."""

    grid: Grid
    width: float
    oversample: int
    multiplier: np.ndarray = field(repr=False)

    def apply_hat(self, hat: np.ndarray) -> np.ndarray:
        return hat * self.multiplier

    def apply(self, f: Field) -> Field:
        if f.grid != self.grid:
            raise ValueError("field and mollifier live on different grids")
        return Field(self.grid, hat=f.hat * self.multiplier, symmetric=f.symmetric)

    @cached_property
    def constant(self) -> float:
        """K = sum over |l| <= 4 of ||D^l eta||_{L2}, from the tabulated multiplier."""
        g = self.grid
        total = 0.0
        for idx in multi_indices(4):
            total += math.sqrt(g.parseval(self.multiplier * g.symbol(idx)))
        return total


def build_mollifier(width: float, grid: Grid, oversample: int = 4) -> Mollifier:
    """Tabulate the Fourier multiplier of the periodised bump of radius ``width``.

    The bump is sampled on a grid refined ``oversample`` times per axis and
    its discrete transform, normalised to unit mass, gives the multiplier.
    """
    if not 0.0 < width < 0.5:
        raise ValueError(f"mollifier width must lie in (0, 1/2), got {width}")
    if int(oversample) != oversample or oversample < 1:
        raise ValueError("oversample must be a positive integer")
    fine = tuple(int(oversample) * n for n in grid.shape)
    sq = 0.0
    for axis, m in enumerate(fine):
        x = np.arange(m) / m
        x = np.minimum(x, 1.0 - x)
        shape = [1, 1, 1]
        shape[axis] = m
        sq = sq + (x**2).reshape(shape)
    eta = bump(np.sqrt(sq), width)
    hat = np.fft.rfftn(eta)
    hat = hat / hat[0, 0, 0]
    idx = tuple(np.asarray(k % m).astype(int) for k, m in zip(grid.wavenumbers, fine))
    table = hat[np.ix_(idx[0].ravel(), idx[1].ravel(), idx[2].ravel())].real.copy()
    table.setflags(write=False)
    return Mollifier(grid=grid, width=float(width), oversample=int(oversample), multiplier=table)


def apply(J: Mollifier, f: Field) -> Field:
    return J.apply(f)


def mollifier_constant(J: Mollifier) -> float:
    return J.constant
