"""Fourier collocation on the unit periodic box [0, 1)^3.

Fields are stored as real nodal values on a uniform grid and/or as the
coefficients of a real FFT over the last three axes, normalised so that
the zero mode equals the mean. Wavenumbers are integers k, the derivative
symbol along axis i is 2*pi*i*k_i and the domain volume is 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
import numpy as np

try:  # FFTW is several times faster than pocketfft at these sizes
    import pyfftw
    import pyfftw.interfaces.scipy_fft as sfft

    pyfftw.interfaces.cache.enable()
    pyfftw.interfaces.cache.set_keepalive_time(60.0)
except ImportError:  # pragma: no cover
    import scipy.fft as sfft

AXES = (-3, -2, -1)

_COMPONENT_SHAPES = {(): 0, (3,): 1, (3, 3): 2}


@dataclass(frozen=True)
class Grid:
    """Uniform grid with n1 x n2 x n3 nodes at x_j = j / n."""

    n1: int
    n2: int
    n3: int

    def __post_init__(self):
        for n in self.shape:
            if int(n) != n or n < 4 or n % 2:
                raise ValueError(f"grid sizes must be even integers >= 4, got {self.shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n1, self.n2, self.n3)

    @property
    def size(self) -> int:
        return self.n1 * self.n2 * self.n3

    @property
    def spectral_shape(self) -> tuple[int, int, int]:
        return (self.n1, self.n2, self.n3 // 2 + 1)

    @cached_property
    def wavenumbers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Integer wavenumbers per axis, broadcastable, Nyquist counted as +n/2."""
        out = []
        for axis, n in enumerate(self.shape):
            if axis == 2:
                k = np.arange(n // 2 + 1)
            else:
                k = np.fft.fftfreq(n, 1.0 / n).astype(int)
                k[n // 2] = n // 2
            shape = [1, 1, 1]
            shape[axis] = k.size
            out.append(k.reshape(shape))
        return tuple(out)

    @cached_property
    def kappa(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(2.0 * np.pi * k for k in self.wavenumbers)

    @cached_property
    def kappa_sq(self) -> np.ndarray:
        k1, k2, k3 = self.kappa
        return k1**2 + k2**2 + k3**2

    @cached_property
    def _multipliers(self) -> dict:
        return {}

    def multiplier(self, axis: int, order: int) -> np.ndarray:
        """Symbol of d^order/dx_axis^order; odd orders vanish on the Nyquist line."""
        key = (axis, order)
        cache = self._multipliers
        if key not in cache:
            k = self.wavenumbers[axis]
            m = (1j * self.kappa[axis]) ** order
            if order % 2:
                m = np.where(2 * k == self.shape[axis], 0.0, m)
            cache[key] = m
        return cache[key]

    def symbol(self, index) -> np.ndarray | complex:
        """Symbol of the mixed partial D^index, index a triple of orders."""
        out = 1.0
        for axis, order in enumerate(index):
            if order:
                out = out * self.multiplier(axis, order)
        return out

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        """Two-thirds rule: keep modes with 3|k_i| < n_i on every axis."""
        mask = np.ones(self.spectral_shape, dtype=bool)
        for k, n in zip(self.wavenumbers, self.shape):
            mask &= 3 * np.abs(k) < n
        return mask

    @cached_property
    def cutoff(self) -> tuple[int, int, int]:
        """Largest retained |k_i| per axis under the dealiasing rule."""
        return tuple((n - 1) // 3 for n in self.shape)

    @cached_property
    def hermitian_weight(self) -> np.ndarray:
        """Multiplicity of each stored half-spectrum mode in the full spectrum."""
        w = np.full(self.n3 // 2 + 1, 2.0)
        w[0] = 1.0
        w[-1] = 1.0
        return np.broadcast_to(w.reshape(1, 1, -1), self.spectral_shape)

    @cached_property
    def nodes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        out = []
        for axis, n in enumerate(self.shape):
            shape = [1, 1, 1]
            shape[axis] = n
            out.append((np.arange(n) / n).reshape(shape))
        return tuple(out)

    def coordinates(self) -> np.ndarray:
        """Nodal coordinates with shape (3, n1, n2, n3)."""
        return np.stack(np.broadcast_arrays(*self.nodes))

    def forward(self, values: np.ndarray) -> np.ndarray:
        return sfft.rfftn(values, axes=AXES, norm="forward")

    def backward(self, hat: np.ndarray) -> np.ndarray:
        return sfft.irfftn(hat, s=self.shape, axes=AXES, norm="forward")

    def truncate(self, hat: np.ndarray) -> np.ndarray:
        return hat * self.dealias_mask

    def parseval(self, a: np.ndarray, b: np.ndarray | None = None) -> float:
        """Integral of a*b (or a^2) over the box from half-spectrum coefficients."""
        if b is None:
            s = a.real**2 + a.imag**2
        else:
            s = (a * np.conj(b)).real
        s = s.reshape((-1,) + self.spectral_shape)
        return float(np.sum(s * self.hermitian_weight))


class Field:
    """Scalar, vector or rank-2 tensor field on a Grid.

    Either representation may be supplied; the other is computed on first
    access and cached. Both arrays are read-only, so a Field is immutable.
    """

    __slots__ = ("grid", "_hat", "_values", "symmetric")

    def __init__(self, grid: Grid, *, hat=None, values=None, symmetric: bool = False):
        if hat is None and values is None:
            raise ValueError("Field needs spectral or nodal data")
        self.grid = grid
        self._hat = None
        self._values = None
        if values is not None:
            values = np.array(values, dtype=float)
            _check_shape(values.shape, grid.shape)
            values.setflags(write=False)
            self._values = values
        if hat is not None:
            hat = np.array(hat, dtype=complex)
            _check_shape(hat.shape, grid.spectral_shape)
            hat.setflags(write=False)
            self._hat = hat
        self.symmetric = bool(symmetric)
        if self.symmetric and self.rank != 2:
            raise ValueError("only rank-2 fields can be flagged symmetric")

    @property
    def hat(self) -> np.ndarray:
        if self._hat is None:
            hat = self.grid.forward(self._values)
            hat.setflags(write=False)
            self._hat = hat
        return self._hat

    @property
    def values(self) -> np.ndarray:
        if self._values is None:
            values = self.grid.backward(self._hat)
            values.setflags(write=False)
            self._values = values
        return self._values

    @property
    def component_shape(self) -> tuple:
        data = self._values if self._values is not None else self._hat
        return data.shape[:-3]

    @property
    def rank(self) -> int:
        return _COMPONENT_SHAPES[self.component_shape]

    def __repr__(self):
        return f"Field(rank={self.rank}, grid={self.grid.shape})"

    def __getitem__(self, idx) -> "Field":
        if self.rank == 0:
            raise IndexError("scalar field has no components")
        if self._hat is not None:
            return Field(self.grid, hat=self._hat[idx])
        return Field(self.grid, values=self._values[idx])

    @staticmethod
    def stack(fields) -> "Field":
        fields = list(fields)
        grid = fields[0].grid
        for f in fields:
            _same_grid(grid, f.grid)
        return Field(grid, hat=np.stack([f.hat for f in fields]))

    def _binary(self, other, op):
        if isinstance(other, Field):
            _same_grid(self.grid, other.grid)
            if self.component_shape != other.component_shape:
                raise ValueError("rank mismatch between fields")
            sym = self.symmetric and other.symmetric
            if self._values is not None and other._values is not None and (
                self._hat is None or other._hat is None
            ):
                return Field(self.grid, values=op(self._values, other._values), symmetric=sym)
            return Field(self.grid, hat=op(self.hat, other.hat), symmetric=sym)
        if np.ndim(other) != 0:
            raise TypeError("fields combine only with fields or scalars")
        raise TypeError("use scalar multiplication for constants")

    def __add__(self, other):
        return self._binary(other, np.add)

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __mul__(self, c):
        if isinstance(c, Field) or np.ndim(c) != 0:
            raise TypeError("pointwise products go through dealiased_product")
        if self._hat is not None:
            return Field(self.grid, hat=self._hat * c, symmetric=self.symmetric)
        return Field(self.grid, values=self._values * c, symmetric=self.symmetric)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def mean(self) -> np.ndarray:
        return self.hat[..., 0, 0, 0].real.copy()

    def transpose(self) -> "Field":
        if self.rank != 2:
            raise ValueError("transpose needs a rank-2 field")
        return Field(self.grid, hat=np.swapaxes(self.hat, 0, 1), symmetric=self.symmetric)

    def symmetrized(self) -> "Field":
        if self.rank != 2:
            raise ValueError("symmetrization needs a rank-2 field")
        h = self.hat
        return Field(self.grid, hat=0.5 * (h + np.swapaxes(h, 0, 1)), symmetric=True)

    def dealiased(self) -> "Field":
        return Field(self.grid, hat=self.grid.truncate(self.hat), symmetric=self.symmetric)

    def is_finite(self) -> bool:
        data = self._hat if self._hat is not None else self._values
        return bool(np.all(np.isfinite(data)))


def _check_shape(shape, grid_shape):
    if tuple(shape[-3:]) != tuple(grid_shape) or tuple(shape[:-3]) not in _COMPONENT_SHAPES:
        raise ValueError(f"array shape {shape} does not fit grid {grid_shape}")


def _same_grid(a: Grid, b: Grid):
    if a != b:
        raise ValueError(f"grid mismatch: {a.shape} vs {b.shape}")


def constant(grid: Grid, value) -> Field:
    value = np.asarray(value, dtype=float)
    hat = np.zeros(value.shape + grid.spectral_shape, dtype=complex)
    hat[..., 0, 0, 0] = value
    return Field(grid, hat=hat, symmetric=value.shape == (3, 3) and np.allclose(value, value.T))


def identity_tensor(grid: Grid) -> Field:
    return constant(grid, np.eye(3))


def derivative(f: Field, axis: int, order: int = 1) -> Field:
    """d^order f / dx_axis^order, axis in {0, 1, 2}."""
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    if order < 0:
        raise ValueError("derivative order must be non-negative")
    return Field(f.grid, hat=f.hat * f.grid.multiplier(axis, order))


def partial(f: Field, index) -> Field:
    """Mixed partial D^index with index = (l1, l2, l3), applied in one multiplication."""
    index = tuple(int(i) for i in index)
    if len(index) != 3 or min(index) < 0:
        raise ValueError(f"bad multi-index {index}")
    return Field(f.grid, hat=f.hat * f.grid.symbol(index))


def multi_indices(max_order: int, exact: bool = False):
    """Multi-indices of total order <= max_order (or == with exact=True), graded."""
    out = []
    for total in range(max_order + 1):
        if exact and total != max_order:
            continue
        for a in range(total, -1, -1):
            for b in range(total - a, -1, -1):
                out.append((a, b, total - a - b))
    return out


def gradient(f: Field) -> Field:
    """Gradient with the derivative index last: gradient(u)[i, j] = d_j u^i."""
    if f.rank > 1:
        raise ValueError("gradient is defined for scalar and vector fields")
    g = f.grid
    return Field(g, hat=np.stack([f.hat * g.multiplier(j, 1) for j in range(3)], axis=f.rank))


def divergence(f: Field) -> Field:
    """Contraction of the last index with the derivative."""
    if f.rank == 0:
        raise ValueError("divergence needs a vector or tensor field")
    g = f.grid
    h = f.hat
    return Field(g, hat=sum(h[..., j, :, :, :] * g.multiplier(j, 1) for j in range(3)))


def laplacian(f: Field) -> Field:
    return Field(f.grid, hat=-f.grid.kappa_sq * f.hat)


def dealiased_product(f: Field, g: Field) -> Field:
    """Pointwise product with the two-thirds rule, componentwise for equal ranks."""
    _same_grid(f.grid, g.grid)
    if f.component_shape != g.component_shape:
        raise ValueError("rank mismatch in dealiased_product")
    grid = f.grid
    a = grid.backward(grid.truncate(f.hat))
    b = grid.backward(grid.truncate(g.hat))
    return Field(grid, hat=grid.truncate(grid.forward(a * b)))


def l2_norm(f: Field) -> float:
    return math.sqrt(f.grid.parseval(f.hat))


def inner(f: Field, g: Field) -> float:
    _same_grid(f.grid, g.grid)
    if f.component_shape != g.component_shape:
        raise ValueError("rank mismatch in inner product")
    return f.grid.parseval(f.hat, g.hat)


def sobolev_weight(grid: Grid, m: int) -> np.ndarray:
    """Sum over |l| <= m of |symbol of D^l|^2, per stored mode."""
    if m < 0:
        raise ValueError("Sobolev index must be non-negative")
    w = np.zeros(grid.spectral_shape)
    for idx in multi_indices(m):
        w = w + np.abs(grid.symbol(idx)) ** 2
    return w


def sobolev_norm(f: Field, m: int) -> float:
    """||f||_{H^m}: square root of the sum of ||D^l f||^2 over |l| <= m."""
    w = sobolev_weight(f.grid, m)
    s = (f.hat.real**2 + f.hat.imag**2) * w
    s = s.reshape((-1,) + f.grid.spectral_shape)
    return math.sqrt(float(np.sum(s * f.grid.hermitian_weight)))


def project_mean_zero(f: Field) -> Field:
    h = np.array(f.hat)
    h[..., 0, 0, 0] = 0.0
    return Field(f.grid, hat=h, symmetric=f.symmetric)


def project_solenoidal_hat(grid: Grid, hat: np.ndarray) -> np.ndarray:
    """Leray projection of a vector field given by its coefficients."""
    d = [grid.multiplier(j, 1) for j in range(3)]
    # Nyquist lines have a zero first-derivative symbol; using the same
    # symbol in the denominator keeps the projection orthogonal there.
    dsq = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).real
    dsq = np.where(dsq == 0.0, 1.0, dsq)
    div = (d[0] * hat[0] + d[1] * hat[1] + d[2] * hat[2]) / dsq
    return np.stack([hat[i] - d[i] * div for i in range(3)])


def project_solenoidal(u: Field) -> Field:
    if u.rank != 1:
        raise ValueError("solenoidal projection needs a vector field")
    return Field(u.grid, hat=project_solenoidal_hat(u.grid, u.hat))


def band_mask(grid: Grid, kmax: int) -> np.ndarray:
    mask = np.ones(grid.spectral_shape, dtype=bool)
    for k in grid.wavenumbers:
        mask &= np.abs(k) <= kmax
    mask[0, 0, 0] = False
    return mask


def random_field(grid: Grid, seed: int, kmax: int, shape=(), amplitude: float = 1.0) -> Field:
    """Deterministic random mean-zero field band-limited to |k_i| <= kmax.

    The result is scaled to have L2 norm ``amplitude``.
    """
    if kmax < 1 or any(3 * kmax >= n for n in grid.shape):
        raise ValueError(f"kmax={kmax} must satisfy 1 <= kmax < n/3 on every axis")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(tuple(shape) + grid.shape)
    hat = grid.forward(noise) * band_mask(grid, kmax)
    norm = math.sqrt(grid.parseval(hat))
    return Field(grid, hat=hat * (amplitude / norm))


def random_divfree(grid: Grid, seed: int, kmax: int, amplitude: float = 1.0) -> Field:
    """Random solenoidal mean-zero vector field band-limited to |k_i| <= kmax."""
    if kmax < 1 or any(3 * kmax >= n for n in grid.shape):
        raise ValueError(f"kmax={kmax} must satisfy 1 <= kmax < n/3 on every axis")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((3,) + grid.shape)
    hat = project_solenoidal_hat(grid, grid.forward(noise) * band_mask(grid, kmax))
    norm = math.sqrt(grid.parseval(hat))
    return Field(grid, hat=hat * (amplitude / norm))


def symbol_monomials(grid: Grid, max_order: int):
    """Yield (index, symbol) for every multi-index of total order <= max_order."""
    for idx in multi_indices(max_order):
        yield idx, grid.symbol(idx)


def factorial_weights(index) -> float:
    return 1.0 / math.prod(math.factorial(i) for i in index)


__all__ = [
    "Grid",
    "Field",
    "constant",
    "identity_tensor",
    "derivative",
    "partial",
    "multi_indices",
    "gradient",
    "divergence",
    "laplacian",
    "dealiased_product",
    "l2_norm",
    "inner",
    "sobolev_norm",
    "sobolev_weight",
    "project_mean_zero",
    "project_solenoidal",
    "project_solenoidal_hat",
    "random_field",
    "random_divfree",
]
