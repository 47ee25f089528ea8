"""Differential operators of the vorticity formulation.

The ``*_hat`` kernels work on coefficient arrays and are what the solvers
call; the Field-level wrappers validate ranks and grids.
"""

from __future__ import annotations

import numpy as np

from .spectral import Field, Grid, _same_grid


def curl_hat(grid: Grid, h: np.ndarray) -> np.ndarray:
    d1, d2, d3 = (grid.multiplier(j, 1) for j in range(3))
    return np.stack([d2 * h[2] - d3 * h[1], d3 * h[0] - d1 * h[2], d1 * h[1] - d2 * h[0]])


def div_tensor_hat(grid: Grid, h: np.ndarray) -> np.ndarray:
    d = [grid.multiplier(j, 1) for j in range(3)]
    return np.stack([d[0] * h[i, 0] + d[1] * h[i, 1] + d[2] * h[i, 2] for i in range(3)])


def grad_values(grid: Grid, h: np.ndarray) -> np.ndarray:
    """Nodal gradient with the derivative index last."""
    d = [grid.multiplier(j, 1) for j in range(3)]
    stacked = np.stack([h * dj for dj in d], axis=h.ndim - 3)
    return grid.backward(stacked)


def velocity_hat(grid: Grid, w: np.ndarray) -> np.ndarray:
    """Solve curl u = w, div u = 0, mean(u) = 0 mode by mode."""
    d = [grid.multiplier(j, 1) for j in range(3)]
    dsq = -(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).real
    dsq = np.where(dsq == 0.0, 1.0, dsq)
    return curl_hat(grid, w) / dsq


def omega_values(gv: np.ndarray, gu: np.ndarray) -> np.ndarray:
    """Nodal Omega(v, u) from gradients gv[i, j] = d_j v^i, gu likewise.

    Omega_i = eps_ilm (d_l v^j)(d_j u^m), built from M = gu . gv.
    """
    m = np.einsum("mj...,jl...->ml...", gu, gv)
    return np.stack([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])


def advect_values(v: np.ndarray, gf: np.ndarray) -> np.ndarray:
    """(v . grad) f at the nodes from v and the gradient of f (derivative index last)."""
    return sum(v[j] * gf[..., j, :, :, :] for j in range(3))


def _require(f: Field, rank: int, name: str):
    if f.rank != rank:
        raise ValueError(f"{name} needs a rank-{rank} field, got rank {f.rank}")


def curl(f: Field) -> Field:
    _require(f, 1, "curl")
    return Field(f.grid, hat=curl_hat(f.grid, f.hat))


def curl_div_tensor(sigma: Field) -> Field:
    """curl(div sigma) with (div sigma)_i = d_j sigma_ij."""
    _require(sigma, 2, "curl_div_tensor")
    g = sigma.grid
    return Field(g, hat=curl_hat(g, div_tensor_hat(g, sigma.hat)))


def omega_nonlinear(v: Field, u: Field) -> Field:
    """Dealiased Omega(v, u) so that curl((v.grad)u) = (v.grad)(curl u) + Omega(v, u)."""
    _require(v, 1, "omega_nonlinear")
    _require(u, 1, "omega_nonlinear")
    _same_grid(v.grid, u.grid)
    g = v.grid
    gv = grad_values(g, g.truncate(v.hat))
    gu = grad_values(g, g.truncate(u.hat))
    return Field(g, hat=g.truncate(g.forward(omega_values(gv, gu))))


def advect(v: Field, f: Field) -> Field:
    """Dealiased (v . grad) f for scalar, vector or tensor f."""
    _require(v, 1, "advect")
    _same_grid(v.grid, f.grid)
    g = v.grid
    vv = g.backward(g.truncate(v.hat))
    gf = grad_values(g, g.truncate(f.hat))
    return Field(g, hat=g.truncate(g.forward(advect_values(vv, gf))), symmetric=f.symmetric)


def velocity_from_vorticity(w: Field, tol: float = 1e-10) -> Field:
    """Recover the mean-zero solenoidal u with curl u = w.

    Raises ValueError when w has a mean, which no periodic velocity can produce.
    """
    _require(w, 1, "velocity_from_vorticity")
    scale = max(1.0, float(np.max(np.abs(w.hat))))
    if np.max(np.abs(w.mean())) > tol * scale:
        raise ValueError("vorticity has nonzero mean")
    return Field(w.grid, hat=velocity_hat(w.grid, w.hat))
