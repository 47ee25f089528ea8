"""Stress-diffusive branch: vorticity and conformation tensor advanced together.

Both equations are split into a diagonal linear part, integrated exactly
per Fourier mode, and an explicit nonlinear part handled by a two-stage
exponential Runge-Kutta scheme of order two.
"""

from __future__ import annotations

import logging
import math

import numpy as np

from .model import CFLError, ForcingSpec, NO_FORCING, PhysParams, SimState, SimulationAborted
from .mollifier import Mollifier
from .spectral import Field, Grid, project_solenoidal_hat
from .vorticity import (
    advect_values,
    curl_hat,
    div_tensor_hat,
    grad_values,
    velocity_hat,
)

log = logging.getLogger(__name__)

SYM = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))
DIAG = (0, 1, 2)


def to_sym6(a: np.ndarray) -> np.ndarray:
    return np.stack([a[i, j] for i, j in SYM])


def from_sym6(a: np.ndarray) -> np.ndarray:
    full = [[None] * 3 for _ in range(3)]
    for c, (i, j) in enumerate(SYM):
        full[i][j] = a[c]
        full[j][i] = a[c]
    return np.stack([np.stack(row) for row in full])


def phi_functions(z: np.ndarray):
    """exp(z), phi1(z) = (e^z - 1)/z and phi2(z) = (e^z - 1 - z)/z^2 for real z <= 0."""
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < 0.05
    zs = np.where(small, z, 0.0)
    zb = np.where(small, -1.0, z)
    em1 = np.expm1(zb)
    phi1 = np.where(small, _series(zs, 1), em1 / zb)
    phi2 = np.where(small, _series(zs, 2), (em1 - zb) / zb**2)
    return np.exp(z), phi1, phi2


def _series(z, order, terms=10):
    out = np.zeros_like(z)
    for k in range(terms - 1, -1, -1):
        out = out * z + 1.0 / math.factorial(k + order)
    return out


class Integrator:
    """Shared machinery for both branches on one grid with fixed parameters."""

    def __init__(self, grid: Grid, p: PhysParams, F: ForcingSpec, J: Mollifier):
        if J.grid != grid:
            raise ValueError("mollifier built for a different grid")
        self.grid = grid
        self.p = p
        self.F = F if F is not None else NO_FORCING
        self.J = J
        self._coef = {}

    def coefficients(self, dt: float):
        if dt not in self._coef:
            g, p = self.grid, self.p
            zw = -p.alpha * g.kappa_sq * dt
            zs = -(p.eps * g.kappa_sq + p.gamma) * dt
            self._coef[dt] = (phi_functions(zw), phi_functions(zs))
        return self._coef[dt]

    def max_velocity(self, u_hat: np.ndarray) -> float:
        v = self.grid.backward(self.J.apply_hat(u_hat))
        return float(np.sqrt(np.max(np.sum(v * v, axis=0))))

    def cfl_limit(self, u_hat: np.ndarray) -> float:
        vmax = self.max_velocity(u_hat)
        return math.inf if vmax == 0.0 else 1.0 / (vmax * max(self.grid.shape))

    def check_cfl(self, u_hat: np.ndarray, dt: float):
        limit = self.cfl_limit(u_hat)
        if dt > limit:
            raise CFLError(dt, limit)

    def stress_source_hat(self, s_hat: np.ndarray) -> np.ndarray:
        """beta * curl div J sigma, truncated to the retained band."""
        g = self.grid
        js = self.J.apply_hat(s_hat)
        return g.truncate(self.p.beta * curl_hat(g, div_tensor_hat(g, js)))

    def vorticity_terms(self, t: float, w_hat, u_hat, v_hat, v=None):
        """Explicit part of the vorticity equation without the stress source.

        (Ju.grad) omega + Omega(Ju, u) is formed as curl((Ju.grad) u), which is
        the same dealiased quantity and needs fewer transforms.
        """
        g = self.grid
        if v is None:
            v = g.backward(v_hat)
        gu = grad_values(g, u_hat)
        adv = g.truncate(g.forward(advect_values(v, gu)))
        out = -curl_hat(g, adv)
        if self.F.active:
            out = out + g.truncate(self.p.beta * self.F.curl_hat(g, t))
        return out

    def sigma_terms(self, s6_hat, v, gv):
        """delta I - (v.grad) sigma + gv sigma + sigma gv^T, six components."""
        g = self.grid
        s6 = g.backward(s6_hat)
        gs6 = grad_values(g, s6_hat)
        s = from_sym6(s6)
        stretch = np.einsum("ik...,kj...->ij...", gv, s)
        rhs6 = -advect_values(v, gs6) + to_sym6(stretch + np.swapaxes(stretch, 0, 1))
        out = g.truncate(g.forward(rhs6))
        out[DIAG, 0, 0, 0] += self.p.delta
        return out

    def project_vorticity(self, w_hat: np.ndarray) -> np.ndarray:
        w_hat = project_solenoidal_hat(self.grid, w_hat)
        w_hat[:, 0, 0, 0] = 0.0
        return w_hat

    def coupled_rhs(self, t, w_hat, s6_hat):
        u_hat = velocity_hat(self.grid, w_hat)
        v_hat = self.J.apply_hat(u_hat)
        g = self.grid
        v = g.backward(v_hat)
        gv = grad_values(g, v_hat)
        nw = self.vorticity_terms(t, w_hat, u_hat, v_hat, v)
        nw = nw + self.stress_source_hat(from_sym6(s6_hat))
        ns = self.sigma_terms(s6_hat, v, gv)
        return nw, ns

    def step_coupled(self, t, w_hat, s6_hat, dt):
        (ew, p1w, p2w), (es, p1s, p2s) = self.coefficients(dt)
        nw0, ns0 = self.coupled_rhs(t, w_hat, s6_hat)
        aw = self.project_vorticity(ew * w_hat + dt * p1w * nw0)
        as_ = es * s6_hat + dt * p1s * ns0
        nw1, ns1 = self.coupled_rhs(t + dt, aw, as_)
        w1 = self.project_vorticity(aw + dt * p2w * (nw1 - nw0))
        s1 = as_ + dt * p2s * (ns1 - ns0)
        return w1, s1

    def step_vorticity(self, t, w_hat, source_hat, dt):
        """Vorticity step with the stress source frozen at ``source_hat``."""
        (ew, p1w, p2w), _ = self.coefficients(dt)

        def rhs(tt, wh):
            u_hat = velocity_hat(self.grid, wh)
            return self.vorticity_terms(tt, wh, u_hat, self.J.apply_hat(u_hat)) + source_hat

        n0 = rhs(t, w_hat)
        a = self.project_vorticity(ew * w_hat + dt * p1w * n0)
        n1 = rhs(t + dt, a)
        return self.project_vorticity(a + dt * p2w * (n1 - n0))

    def state(self, t, w_hat, s6_hat, sigma_symmetric=True) -> SimState:
        g = self.grid
        w = Field(g, hat=w_hat)
        u = Field(g, hat=velocity_hat(g, w_hat))
        s = Field(g, hat=from_sym6(s6_hat), symmetric=sigma_symmetric)
        return SimState(float(t), w, s, u)


def _prepare(init: SimState, grid: Grid, truncate: bool):
    w_hat = np.array(init.omega.hat)
    s6 = to_sym6(np.array(init.sigma.symmetrized().hat))
    if truncate:
        w_hat = grid.truncate(w_hat)
        s6 = grid.truncate(s6)
    return w_hat, s6


def rhs_vorticity(s: SimState, p: PhysParams, F: ForcingSpec, J: Mollifier) -> Field:
    """beta curl div J sigma - (Ju.grad) omega - Omega(Ju, u) + beta curl F, dealiased."""
    it = Integrator(s.grid, p, F, J)
    g = s.grid
    w_hat = g.truncate(s.omega.hat)
    u_hat = velocity_hat(g, w_hat)
    nw = it.vorticity_terms(s.t, w_hat, u_hat, J.apply_hat(u_hat))
    nw = nw + it.stress_source_hat(g.truncate(s.sigma.hat))
    return Field(g, hat=nw)


def rhs_sigma(s: SimState, p: PhysParams, J: Mollifier) -> Field:
    """delta I - (Ju.grad) sigma + (grad Ju) sigma + sigma (grad Ju)^T - gamma sigma, dealiased."""
    g = s.grid
    it = Integrator(g, p, NO_FORCING, J)
    u_hat = velocity_hat(g, g.truncate(s.omega.hat))
    v_hat = J.apply_hat(u_hat)
    s6 = g.truncate(to_sym6(s.sigma.symmetrized().hat))
    ns = it.sigma_terms(s6, g.backward(v_hat), grad_values(g, v_hat)) - p.gamma * s6
    return Field(g, hat=from_sym6(ns), symmetric=True)


def step_imex(s: SimState, p: PhysParams, F: ForcingSpec, J: Mollifier, dt: float) -> SimState:
    """One step of the coupled scheme; requires eps > 0 and a CFL-admissible dt."""
    if p.eps <= 0.0:
        raise ValueError("the diffusive scheme needs eps > 0")
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    it = Integrator(s.grid, p, F, J)
    w_hat, s6 = _prepare(s, s.grid, truncate=True)
    it.check_cfl(velocity_hat(s.grid, w_hat), dt)
    w1, s1 = it.step_coupled(s.t, w_hat, s6, dt)
    out = it.state(s.t + dt, w1, s1)
    if not out.is_finite():
        raise SimulationAborted(f"non-finite data at t={s.t + dt:g}", s)
    return out


def step_count(T: float, dt: float) -> int:
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    if T == 0.0:
        return 0
    if not T > 0.0:
        raise ValueError("T must be non-negative")
    n = max(1, round(T / dt))
    if abs(n * dt - T) > 1e-9 * T:
        raise ValueError(f"T={T:g} is not a whole number of steps dt={dt:g}")
    return n


def emit(sink, state: SimState):
    if sink is None:
        return
    if callable(sink):
        sink(state)
    else:
        for s in sink:
            s(state)


def _warn_if_indefinite(sigma: Field):
    v = sigma.values
    low = np.min(np.linalg.eigvalsh(np.moveaxis(0.5 * (v + np.swapaxes(v, 0, 1)), (0, 1), (-2, -1)))[..., 0])
    if low < -1e-8 * (1.0 + float(np.max(np.abs(v)))):
        log.warning("initial sigma is not positive semi-definite (min eigenvalue %.3g)", low)


def run_diffusive(init: SimState, p: PhysParams, F: ForcingSpec, J: Mollifier, T: float, dt: float,
                  sink=None, diag_stride: int = 1) -> SimState:
    """Integrate to time init.t + T, calling ``sink(state)`` at t0, every diag_stride steps and at the end.

    Non-finite data aborts the run with SimulationAborted carrying the last
    good state; a step above the CFL limit raises CFLError.
    """
    if p.eps <= 0.0:
        raise ValueError("the diffusive scheme needs eps > 0")
    if diag_stride < 1:
        raise ValueError("diag_stride must be at least 1")
    grid = init.grid
    nsteps = step_count(T, dt)
    if nsteps == 0:
        emit(sink, init)
        return init
    _warn_if_indefinite(init.sigma)
    it = Integrator(grid, p, F, J)
    w_hat, s6 = _prepare(init, grid, truncate=True)
    state = it.state(init.t, w_hat, s6)
    emit(sink, state)
    t0 = init.t
    for n in range(1, nsteps + 1):
        it.check_cfl(velocity_hat(grid, w_hat), dt)
        t = t0 + (n - 1) * dt
        w_new, s_new = it.step_coupled(t, w_hat, s6, dt)
        if not (np.all(np.isfinite(w_new)) and np.all(np.isfinite(s_new))):
            raise SimulationAborted(f"non-finite data at t={t + dt:g}", state)
        w_hat, s6 = w_new, s_new
        if n % diag_stride == 0 or n == nsteps:
            state = it.state(t0 + n * dt, w_hat, s6)
            emit(sink, state)
    return it.state(t0 + nsteps * dt, w_hat, s6)
