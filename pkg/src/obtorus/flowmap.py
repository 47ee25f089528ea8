"""Stress-free branch: conformation tensor advanced along backward characteristics.

Each step traces characteristics back from the grid nodes with RK4, carries
the Jacobian of the backward map along, and rebuilds sigma from the closed
form of the stretching ODE with relaxation and constant source.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ._kernels import taylor_contract
from .diffusive import Integrator, emit, from_sym6, step_count, to_sym6
from .model import ForcingSpec, PhysParams, SimState, SimulationAborted
from .mollifier import Mollifier
from .spectral import Field, Grid, multi_indices, sfft
from .vorticity import velocity_hat

log = logging.getLogger(__name__)

MAX_TAYLOR_ORDER = 16


class FlowMapError(RuntimeError):
    """Raised when det(a) drifts far enough from 1 to signal under-resolution."""


# ---------------------------------------------------------------------------
# off-grid evaluation


def direct_eval(grid: Grid, hats: np.ndarray, points: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Exact trigonometric interpolant of each row of ``hats`` at ``points`` (3, M)."""
    hats = hats.reshape((-1,) + grid.spectral_shape)
    w = hats * grid.hermitian_weight
    kap = [np.ravel(k) for k in grid.kappa]
    # Nyquist modes are split evenly between +n/2 and -n/2, i.e. a cosine,
    # which keeps the interpolant real and consistent with the derivative symbols.
    nyq = [np.ravel(2 * k == n) for k, n in zip(grid.wavenumbers, grid.shape)]
    m = points.shape[1]
    out = np.empty((hats.shape[0], m))
    for lo in range(0, m, chunk):
        p = points[:, lo:lo + chunk]
        e1, e2, e3 = (
            np.where(ny[:, None], np.cos(np.outer(k, x)), np.exp(1j * np.outer(k, x)))
            for k, x, ny in zip(kap, p, nyq)
        )
        t = np.einsum("cabz,zm->cabm", w, e3)
        t = np.einsum("cabm,bm->cam", t, e2)
        out[:, lo:lo + chunk] = np.einsum("cam,am->cm", t, e1).real
    return out


def _last_axis_symbols(grid: Grid) -> np.ndarray:
    """Derivative symbols along the last axis for orders 0..MAX_TAYLOR_ORDER + 2, stacked."""
    key = ("last_axis", grid.n3)
    cache = grid._multipliers
    if key not in cache:
        orders = range(MAX_TAYLOR_ORDER + 3)
        cache[key] = np.stack([np.broadcast_to(grid.multiplier(2, c), (1, 1, 1, grid.n3 // 2 + 1)) for c in orders])
    return cache[key]


class TaylorEvaluator:
    """Evaluate fields near grid nodes from Taylor expansions of their interpolant.

    The order is the smallest one whose remainder bound, summed over all
    Fourier modes, is below ``tol`` times the l1 norm of the coefficients.
    Nodal derivative fields are computed on demand, graded by total order,
    and cached in one stacked array.
    """

    def __init__(self, grid: Grid, hats: np.ndarray, tol: float = 1e-12, max_order: int = MAX_TAYLOR_ORDER,
                 fallback: bool = True):
        self.grid = grid
        self.fallback = fallback
        self.comp_shape = hats.shape[:-3]
        self.hats = hats.reshape((-1,) + grid.spectral_shape)
        self.tol = tol
        self.max_order = max_order
        self.index = multi_indices(max_order + 2)
        self.position = {idx: i for i, idx in enumerate(self.index)}
        self._lam = np.array(self.index, dtype=np.int64)
        self._stack = np.empty((0, self.hats.shape[0], grid.size))
        self._filled = 0
        self._stage1 = {}
        self._stage2 = {}
        amp = np.sum(np.abs(self.hats), axis=0) * grid.hermitian_weight
        keep = amp > 0
        self._amp = amp[keep]
        self._kap = np.stack([np.broadcast_to(np.abs(k), grid.spectral_shape)[keep] for k in grid.kappa])
        self._knorm = np.sqrt(np.sum(self._kap**2, axis=0))
        self.last_order = 0

    def _ensure(self, count: int):
        """Fill the first ``count`` graded derivative fields, sharing axis-by-axis transforms."""
        if count <= self._filled:
            return
        if count > self._stack.shape[0]:
            grown = np.empty((count,) + self._stack.shape[1:])
            grown[: self._filled] = self._stack[: self._filled]
            self._stack = grown
        g = self.grid
        groups = {}
        for pos in range(self._filled, count):
            a, b, c = self.index[pos]
            groups.setdefault((a, b), []).append((pos, c))
        for (a, b), rows in groups.items():
            if a not in self._stage1:
                self._stage1[a] = sfft.ifft(self.hats * g.multiplier(0, a), axis=-3, norm="forward")
            if (a, b) not in self._stage2:
                self._stage2[a, b] = sfft.ifft(self._stage1[a] * g.multiplier(1, b), axis=-2, norm="forward")
            st = self._stage2[a, b]
            cs = [c for _, c in rows]
            batch = st[None] * _last_axis_symbols(g)[cs]
            vals = sfft.irfft(batch, n=g.n3, axis=-1, norm="forward")
            self._stack[[pos for pos, _ in rows]] = vals.reshape(len(cs), st.shape[0], -1)
        self._filled = count

    def derivatives(self, indices):
        """Nodal D^l f for each multi-index l, shaped like the field."""
        indices = [tuple(i) for i in indices]
        self._ensure(max(self.position[i] for i in indices) + 1)
        shape = self.comp_shape + self.grid.shape
        return [self._stack[self.position[i]].reshape(shape) for i in indices]

    def order(self, rmax, extra: int = 0):
        """Smallest P with remainder bound <= tol * scale, or None above max_order."""
        if self._amp.size == 0:
            return 0
        theta = np.tensordot(np.asarray(rmax), self._kap, axes=1)
        a = self._amp * self._knorm**extra
        scale = float(np.sum(a))
        if scale == 0.0:
            return 0
        term = a.copy()
        for p in range(self.max_order + 1):
            term = term * theta / (p + 1)
            if float(np.sum(term)) <= self.tol * scale:
                return p
        return None

    def locate(self, points):
        """Nearest node index and residual for each point, points shaped (3, ...)."""
        idx = []
        res = []
        for axis, n in enumerate(self.grid.shape):
            j = np.rint(points[axis] * n)
            res.append(np.ravel(points[axis] - j / n))
            idx.append(np.mod(j.astype(np.int64), n))
        return np.ravel_multi_index(idx, self.grid.shape).ravel(), res

    def evaluate(self, points, grad: bool = False):
        """Values (and gradients, derivative index last) at ``points`` shaped (3, ...)."""
        shape = points.shape[1:]
        flat, res = self.locate(points)
        rmax = [float(np.max(np.abs(r))) if r.size else 0.0 for r in res]
        p_val = self.order(rmax)
        p_grad = self.order(rmax, extra=1) if grad else 0
        if p_val is None or p_grad is None:
            if not self.fallback:
                raise ValueError(f"Taylor order above {self.max_order} needed for tolerance {self.tol:g}")
            log.warning("Taylor order above %d, falling back to direct summation", self.max_order)
            return self._direct(points, shape, grad)
        self.last_order = max(p_val, p_grad)
        n_val = len(multi_indices(p_val))
        n_grad = len(multi_indices(p_grad + 1)) if grad else 0
        self._ensure(max(n_val, n_grad))
        r = np.ascontiguousarray(np.stack(res))
        ncomp = self.hats.shape[0]
        val = np.empty((ncomp, flat.size))
        gval = np.empty((ncomp, 3, flat.size) if grad else (0, 3, 0))
        taylor_contract(self._stack, self._lam, n_val, n_grad, flat, r, val, gval)
        val = val.reshape(self.comp_shape + shape)
        if not grad:
            return val
        return val, gval.reshape(self.comp_shape + (3,) + shape)

    def _direct(self, points, shape, grad):
        pts = np.mod(points.reshape(3, -1), 1.0)
        val = direct_eval(self.grid, self.hats, pts).reshape(self.comp_shape + shape)
        if not grad:
            return val
        gh = np.stack([self.hats * self.grid.multiplier(j, 1) for j in range(3)], axis=1)
        gv = direct_eval(self.grid, gh, pts).reshape(self.comp_shape + (3,) + shape)
        return val, gv


def offgrid_eval(f: Field, points, method: str = "auto", tol: float = 1e-13) -> np.ndarray:
    """Evaluate the trigonometric interpolant of ``f`` at arbitrary points.

    ``points`` has shape (..., 3); the result has shape
    f.component_shape + points.shape[:-1]. ``method`` is "direct" (exact
    summation over all modes), "taylor" (expansion about the nearest node
    with a certified remainder bound) or "auto".
    """
    pts = np.asarray(points, dtype=float)
    if pts.shape[-1] != 3:
        raise ValueError("points must have a trailing dimension of 3")
    if not np.all(np.isfinite(pts)):
        raise ValueError("points must be finite")
    shape = pts.shape[:-1]
    p3 = np.moveaxis(pts.reshape(-1, 3), -1, 0)
    if method == "direct":
        out = direct_eval(f.grid, f.hat, np.mod(p3, 1.0))
    elif method in ("taylor", "auto"):
        ev = TaylorEvaluator(f.grid, f.hat, tol=tol, fallback=method == "auto")
        out = ev.evaluate(p3)
    else:
        raise ValueError(f"unknown method {method!r}")
    return np.asarray(out).reshape(f.component_shape + shape)


# ---------------------------------------------------------------------------
# velocity slabs and characteristics


@dataclass(frozen=True, eq=False)
class VelocitySlab:
    """Mollified velocity samples on [t_n, t_n+1], interpolated in time by Lagrange polynomials.

    A slab with a single sample is frozen in time.
    """

    grid: Grid
    times: tuple
    hats: tuple
    tol: float = 1e-12
    _evaluators: dict = field(default_factory=dict, repr=False)

    @classmethod
    def frozen(cls, v: Field, t: float = 0.0, tol: float = 1e-12) -> "VelocitySlab":
        if v.rank != 1:
            raise ValueError("slab velocity must be a vector field")
        return cls(v.grid, (float(t),), (np.asarray(v.hat),), tol)

    @classmethod
    def from_fields(cls, times, fields, tol: float = 1e-12) -> "VelocitySlab":
        times = tuple(float(t) for t in times)
        if len(times) != len(fields) or not 1 <= len(times) <= 3:
            raise ValueError("a slab holds one to three velocity samples")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("slab times must increase")
        grid = fields[0].grid
        for v in fields:
            if v.rank != 1 or v.grid != grid:
                raise ValueError("slab samples must be vector fields on one grid")
        return cls(grid, times, tuple(np.asarray(v.hat) for v in fields), tol)

    @property
    def t_end(self) -> float:
        return self.times[-1]

    def weights(self, t: float):
        ts = self.times
        out = []
        for i, ti in enumerate(ts):
            w = 1.0
            for j, tj in enumerate(ts):
                if j != i:
                    w *= (t - tj) / (ti - tj)
            out.append(w)
        return out

    def evaluator(self, i: int) -> TaylorEvaluator:
        if i not in self._evaluators:
            self._evaluators[i] = TaylorEvaluator(self.grid, self.hats[i], tol=self.tol)
        return self._evaluators[i]

    def sample(self, t: float, disp: np.ndarray, grad: bool = False):
        """Velocity (and gradient) at nodes + disp and time t."""
        val = 0.0
        gval = 0.0
        for i, w in enumerate(self.weights(t)):
            if w == 0.0:
                continue
            res = self.evaluator(i).evaluate(_points(self.grid, disp), grad=grad)
            if grad:
                val = val + w * res[0]
                gval = gval + w * res[1]
            else:
                val = val + w * res
        return (val, gval) if grad else val

    def max_order(self) -> int:
        return max((e.last_order for e in self._evaluators.values()), default=0)


def _points(grid: Grid, disp: np.ndarray) -> np.ndarray:
    return grid.coordinates() + disp


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Backward characteristics from every node over one step of length dt."""

    grid: Grid
    dt: float
    substeps: int
    displacement: np.ndarray
    stages: tuple

    @property
    def points(self) -> np.ndarray:
        """Departure points wrapped into [0, 1)^3, shape (3, n1, n2, n3)."""
        return np.mod(_points(self.grid, self.displacement), 1.0)


def backward_trajectory(slab: VelocitySlab, dt: float, substeps: int = 1) -> Trajectory:
    """RK4 for dy/dtau = -v(y, t_end - tau), y(0) = node, up to tau = dt."""
    if not dt > 0.0 or substeps < 1:
        raise ValueError("need dt > 0 and at least one substep")
    g = slab.grid
    h = dt / substeps
    d = np.zeros((3,) + g.shape)
    stages = []
    for s in range(substeps):
        tau0 = s * h
        t0 = slab.t_end - tau0
        times = (t0, t0 - 0.5 * h, t0 - 0.5 * h, t0 - h)
        fracs = (0.5, 0.5, 1.0)
        disp = [d]
        ks = []
        grads = []
        for i, t in enumerate(times):
            v, gv = slab.sample(t, disp[-1], grad=True)
            ks.append(-v)
            grads.append(gv)
            if i < 3:
                disp.append(d + fracs[i] * h * ks[-1])
        stages.append(tuple(zip(times, disp, grads)))
        d = d + h / 6.0 * (ks[0] + 2.0 * ks[1] + 2.0 * ks[2] + ks[3])
    if not np.all(np.isfinite(d)):
        raise FlowMapError("non-finite departure points")
    return Trajectory(g, float(dt), int(substeps), d, tuple(stages))


def matmul(a, b):
    return np.einsum("ik...,kj...->ij...", a, b)


def adjugate(b: np.ndarray) -> np.ndarray:
    """Transposed cofactor matrix of 3x3 blocks b[i, j, ...]; equals b^-1 when det b = 1."""
    c = np.empty_like(b)
    for i in range(3):
        for j in range(3):
            r = [x for x in range(3) if x != j]
            s = [x for x in range(3) if x != i]
            minor = b[r[0], s[0]] * b[r[1], s[1]] - b[r[0], s[1]] * b[r[1], s[0]]
            c[i, j] = minor if (i + j) % 2 == 0 else -minor
    return c


def det3(a: np.ndarray) -> np.ndarray:
    return (
        a[0, 0] * (a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1])
        - a[0, 1] * (a[1, 0] * a[2, 2] - a[1, 2] * a[2, 0])
        + a[0, 2] * (a[1, 0] * a[2, 1] - a[1, 1] * a[2, 0])
    )


@dataclass(frozen=True, eq=False)
class Deformation:
    """Forward relative deformation a over the step and at its midpoint."""

    a: np.ndarray
    a_mid: np.ndarray

    @property
    def det(self) -> np.ndarray:
        return det3(self.a)


def deformation_gradient(slab: VelocitySlab, traj: Trajectory) -> Deformation:
    """Integrate dB/dtau = -grad v(y(tau)) B, B(0) = I, along the stored RK4 stages.

    The forward deformation over the step is a = B(dt)^-1, taken as the
    adjugate since det B = 1 for solenoidal velocity. The value at tau = dt/2
    comes from the node at the middle of the substeps or from the third-order
    dense output of the middle substep.
    """
    g = slab.grid
    eye = np.broadcast_to(np.eye(3).reshape(3, 3, 1, 1, 1), (3, 3) + g.shape)
    b = np.array(eye)
    h = traj.dt / traj.substeps
    b_mid = None
    for s, stage in enumerate(traj.stages):
        grads = [gv for _, _, gv in stage]
        k1 = -matmul(grads[0], b)
        k2 = -matmul(grads[1], b + 0.5 * h * k1)
        k3 = -matmul(grads[2], b + 0.5 * h * k2)
        k4 = -matmul(grads[3], b + h * k3)
        if traj.substeps % 2 == 1 and s == traj.substeps // 2:
            b_mid = b + h * (5.0 / 24.0 * k1 + (k2 + k3) / 6.0 - k4 / 24.0)
        b = b + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if traj.substeps % 2 == 0 and s + 1 == traj.substeps // 2:
            b_mid = b
    return Deformation(adjugate(b), adjugate(b_mid))


def relaxation_weights(gamma: float, dt: float):
    """Weights of int_0^dt exp(-gamma tau) p(tau) d tau for p quadratic through 0, dt/2, dt."""
    x, w = np.polynomial.legendre.leggauss(20)
    tau = 0.5 * dt * (x + 1.0)
    w = 0.5 * dt * w * np.exp(-gamma * tau)
    s = tau / dt
    basis = (2.0 * (s - 0.5) * (s - 1.0), -4.0 * s * (s - 1.0), 2.0 * s * (s - 0.5))
    return tuple(float(np.sum(w * l)) for l in basis)


def sigma_update(sigma_dep: np.ndarray, defo: Deformation, p: PhysParams, dt: float) -> np.ndarray:
    """exp(-gamma dt) a sigma(X) a^T + delta int exp(-gamma tau) G G^T, G = I, a_mid, a at the nodes."""
    a, am = defo.a, defo.a_mid
    w0, w1, w2 = relaxation_weights(p.gamma, dt)
    out = math.exp(-p.gamma * dt) * matmul(matmul(a, sigma_dep), np.swapaxes(a, 0, 1))
    if p.delta != 0.0:
        q = w1 * matmul(am, np.swapaxes(am, 0, 1)) + w2 * matmul(a, np.swapaxes(a, 0, 1))
        for i in range(3):
            q[i, i] += w0
        out = out + p.delta * q
    return 0.5 * (out + np.swapaxes(out, 0, 1))


@dataclass
class FlowStepInfo:
    max_det_deviation: float = 0.0
    sigma_steps: int = 0
    max_taylor_order: int = 0

    def update(self, det: np.ndarray, order: int):
        self.max_det_deviation = max(self.max_det_deviation, float(np.max(np.abs(det - 1.0))))
        self.sigma_steps += 1
        self.max_taylor_order = max(self.max_taylor_order, int(order))


@dataclass(frozen=True, eq=False)
class FlowStepState:
    """Conformation tensor at the nodes with the deformation of the step that produced it."""

    sigma: Field
    a: np.ndarray
    departure: np.ndarray


def sigma_step_flowmap(sigma: Field, slab: VelocitySlab, p: PhysParams, dt: float, substeps: int = 1,
                       tol: float = 1e-12, info: FlowStepInfo | None = None) -> FlowStepState:
    """Advance sigma by dt along the characteristics of ``slab`` ending at slab.t_end."""
    if sigma.rank != 2:
        raise ValueError("sigma must be a rank-2 field")
    if sigma.grid != slab.grid:
        raise ValueError("sigma and slab on different grids")
    traj = backward_trajectory(slab, dt, substeps)
    defo = deformation_gradient(slab, traj)
    ev = TaylorEvaluator(sigma.grid, to_sym6(np.asarray(sigma.symmetrized().hat)), tol=tol)
    dep = from_sym6(ev.evaluate(_points(sigma.grid, traj.displacement)))
    new = sigma_update(dep, defo, p, dt)
    if info is not None:
        info.update(defo.det, max(ev.last_order, slab.max_order()))
    return FlowStepState(Field(sigma.grid, values=new, symmetric=True), defo.a, traj.points)


def run_nondiffusive(init: SimState, p: PhysParams, F: ForcingSpec, J: Mollifier, T: float, dt: float,
                     sink=None, diag_stride: int = 1, substeps: int = 1, tol_det: float = 1e-6,
                     tol: float = 1e-11, tol_velocity: float = 1e-10,
                     info: FlowStepInfo | None = None) -> SimState:
    """Strang splitting: half sigma step, vorticity step with sigma frozen, half sigma step.

    Each sigma half step freezes the mollified velocity at its end of the
    macro step. Between diagnostic records two consecutive half steps with
    the same velocity are merged into one. ``sink(state)`` is called at t0,
    every diag_stride steps and at the end.

    ``tol`` bounds the relative error of sigma at the departure points and
    ``tol_velocity`` that of the velocity samples, whose errors enter sigma
    only multiplied by the step length.
    """
    if p.eps != 0.0:
        raise ValueError("the flow-map scheme is for eps = 0")
    if diag_stride < 1:
        raise ValueError("diag_stride must be at least 1")
    info = info if info is not None else FlowStepInfo()
    grid = init.grid
    nsteps = step_count(T, dt)
    if nsteps == 0:
        emit(sink, init)
        return init
    it = Integrator(grid, p, F, J)
    w_hat = grid.truncate(np.array(init.omega.hat))
    sigma = init.sigma.symmetrized()
    t0 = init.t
    state = it.state(t0, w_hat, to_sym6(np.asarray(sigma.hat)))
    emit(sink, SimState(t0, state.omega, sigma, state.u))

    def flow(sig, u_hat, tau, t_end):
        slab = VelocitySlab.frozen(Field(grid, hat=J.apply_hat(u_hat)), t_end, tol=tol_velocity)
        out = sigma_step_flowmap(sig, slab, p, tau, substeps, tol, info)
        if info.max_det_deviation > 10.0 * tol_det:
            raise FlowMapError(
                f"|det a - 1| reached {info.max_det_deviation:.3g}, above 10 x tol_det; refine dt or the grid"
            )
        return out.sigma

    u_hat = velocity_hat(grid, w_hat)
    synced = True
    last_good = SimState(t0, state.omega, sigma, state.u)
    for n in range(nsteps):
        t = t0 + n * dt
        it.check_cfl(u_hat, dt)
        if synced:
            sigma = flow(sigma, u_hat, 0.5 * dt, t + 0.5 * dt)
        w_hat = it.step_vorticity(t, w_hat, it.stress_source_hat(np.asarray(sigma.hat)), dt)
        u_hat = velocity_hat(grid, w_hat)
        record = (n + 1) % diag_stride == 0 or n + 1 == nsteps
        if record:
            sigma = flow(sigma, u_hat, 0.5 * dt, t + dt)
        else:
            sigma = flow(sigma, u_hat, dt, t + 1.5 * dt)
        synced = record
        if not (np.all(np.isfinite(w_hat)) and sigma.is_finite()):
            raise SimulationAborted(f"non-finite data at t={t + dt:g}", last_good)
        if record:
            st = SimState(t + dt, Field(grid, hat=w_hat), sigma, Field(grid, hat=u_hat))
            last_good = st
            emit(sink, st)
    return SimState(t0 + nsteps * dt, Field(grid, hat=w_hat), sigma, Field(grid, hat=u_hat))
