"""Energy ledger, positivity monitor, a-priori bounds and L2 comparators."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ForcingSpec, PhysParams, SimState
from .mollifier import Mollifier
from .spectral import Field, l2_norm, sobolev_norm

CSV_HEADER = (
    "t",
    "kinetic",
    "trace_int",
    "diss_cum",
    "trace_cum",
    "forcing_cum",
    "min_eig",
    "u_h2",
    "sigma_h2",
    "sigma_l2",
    "bound_e1t_e2",
    "bound_r1",
)


@dataclass(frozen=True)
class DiagnosticsRecord:
    t: float
    kinetic: float
    trace_int: float
    diss_cum: float
    trace_cum: float
    forcing_cum: float
    min_eig: float
    u_h2: float
    sigma_h2: float
    sigma_l2: float
    bound_e1t_e2: float
    bound_r1: float
    # integrands at t, kept for the next trapezoid step
    grad_u_sq: float = 0.0
    forcing_sq: float = 0.0
    sigma_max: float = 0.0

    def row(self) -> tuple:
        return tuple(getattr(self, name) for name in CSV_HEADER)


@dataclass(frozen=True)
class EnergyConstants:
    """E1, E2 of the energy bound, the mollifier constant K and ||sigma0||."""

    e1: float
    e2: float
    K: float
    sigma0_l2: float


def energy_constants(init: SimState, p: PhysParams, F: ForcingSpec, J: Mollifier | None = None) -> EnergyConstants:
    """E1 = 3 beta delta + beta^2 sup||F||^2 / (4 pi^2 alpha), E2 = ||u0||^2 + beta int tr sigma0."""
    g = init.grid
    e1 = 3.0 * p.beta * p.delta + p.beta**2 * F.sup_l2_sq(g) / (4.0 * math.pi**2 * p.alpha)
    e2 = l2_norm(init.u) ** 2 + p.beta * trace_integral(init.sigma)
    K = J.constant if J is not None else math.inf
    return EnergyConstants(e1, e2, K, l2_norm(init.sigma))


def trace_integral(sigma: Field) -> float:
    return float(sum(sigma.hat[i, i, 0, 0, 0].real for i in range(3)))


def grad_sq(u: Field) -> float:
    """||grad u||^2 = sum over components of ||d_j u^i||^2."""
    g = u.grid
    return float(np.sum([g.parseval(u.hat[i] * g.multiplier(j, 1)) for i in range(3) for j in range(3)]))


def min_eig_sigma(sigma: Field, tol: float = 1e-8) -> float:
    """Smallest eigenvalue of the symmetric 3x3 sigma over all nodes."""
    return float(np.min(smallest_eigenvalue(sigma.values, tol)))


def smallest_eigenvalue(a: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Closed-form smallest eigenvalue of symmetric 3x3 blocks a[i, j, ...]."""
    scale = max(1.0, float(np.max(np.abs(a))))
    if np.max(np.abs(a - np.swapaxes(a, 0, 1))) > tol * scale:
        raise ValueError("tensor is not symmetric")
    a = 0.5 * (a + np.swapaxes(a, 0, 1))
    q = (a[0, 0] + a[1, 1] + a[2, 2]) / 3.0
    p1 = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
    p2 = (a[0, 0] - q) ** 2 + (a[1, 1] - q) ** 2 + (a[2, 2] - q) ** 2 + 2.0 * p1
    p = np.sqrt(p2 / 6.0)
    safe = np.where(p > 0.0, p, 1.0)
    b = (a - q * np.eye(3).reshape((3, 3) + (1,) * (a.ndim - 2))) / safe
    det_b = (
        b[0, 0] * (b[1, 1] * b[2, 2] - b[1, 2] * b[2, 1])
        - b[0, 1] * (b[1, 0] * b[2, 2] - b[1, 2] * b[2, 0])
        + b[0, 2] * (b[1, 0] * b[2, 1] - b[1, 1] * b[2, 0])
    )
    phi = np.arccos(np.clip(det_b / 2.0, -1.0, 1.0)) / 3.0
    low = q + 2.0 * p * np.cos(phi + 2.0 * math.pi / 3.0)
    return np.where(p > 0.0, low, q)


def bound_r1(p: PhysParams, K: float, E1: float, E2: float, t: float, sigma0_l2: float) -> float:
    """A-priori bound on ||sigma(t)||^2 given ||sigma0|| = sigma0_l2; inf when it overflows."""
    for name, x in (("K", K), ("E1", E1), ("E2", E2), ("t", t), ("sigma0_l2", sigma0_l2)):
        if not x >= 0.0:
            raise ValueError(f"{name} must be non-negative")
    expo = 2.0 * p.gamma * t + 2.0 * p.delta * t + 4.0 * K * E2 * t + 2.0 * K * E1 * t * t
    pre = sigma0_l2**2 + 2.0 * p.delta * t
    if expo == 0.0 or pre == 0.0:
        return pre
    try:
        return pre * math.exp(expo)
    except OverflowError:
        return math.inf


def energy_ledger(s: SimState, p: PhysParams, F: ForcingSpec, running: DiagnosticsRecord | None = None,
                  constants: EnergyConstants | None = None) -> DiagnosticsRecord:
    """Ledger terms at s, with the time integrals advanced from ``running`` by the trapezoid rule.

    Without ``constants`` the bound columns are NaN.
    """
    g = s.grid
    gu = grad_sq(s.u)
    tr = trace_integral(s.sigma)
    fsq = F.l2_sq(g, s.t)
    vals = s.sigma.values
    if running is None:
        diss = trc = frc = 0.0
    else:
        h = s.t - running.t
        if not h > 0.0:
            raise ValueError("records must have increasing times")
        diss = running.diss_cum + 0.5 * h * (running.grad_u_sq + gu)
        trc = running.trace_cum + 0.5 * h * (running.trace_int + tr)
        frc = running.forcing_cum + 0.5 * h * (running.forcing_sq + fsq)
    if constants is None:
        b1 = r1 = math.nan
    else:
        b1 = constants.e2 + constants.e1 * s.t
        r1 = bound_r1(p, constants.K, constants.e1, constants.e2, s.t, constants.sigma0_l2)
    return DiagnosticsRecord(
        t=float(s.t),
        kinetic=0.5 * l2_norm(s.u) ** 2,
        trace_int=tr,
        diss_cum=diss,
        trace_cum=trc,
        forcing_cum=frc,
        min_eig=min_eig_sigma(s.sigma),
        u_h2=sobolev_norm(s.u, 2),
        sigma_h2=sobolev_norm(s.sigma, 2),
        sigma_l2=l2_norm(s.sigma),
        bound_e1t_e2=b1,
        bound_r1=r1,
        grad_u_sq=gu,
        forcing_sq=fsq,
        sigma_max=float(np.max(np.abs(vals))),
    )


@dataclass(frozen=True)
class BoundReport:
    ok: bool
    margins: tuple
    worst_index: int
    worst_margin: float

    def __str__(self):
        state = "holds" if self.ok else "violated"
        return f"energy bound {state}; worst margin {self.worst_margin:.6g} at record {self.worst_index}"


def energy_lhs(r: DiagnosticsRecord, p: PhysParams) -> float:
    """||u||^2 + alpha diss_cum + beta int tr sigma + beta gamma trace_cum."""
    return 2.0 * r.kinetic + p.alpha * r.diss_cum + p.beta * r.trace_int + p.beta * p.gamma * r.trace_cum


def check_energy_bound(series, p: PhysParams, F: ForcingSpec, constants: EnergyConstants,
                       rtol: float = 1e-9) -> BoundReport:
    """Check the ledger inequality at every record; margins are rhs - lhs.

    A record passes when its margin is above -rtol * max(1, rhs), which
    absorbs round-off when the bound is attained (the equilibrium state).
    """
    if not series:
        raise ValueError("empty series")
    margins = []
    ok = True
    for r in series:
        rhs = constants.e2 + constants.e1 * r.t
        m = rhs - energy_lhs(r, p)
        margins.append(m)
        if m < -rtol * max(1.0, abs(rhs)):
            ok = False
    worst = int(np.argmin(margins))
    return BoundReport(ok, tuple(margins), worst, float(margins[worst]))


def psd_tolerance(r: DiagnosticsRecord) -> float:
    return 1e-8 * (1.0 + r.sigma_max)


def check_positivity(series) -> bool:
    return all(r.min_eig >= -psd_tolerance(r) for r in series)


def check_r1(series, rtol: float = 1e-9) -> bool:
    """||sigma(t)||^2 <= R1(t) at every record."""
    return all(r.sigma_l2**2 <= r.bound_r1 * (1.0 + rtol) for r in series)


def l2_distance(a: SimState, b: SimState, ttol: float = 1e-9) -> tuple[float, float]:
    """(||u_a - u_b||, ||sigma_a - sigma_b||) for states on one grid at one time."""
    if a.grid != b.grid:
        raise ValueError("states live on different grids")
    if abs(a.t - b.t) > ttol * max(1.0, abs(a.t)):
        raise ValueError(f"time mismatch: {a.t} vs {b.t}")
    return l2_norm(a.u - b.u), l2_norm(a.sigma - b.sigma)


class Recorder:
    """Run sink that keeps the ledger series and, optionally, the states themselves."""

    def __init__(self, p: PhysParams, F: ForcingSpec, constants: EnergyConstants | None = None,
                 keep_states: bool = False):
        self.p = p
        self.F = F
        self.constants = constants
        self.keep_states = keep_states
        self.records: list[DiagnosticsRecord] = []
        self.states: list[SimState] = []

    def __call__(self, s: SimState):
        if self.constants is None:
            raise ValueError("recorder needs energy constants")
        prev = self.records[-1] if self.records else None
        self.records.append(energy_ledger(s, self.p, self.F, prev, self.constants))
        if self.keep_states:
            self.states.append(s)

    def energy_report(self) -> BoundReport:
        return check_energy_bound(self.records, self.p, self.F, self.constants)

    def positive(self) -> bool:
        return check_positivity(self.records)

    def r1_holds(self) -> bool:
        return check_r1(self.records)

