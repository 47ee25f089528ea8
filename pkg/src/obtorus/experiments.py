"""Run configuration, initial data and the study drivers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .diagnostics import Recorder, energy_constants, l2_distance
from .diffusive import run_diffusive
from .flowmap import FlowStepInfo, run_nondiffusive
from .model import ForcingSpec, PhysParams, SimState
from .mollifier import build_mollifier
from .persistence import write_csv, write_snapshot
from .spectral import (
    Field,
    Grid,
    identity_tensor,
    l2_norm,
    project_solenoidal,
    random_divfree,
    random_field,
)

BRANCHES = ("auto", "diffusive", "nondiffusive")
INITIAL_KINDS = ("taylor_green", "random", "embedded_2d", "rest", "equilibrium")

# dotted config key -> (RunConfig attribute, parser)
KEYS = {
    "grid.n1": ("n1", int),
    "grid.n2": ("n2", int),
    "grid.n3": ("n3", int),
    "physics.nu": ("nu", float),
    "physics.re": ("re", float),
    "physics.wi": ("wi", float),
    "physics.eps": ("eps", float),
    "time.T": ("T", float),
    "time.dt": ("dt", float),
    "time.diag_stride": ("diag_stride", int),
    "mollifier.width": ("width", float),
    "mollifier.oversample": ("oversample", int),
    "forcing.kind": ("forcing_kind", str),
    "forcing.amplitude": ("forcing_amplitude", float),
    "forcing.frequency": ("forcing_frequency", float),
    "forcing.wavenumber": ("forcing_wavenumber", int),
    "initial.kind": ("initial_kind", str),
    "initial.seed": ("seed", int),
    "initial.amplitude": ("amplitude", float),
    "flowmap.substeps": ("substeps", int),
    "flowmap.tol_det": ("tol_det", float),
    "run.branch": ("branch", str),
    "run.out": ("out", str),
}


@dataclass(frozen=True)
class RunConfig:
    n1: int = 32
    n2: int = 32
    n3: int = 32
    nu: float = 0.5
    re: float = 1.0
    wi: float = 1.0
    eps: float = 0.0
    T: float = 1.0
    dt: float = 0.01
    diag_stride: int = 10
    width: float = 0.125
    oversample: int = 4
    forcing_kind: str = "none"
    forcing_amplitude: float = 0.0
    forcing_frequency: float = 0.0
    forcing_wavenumber: int = 1
    initial_kind: str = "taylor_green"
    seed: int = 0
    amplitude: float = 1.0
    substeps: int = 1
    tol_det: float = 1e-6
    branch: str = "auto"
    out: str = ""
    forcing_pattern: Field | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        self.physics  # validates nu, re, wi, eps
        self.grid
        if self.branch not in BRANCHES:
            raise ValueError(f"unknown branch {self.branch!r}")
        if self.branch == "diffusive" and self.eps <= 0.0:
            raise ValueError("branch=diffusive needs eps > 0")
        if self.branch == "nondiffusive" and self.eps != 0.0:
            raise ValueError("branch=nondiffusive needs eps = 0")
        if self.initial_kind not in INITIAL_KINDS:
            raise ValueError(f"unknown initial condition {self.initial_kind!r}")
        if not (self.T > 0.0 and self.dt > 0.0 and self.diag_stride >= 1):
            raise ValueError("need T > 0, dt > 0 and diag_stride >= 1")
        if self.substeps < 1 or not self.tol_det > 0.0:
            raise ValueError("need flowmap.substeps >= 1 and flowmap.tol_det > 0")
        self.forcing

    @property
    def grid(self) -> Grid:
        return Grid(self.n1, self.n2, self.n3)

    @property
    def physics(self) -> PhysParams:
        return PhysParams(self.nu, self.re, self.wi, self.eps)

    @property
    def forcing(self) -> ForcingSpec:
        return ForcingSpec(self.forcing_kind, self.forcing_amplitude, self.forcing_frequency,
                           self.forcing_wavenumber, self.forcing_pattern)

    @property
    def diffusive(self) -> bool:
        return self.branch == "diffusive" or (self.branch == "auto" and self.eps > 0.0)

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)


def parse_config(text: str) -> RunConfig:
    """Flat ``key = value`` lines with dotted keys; '#' starts a comment; unknown keys are errors."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, val = (x.strip() for x in line.split("=", 1))
        if key not in KEYS:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        attr, conv = KEYS[key]
        if attr in values:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[attr] = conv(val)
        except ValueError:
            raise ValueError(f"line {lineno}: bad value {val!r} for {key}") from None
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def format_config(cfg: RunConfig) -> str:
    attrs = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    return "".join(f"{key} = {attrs[attr]}\n" for key, (attr, _) in KEYS.items())


# ---------------------------------------------------------------------------
# initial data


def _vector(grid, comps) -> Field:
    return Field(grid, values=np.stack([np.broadcast_to(c, grid.shape) for c in comps]))


def _gram(grid: Grid, seed: int, kmax: int, scale: float, planar: bool = False) -> np.ndarray:
    """Nodal G G^T for a smooth random matrix field G; PSD at every node."""
    if planar:
        g2 = _planar_scalars(grid, seed, 4)
        G = np.zeros((3, 3) + grid.shape)
        G[0, 0], G[0, 1], G[1, 0], G[1, 1] = g2
    else:
        G = random_field(grid, seed, kmax, shape=(3, 3)).values
    G = G / max(1e-300, float(np.max(np.abs(G))))
    return scale * np.einsum("ik...,jk...->ij...", G, G)


def _planar_scalars(grid: Grid, seed: int, count: int) -> np.ndarray:
    """Random smooth mean-zero functions of (x1, x2) only, max norm 1."""
    rng = np.random.default_rng(seed)
    x, y, _ = grid.nodes
    out = np.zeros((count,) + grid.shape)
    for c in range(count):
        acc = 0.0
        for k1 in range(-2, 3):
            for k2 in range(-2, 3):
                if k1 == 0 and k2 == 0:
                    continue
                a, b = rng.standard_normal(2)
                ph = 2 * np.pi * (k1 * x + k2 * y)
                acc = acc + a * np.cos(ph) + b * np.sin(ph)
        out[c] = np.broadcast_to(acc, grid.shape)
        out[c] /= np.max(np.abs(out[c]))
    return out


def initial_condition(kind: str, grid: Grid, seed: int = 0, amp: float = 1.0, p: PhysParams | None = None):
    """(u0, sigma0) with u0 solenoidal and mean-zero and sigma0 symmetric PSD.

    taylor_green   u0 = amp (sin x cos y cos z, -cos x sin y cos z, 0), sigma0 = I
    random         u0 random solenoidal with L2 norm amp and |k_i| <= n/16, sigma0 = I + Gram perturbation
    embedded_2d    u0 = (u1, u2, 0)(x1, x2), sigma0 with zero third row and column
    rest           u0 = 0, sigma0 = I
    equilibrium    u0 = 0, sigma0 = (delta / gamma) I, needs p
    """
    c = 2.0 * np.pi
    x, y, z = grid.nodes
    eye = np.eye(3).reshape(3, 3, 1, 1, 1)
    if kind == "taylor_green":
        u = _vector(grid, (amp * np.sin(c * x) * np.cos(c * y) * np.cos(c * z),
                           -amp * np.cos(c * x) * np.sin(c * y) * np.cos(c * z), 0.0 * x))
        s = identity_tensor(grid)
    elif kind == "random":
        kmax = max(1, min(grid.shape) // 16)
        u = random_divfree(grid, seed, kmax, amplitude=amp)
        s = Field(grid, values=eye + _gram(grid, seed + 1, kmax, 0.1 * amp), symmetric=True)
    elif kind == "embedded_2d":
        # stream function psi(x1, x2); u = (d2 psi, -d1 psi, 0)
        psi = Field(grid, values=_planar_scalars(grid, seed, 1)[0])
        d1 = Field(grid, hat=psi.hat * grid.multiplier(0, 1))
        d2 = Field(grid, hat=psi.hat * grid.multiplier(1, 1))
        u = _vector(grid, (d2.values, -d1.values, 0.0 * x))
        scale = l2_norm(u)
        u = u * (amp / scale)
        sv = _gram(grid, seed + 1, 1, 0.1 * amp, planar=True)
        sv[0, 0] += 1.0
        sv[1, 1] += 1.0
        s = Field(grid, values=sv, symmetric=True)
    elif kind == "rest":
        u = Field(grid, values=np.zeros((3,) + grid.shape))
        s = identity_tensor(grid)
    elif kind == "equilibrium":
        if p is None:
            raise ValueError("equilibrium initial data needs the physical parameters")
        u = Field(grid, values=np.zeros((3,) + grid.shape))
        s = identity_tensor(grid) * (p.delta / p.gamma)
    else:
        raise ValueError(f"unknown initial condition {kind!r}")
    return u, s


def initial_state(cfg: RunConfig) -> SimState:
    u, s = initial_condition(cfg.initial_kind, cfg.grid, cfg.seed, cfg.amplitude, cfg.physics)
    return SimState.from_velocity(0.0, u, s)


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunResult:
    config: RunConfig
    final: SimState
    recorder: Recorder
    flow_info: FlowStepInfo | None = None

    @property
    def records(self):
        return self.recorder.records

    @property
    def states(self):
        return self.recorder.states


def simulate(cfg: RunConfig, init: SimState | None = None, keep_states: bool = False, T: float | None = None,
             dt: float | None = None, diag_stride: int | None = None) -> RunResult:
    """Run one configuration, recording the ledger at every diagnostic stride."""
    init = init if init is not None else initial_state(cfg)
    p, F = cfg.physics, cfg.forcing
    J = build_mollifier(cfg.width, init.grid, cfg.oversample)
    rec = Recorder(p, F, energy_constants(init, p, F, J), keep_states=keep_states)
    T = cfg.T if T is None else T
    dt = cfg.dt if dt is None else dt
    stride = cfg.diag_stride if diag_stride is None else diag_stride
    if cfg.diffusive:
        final = run_diffusive(init, p, F, J, T, dt, sink=rec, diag_stride=stride)
        return RunResult(cfg, final, rec)
    info = FlowStepInfo()
    final = run_nondiffusive(init, p, F, J, T, dt, sink=rec, diag_stride=stride, substeps=cfg.substeps,
                             tol_det=cfg.tol_det, info=info)
    return RunResult(cfg, final, rec, info)


def run_to_directory(cfg: RunConfig, out) -> RunResult:
    """Single run writing diagnostics.csv, the initial and final snapshots and the config."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    init = initial_state(cfg)
    res = simulate(cfg, init)
    (out / "config.txt").write_text(format_config(cfg))
    write_csv(out / "diagnostics.csv", res.records)
    write_snapshot(out / "initial.bin", init, cfg.eps)
    write_snapshot(out / "final.bin", res.final, cfg.eps)
    return res


# ---------------------------------------------------------------------------
# studies


@dataclass(frozen=True)
class SweepReport:
    eps: tuple
    distances: tuple
    ratios: tuple
    rates: tuple
    monotone: bool

    def lines(self):
        out = []
        for i, (e, d) in enumerate(zip(self.eps, self.distances)):
            extra = f"  ratio {self.ratios[i - 1]:.4f}  rate {self.rates[i - 1]:.4f}" if i else ""
            out.append(f"eps={e:.6g}  max distance {d:.6e}{extra}")
        out.append("monotone decreasing" if self.monotone else "NOT monotone")
        return out


def _series_distance(ref_states, states) -> float:
    if len(ref_states) != len(states):
        raise ValueError("runs recorded different numbers of states")
    return max(sum(l2_distance(a, b)) for a, b in zip(ref_states, states))


def epsilon_sweep(cfg: RunConfig, eps_list, T: float | None = None) -> SweepReport:
    """Compare eps > 0 runs against the eps = 0 run; distances are max over records of du + dsigma."""
    eps_list = [float(e) for e in eps_list]
    if not eps_list:
        raise ValueError("empty eps list")
    if any(not e > 0.0 for e in eps_list):
        raise ValueError("eps values must be positive; eps = 0 is the reference run")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps list must be strictly decreasing")
    init = initial_state(cfg.with_(eps=0.0, branch="auto"))
    ref = simulate(cfg.with_(eps=0.0, branch="nondiffusive"), init, keep_states=True, T=T)
    dist = []
    for e in eps_list:
        run = simulate(cfg.with_(eps=e, branch="diffusive"), init, keep_states=True, T=T)
        dist.append(_series_distance(ref.states, run.states))
    ratios = tuple(a / b if b > 0 else math.inf for a, b in zip(dist, dist[1:]))
    rates = tuple(math.log(r) / math.log(a / b) for r, a, b in zip(ratios, eps_list, eps_list[1:]))
    monotone = all(b < a for a, b in zip(dist, dist[1:]))
    return SweepReport(tuple(eps_list), tuple(dist), ratios, rates, monotone)


@dataclass(frozen=True)
class StabilityReport:
    amps: tuple
    initial: tuple
    final: tuple
    ratios: tuple
    spread: float
    consistent: bool

    def lines(self):
        out = [f"amp={a:.3g}  d(0)={d0:.6e}  d(T)={d1:.6e}  ratio {r:.6g}"
               for a, d0, d1, r in zip(self.amps, self.initial, self.final, self.ratios)]
        out.append(f"ratio spread {self.spread:.4f} ({'within' if self.consistent else 'outside'} 20%)")
        return out


def perturbation_direction(grid: Grid, seed: int = 7):
    """Unit-size solenoidal velocity and symmetric tensor perturbations."""
    du = random_divfree(grid, seed, max(1, min(grid.shape) // 8), amplitude=1.0)
    ds = random_field(grid, seed + 1, max(1, min(grid.shape) // 8), shape=(3, 3), amplitude=1.0).symmetrized()
    return du, ds


def stability_pair(cfg: RunConfig, amps, T: float | None = None, direction=None) -> StabilityReport:
    """Growth ratio d(T)/d(0) of base-vs-perturbed runs, d^2 = du^2 + dsigma^2, for each amplitude."""
    amps = [float(a) for a in amps]
    if not amps or any(a < 0.0 for a in amps):
        raise ValueError("amplitudes must be non-negative")
    g = cfg.grid
    du, ds = direction if direction is not None else perturbation_direction(g)
    if du.rank != 1 or ds.rank != 2:
        raise ValueError("perturbation must be a (vector, tensor) pair")
    scale = max(1.0, float(np.max(np.abs(du.hat))))
    if np.max(np.abs(du.mean())) > 1e-12 * scale:
        raise ValueError("velocity perturbation has nonzero mean")
    if l2_norm(project_solenoidal(du) - du) > 1e-10 * max(1.0, l2_norm(du)):
        raise ValueError("velocity perturbation is not solenoidal")
    u0, s0 = initial_condition(cfg.initial_kind, g, cfg.seed, cfg.amplitude, cfg.physics)
    base_init = SimState.from_velocity(0.0, u0, s0)
    base = simulate(cfg, base_init, T=T)
    init_d, final_d, ratios = [], [], []
    for a in amps:
        if a == 0.0:
            init_d.append(0.0)
            final_d.append(0.0)
            ratios.append(math.nan)
            continue
        pert = SimState.from_velocity(0.0, u0 + du * a, (s0 + ds * a).symmetrized())
        d0 = math.hypot(*l2_distance(base_init, pert))
        run = simulate(cfg, pert, T=T)
        d1 = math.hypot(*l2_distance(base.final, run.final))
        init_d.append(d0)
        final_d.append(d1)
        ratios.append(d1 / d0)
    finite = [r for r in ratios if math.isfinite(r)]
    spread = max(finite) / min(finite) - 1.0 if finite else 0.0
    return StabilityReport(tuple(amps), tuple(init_d), tuple(final_d), tuple(ratios), spread, spread <= 0.2)


@dataclass(frozen=True)
class ConvergenceReport:
    dts: tuple
    du: tuple
    dsigma: tuple
    order_u: tuple
    order_sigma: tuple

    def lines(self):
        out = [f"dt={a:.4g} vs {b:.4g}: du={x:.6e} dsigma={y:.6e}"
               for a, b, x, y in zip(self.dts, self.dts[1:], self.du, self.dsigma)]
        out.append("order u: " + ", ".join(f"{o:.4f}" for o in self.order_u))
        out.append("order sigma: " + ", ".join(f"{o:.4f}" for o in self.order_sigma))
        return out


def self_convergence(cfg: RunConfig, dt_list, T: float | None = None) -> ConvergenceReport:
    """Richardson orders from successive differences of runs with halving dt."""
    dts = [float(d) for d in dt_list]
    if len(dts) < 3:
        raise ValueError("need at least three step sizes")
    for a, b in zip(dts, dts[1:]):
        if abs(a - 2.0 * b) > 1e-12 * a:
            raise ValueError("step sizes must halve successively")
    init = initial_state(cfg)
    T = cfg.T if T is None else T
    finals = []
    for dt in dts:
        nsteps = round(T / dt)
        finals.append(simulate(cfg, init, T=T, dt=dt, diag_stride=nsteps).final)
    du, dsig = [], []
    for a, b in zip(finals, finals[1:]):
        x, y = l2_distance(a, b)
        du.append(x)
        dsig.append(y)

    def orders(e):
        return tuple(math.log2(a / b) if a > 0 and b > 0 else math.nan for a, b in zip(e, e[1:]))

    return ConvergenceReport(tuple(dts), tuple(du), tuple(dsig), orders(du), orders(dsig))
