"""Acceptance suite on 32^3 grids. Each item prints one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are repeated
in the terminal summary.
"""

import functools
import math
import time

import numpy as np
import pytest

from obtorus.cli import identity_checks
from obtorus.diagnostics import Recorder, energy_constants, min_eig_sigma, psd_tolerance
from obtorus.diffusive import run_diffusive
from obtorus.experiments import RunConfig, epsilon_sweep, initial_state, self_convergence, simulate, stability_pair
from obtorus.flowmap import FlowStepInfo, run_nondiffusive
from obtorus.model import NO_FORCING, PhysParams, SimState
from obtorus.mollifier import build_mollifier
from obtorus.spectral import Field, Grid, l2_norm, random_divfree
from obtorus.vorticity import curl, velocity_from_vorticity
from conftest import report

pytestmark = pytest.mark.slow

# Re = 10 keeps the Taylor-Green flow well resolved on 32^3 up to T = 1
BASE = RunConfig(re=10.0, nu=0.5, wi=1.0, T=1.0, dt=0.01, diag_stride=2)
EPS = 0.01
CONFIGS = {
    "taylor_green": BASE,
    "taylor_green_forced": BASE.with_(forcing_kind="sinusoidal", forcing_amplitude=1.0, forcing_frequency=1.0),
    "random": BASE.with_(initial_kind="random", seed=11),
    "embedded_2d": BASE.with_(initial_kind="embedded_2d", seed=5),
    "equilibrium": BASE.with_(initial_kind="equilibrium"),
}


@functools.lru_cache(maxsize=None)
def energy_run(name, branch):
    cfg = CONFIGS[name]
    cfg = cfg.with_(eps=EPS, branch="diffusive") if branch == "diffusive" else cfg.with_(branch="nondiffusive")
    t0 = time.perf_counter()
    res = simulate(cfg)
    return res, time.perf_counter() - t0


RUNS = [(name, branch) for name in CONFIGS for branch in ("diffusive", "nondiffusive")]


@functools.lru_cache(maxsize=None)
def convergence(branch):
    cfg = BASE.with_(eps=EPS, branch="diffusive") if branch == "diffusive" else BASE.with_(branch="nondiffusive")
    # dt = 0.02 sits close to the CFL limit and is pre-asymptotic for the diffusive branch
    return self_convergence(cfg, [0.01, 0.005, 0.0025])


def test_item01_identities():
    rows = [(name, err, tol) for name, err, tol in identity_checks(32, 0, count=20) if name != "velocity round trip"]
    worst = max(rows, key=lambda r: r[1] / r[2])
    ok = all(err <= tol for _, err, tol in rows)
    assert report(1, ok, f"{len(rows)} identities x 20 fields, worst {worst[0]} {worst[1]:.2e} (tol 1e-8)")


def test_item02_velocity_round_trip():
    g = Grid(32, 32, 32)
    errs = []
    for s in range(20):
        u = random_divfree(g, 500 + s, 10)
        errs.append(l2_norm(velocity_from_vorticity(curl(u)) - u))
    assert report(2, max(errs) <= 1e-10, f"max ||u - u(curl u)|| = {max(errs):.2e} over 20 fields (tol 1e-10)")


def test_item03_energy_bound():
    bad = []
    worst = math.inf
    for name, branch in RUNS:
        res, _ = energy_run(name, branch)
        rep = res.recorder.energy_report()
        worst = min(worst, rep.worst_margin)
        if not rep.ok:
            bad.append(f"{name}/{branch} margin {rep.worst_margin:.3g}")
    detail = f"{len(RUNS)} runs, smallest margin {worst:.3g}" + (f"; violated: {', '.join(bad)}" if bad else "")
    assert report(3, not bad, detail)


def test_item04_positivity():
    worst = math.inf
    ok = True
    for name, branch in RUNS:
        res, _ = energy_run(name, branch)
        ok &= res.recorder.positive()
        worst = min(worst, min(r.min_eig / psd_tolerance(r) for r in res.records))
    assert report(4, ok, f"{len(RUNS)} runs, smallest min_eig / tolerance {worst:.3g} (must be >= -1)")


def test_item05_rest_closed_form():
    g = Grid(32, 32, 32)
    J = build_mollifier(0.125, g)
    p = PhysParams(0.5, 1.0, 1.0)  # gamma = 1, delta = 0.5
    T = 1.0
    decay = math.exp(-p.gamma * T)
    eq = p.delta / p.gamma * (1.0 - decay)
    zero = Field(g, values=np.zeros((3,) + g.shape))
    # flow map: sigma0 = phi I keeps u = 0 (curl div of phi I vanishes) and relaxes pointwise
    x, y, z = g.nodes
    phi = 1.5 + 0.5 * np.sin(2 * np.pi * x) * np.cos(2 * np.pi * y) * np.cos(4 * np.pi * z)
    s0 = Field(g, values=phi * np.eye(3).reshape(3, 3, 1, 1, 1), symmetric=True)
    fm = run_nondiffusive(SimState.from_velocity(0.0, zero, s0), p, NO_FORCING, J, T, 0.01)
    err_fm = np.max(np.abs(fm.sigma.values - (decay * s0.values + eq * np.eye(3).reshape(3, 3, 1, 1, 1))))
    # stress diffusion: uniform sigma0, so diffusion is inactive
    c = np.array([[2.0, 0.3, 0.1], [0.3, 1.5, -0.2], [0.1, -0.2, 1.0]])
    s0 = Field(g, values=np.broadcast_to(c.reshape(3, 3, 1, 1, 1), (3, 3) + g.shape).copy(), symmetric=True)
    errs = []
    for dt in (0.02, 0.01):
        d = run_diffusive(SimState.from_velocity(0.0, zero, s0), p.with_eps(EPS), NO_FORCING, J, T, dt)
        errs.append(np.max(np.abs(d.sigma.values - (decay * c + eq * np.eye(3)).reshape(3, 3, 1, 1, 1))))
    ok = err_fm <= 1e-6 and errs[1] <= 0.01**2
    detail = f"flow-map err {err_fm:.2e} (tol 1e-6); diffusive err {errs[0]:.2e} at dt=0.02, {errs[1]:.2e} at dt=0.01 (tol dt^2)"
    assert report(5, ok, detail)


def test_item06_det_one():
    cfg = BASE.with_(dt=1e-3, diag_stride=100, branch="nondiffusive")
    t0 = time.perf_counter()
    res = simulate(cfg)
    dev = res.flow_info.max_det_deviation
    assert report(6, dev <= 1e-6, f"max |det a - 1| = {dev:.2e} over {res.flow_info.sigma_steps} sigma steps "
                                  f"(tol 1e-6, {time.perf_counter() - t0:.0f} s)")


def test_item07_eps_convergence():
    eps = [1e-2, 5e-3, 2.5e-3]
    rep = epsilon_sweep(BASE.with_(diag_stride=5), eps, T=0.5)
    # dt-error floor: Richardson estimate of each branch's error at dt = 0.01, from item 8's runs
    floor = 0.0
    for branch in ("diffusive", "nondiffusive"):
        c = convergence(branch)
        floor += 4.0 / 3.0 * (c.du[0] + c.dsigma[0])
    checked = [(r, i) for i, r in enumerate(rep.ratios) if rep.distances[i + 1] > floor]
    ok = rep.monotone and all(1.5 <= r <= 2.5 for r, _ in checked)
    dist = ", ".join(f"{d:.3e}" for d in rep.distances)
    ratios = ", ".join(f"{r:.3f}" for r in rep.ratios)
    detail = f"distances {dist}; ratios {ratios}; floor {floor:.2e}; {len(checked)} ratio(s) above floor"
    assert report(7, ok, detail)


@pytest.mark.parametrize("branch", ["diffusive", "nondiffusive"])
def test_item08_self_convergence(branch):
    c = convergence(branch)
    orders = c.order_u + c.order_sigma
    ok = all(abs(o - 2.0) <= 0.1 for o in orders)
    assert report(8, ok, f"{branch}: order u {c.order_u[0]:.3f}, order sigma {c.order_sigma[0]:.3f} (2.0 +- 0.1)")


def _embedding_error(states):
    out = 0.0
    for s in states:
        v = s.sigma
        e = l2_norm(s.u[2]) + sum(l2_norm(v[i, 2]) for i in range(3))
        out = max(out, e)
    return out


@pytest.mark.parametrize("branch", ["diffusive", "nondiffusive"])
def test_item09_embedding(branch):
    # nu = 1 gives delta = 0, where the embedded conformation tensor has sigma_33 = 0 for all time
    cfg = BASE.with_(n3=4, nu=1.0, initial_kind="embedded_2d", seed=5, diag_stride=1)
    cfg = cfg.with_(eps=EPS, branch="diffusive") if branch == "diffusive" else cfg.with_(branch="nondiffusive")
    res = simulate(cfg, keep_states=True)
    err = _embedding_error(res.states)
    # with delta > 0 the mixed entries stay zero and sigma_33 follows the spatially uniform relaxation law
    cfg2 = cfg.with_(nu=0.5)
    res2 = simulate(cfg2, keep_states=True)
    p = cfg2.physics
    mixed = max(l2_norm(s.u[2]) + l2_norm(s.sigma[0, 2]) + l2_norm(s.sigma[1, 2]) for s in res2.states)
    s33 = max(np.max(np.abs(s.sigma.values[2, 2] - p.delta / p.gamma * (1 - math.exp(-p.gamma * s.t))))
              for s in res2.states)
    # in the flow map a_33 is the planar Jacobian determinant, so sigma_33 carries the det a - 1 error
    ok = err <= 1e-8 and mixed <= 1e-8 and s33 <= 1e-6
    detail = (f"{branch}: max ||u3|| + sum ||sigma_i3|| = {err:.2e} (tol 1e-8); "
              f"delta>0: mixed {mixed:.2e}, sigma33 err {s33:.2e} (tol 1e-6)")
    assert report(9, ok, detail)


@pytest.mark.parametrize("branch", ["diffusive", "nondiffusive"])
def test_item10_stability(branch):
    cfg = BASE.with_(T=0.5, diag_stride=50)
    cfg = cfg.with_(eps=EPS, branch="diffusive") if branch == "diffusive" else cfg.with_(branch="nondiffusive")
    rep = stability_pair(cfg, [1e-3, 1e-4])
    detail = f"{branch}: growth ratios {rep.ratios[0]:.5f}, {rep.ratios[1]:.5f}, spread {rep.spread:.2e} (tol 0.2)"
    assert report(10, rep.consistent, detail)


def test_item11_sigma_apriori():
    ok = True
    tightest = math.inf
    for name, branch in RUNS:
        res, _ = energy_run(name, branch)
        ok &= res.recorder.r1_holds()
        for r in res.records:
            if math.isfinite(r.bound_r1) and r.bound_r1 > 0:
                tightest = min(tightest, r.bound_r1 / max(r.sigma_l2**2, 1e-300))
    K = build_mollifier(0.125, Grid(32, 32, 32)).constant
    detail = f"{len(RUNS)} runs, K = {K:.3g}; smallest finite R1 / ||sigma||^2 = {tightest:.3g} (R1 = inf for t > 0 here)"
    assert report(11, ok, detail)
