import math

import numpy as np
import pytest
from scipy.integrate import quad

from obtorus.diagnostics import min_eig_sigma
from obtorus.flowmap import (
    FlowMapError,
    FlowStepInfo,
    TaylorEvaluator,
    VelocitySlab,
    adjugate,
    backward_trajectory,
    deformation_gradient,
    det3,
    offgrid_eval,
    relaxation_weights,
    run_nondiffusive,
    sigma_step_flowmap,
)
from obtorus.model import NO_FORCING, PhysParams, SimState
from obtorus.spectral import Field, Grid, constant, identity_tensor, random_divfree, random_field
from conftest import nodal, rel

TWO_PI = 2 * math.pi


def shear(grid, amp):
    y = grid.nodes[1]
    return nodal(grid, amp * np.sin(TWO_PI * y), 0.0, 0.0)


class TestOffgrid:
    def test_nodes_reproduce_values(self, g16):
        f = random_field(g16, 1, 5, shape=(3,))
        pts = np.moveaxis(g16.coordinates(), 0, -1)
        for method in ("direct", "taylor"):
            assert np.max(np.abs(offgrid_eval(f, pts, method) - f.values)) < 1e-12

    def test_single_mode(self, g16):
        f = nodal(g16, np.cos(TWO_PI * 3 * g16.nodes[0]) * np.sin(TWO_PI * g16.nodes[2]))
        pts = np.random.default_rng(0).random((200, 3))
        exact = np.cos(TWO_PI * 3 * pts[:, 0]) * np.sin(TWO_PI * pts[:, 2])
        for method in ("direct", "taylor", "auto"):
            assert np.max(np.abs(offgrid_eval(f, pts, method) - exact)) < 1e-12

    def test_shift_theorem(self, g16):
        f = random_field(g16, 4, 5, shape=(3, 3))
        c = np.array([0.0137, -0.271, 0.4999])
        phase = np.exp(1j * sum(k * ci for k, ci in zip(g16.kappa, c)))
        shifted = Field(g16, hat=f.hat * phase).values
        pts = np.moveaxis(g16.coordinates(), 0, -1) + c
        # the Taylor tolerance is relative to the l1 norm of the coefficients
        for method, tol in (("direct", 1e-12), ("taylor", 1e-9)):
            got = offgrid_eval(f, pts, method, tol=1e-10)
            assert np.max(np.abs(got - shifted)) < tol * np.max(np.abs(shifted))

    def test_periodic_wrap(self, g16):
        f = random_field(g16, 5, 4)
        p = np.random.default_rng(1).random((50, 3))
        a = offgrid_eval(f, p, "taylor", tol=1e-10)
        b = offgrid_eval(f, p + np.array([3.0, -2.0, 1.0]), "taylor", tol=1e-10)
        assert np.max(np.abs(a - b)) < 1e-14

    def test_gradient(self, g16):
        u = random_divfree(g16, 3, 4)
        ev = TaylorEvaluator(g16, np.asarray(u.hat), tol=1e-12)
        pts = np.random.default_rng(2).random((3, 300))
        val, gv = ev.evaluate(pts, grad=True)
        gh = np.stack([u.hat * g16.multiplier(j, 1) for j in range(3)], axis=1)
        ref = offgrid_eval(Field(g16, hat=gh), pts.T, "direct")
        assert np.max(np.abs(gv - ref)) < 1e-10 * np.max(np.abs(ref))
        assert np.max(np.abs(val - offgrid_eval(u, pts.T, "direct"))) < 1e-11

    def test_errors(self, g16):
        f = random_field(g16, 1, 3)
        with pytest.raises(ValueError):
            offgrid_eval(f, np.zeros((4, 2)))
        with pytest.raises(ValueError):
            offgrid_eval(f, np.full((1, 3), np.nan))
        with pytest.raises(ValueError):
            offgrid_eval(f, np.zeros((1, 3)), method="spline")


class TestTrajectory:
    def test_zero_velocity(self, g16):
        slab = VelocitySlab.frozen(constant(g16, [0.0, 0.0, 0.0]))
        tr = backward_trajectory(slab, 0.1)
        assert np.max(np.abs(tr.displacement)) == 0.0
        d = deformation_gradient(slab, tr)
        assert np.array_equal(d.a, np.broadcast_to(np.eye(3).reshape(3, 3, 1, 1, 1), d.a.shape))

    def test_constant_velocity(self, g16):
        c = np.array([0.3, -1.2, 0.7])
        slab = VelocitySlab.frozen(constant(g16, c))
        tr = backward_trajectory(slab, 0.05, substeps=2)
        assert np.allclose(tr.displacement, (-0.05 * c).reshape(3, 1, 1, 1), atol=1e-15)
        pts = tr.points
        assert np.all((pts >= 0.0) & (pts < 1.0))

    def test_shear_exact(self, g16):
        amp, dt = 0.8, 0.1
        slab = VelocitySlab.frozen(shear(g16, amp))
        tr = backward_trajectory(slab, dt)
        y = np.broadcast_to(g16.nodes[1], g16.shape)
        assert np.allclose(tr.displacement[0], -dt * amp * np.sin(TWO_PI * y), atol=1e-13)
        assert np.allclose(tr.displacement[1:], 0.0, atol=1e-14)
        d = deformation_gradient(slab, tr)
        expect = np.zeros((3, 3) + g16.shape)
        expect[0, 0] = expect[1, 1] = expect[2, 2] = 1.0
        expect[0, 1] = dt * amp * TWO_PI * np.cos(TWO_PI * y)
        assert np.allclose(d.a, expect, atol=1e-12)
        expect[0, 1] *= 0.5
        assert np.allclose(d.a_mid, expect, atol=1e-12)
        assert np.max(np.abs(d.det - 1.0)) < 1e-13

    def test_time_interpolated_slab(self, g16):
        # v(t) = t c, so the backward displacement over [0, 1] is -c/2
        c = np.array([1.0, 0.5, -0.25])
        slab = VelocitySlab.from_fields([0.0, 1.0], [constant(g16, 0.0 * c), constant(g16, c)])
        tr = backward_trajectory(slab, 1.0)
        assert np.allclose(tr.displacement, (-0.5 * c).reshape(3, 1, 1, 1), atol=1e-14)

    def test_slab_validation(self, g16):
        v = constant(g16, [0.0, 0.0, 0.0])
        with pytest.raises(ValueError):
            VelocitySlab.from_fields([1.0, 0.0], [v, v])
        with pytest.raises(ValueError):
            VelocitySlab.frozen(constant(g16, 1.0))
        with pytest.raises(ValueError):
            backward_trajectory(VelocitySlab.frozen(v), 0.0)


class TestAlgebra:
    def test_adjugate_inverse(self):
        rng = np.random.default_rng(0)
        b = rng.normal(size=(3, 3, 40))
        adj = adjugate(b)
        prod = np.einsum("ik...,kj...->ij...", b, adj)
        assert np.allclose(prod, det3(b) * np.eye(3)[..., None], atol=1e-12)
        assert np.allclose(det3(b), np.linalg.det(np.moveaxis(b, -1, 0)))

    def test_relaxation_weights(self):
        dt = 0.3
        assert np.allclose(relaxation_weights(0.0, dt), (dt / 6, 4 * dt / 6, dt / 6), rtol=1e-14)
        g = 2.5
        w = relaxation_weights(g, dt)
        assert abs(sum(w) - (1 - math.exp(-g * dt)) / g) < 1e-15
        m2 = quad(lambda t: math.exp(-g * t) * t * t, 0, dt)[0]
        assert abs(w[1] * (dt / 2) ** 2 + w[2] * dt**2 - m2) < 1e-15


class TestSigmaStep:
    def test_rest_closed_form(self, g16):
        p = PhysParams(0.4, 1.0, 0.5)
        v = constant(g16, [0.0, 0.0, 0.0])
        st = sigma_step_flowmap(identity_tensor(g16) * 2.0, VelocitySlab.frozen(v), p, 1.0)
        expect = 2.0 * math.exp(-p.gamma) + p.delta * (1 - math.exp(-p.gamma)) / p.gamma
        assert np.allclose(st.sigma.values, expect * np.eye(3).reshape(3, 3, 1, 1, 1), rtol=1e-14)

    def test_steady_shear_closed_form(self, g16):
        amp, dt = 0.6, 0.2
        p = PhysParams(0.3, 1.0, 0.8)
        slab = VelocitySlab.frozen(shear(g16, amp))
        st = sigma_step_flowmap(identity_tensor(g16), slab, p, dt)
        y = g16.nodes[1][0, 4, 0]
        L = np.zeros((3, 3))
        L[0, 1] = amp * TWO_PI * math.cos(TWO_PI * y)
        a = np.eye(3) + dt * L
        src = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                src[i, j] = quad(lambda t: math.exp(-p.gamma * t) * ((np.eye(3) + t * L) @ (np.eye(3) + t * L).T)[i, j],
                                 0, dt, epsabs=1e-15)[0]
        expect = math.exp(-p.gamma * dt) * a @ a.T + p.delta * src
        assert np.allclose(st.sigma.values[:, :, 3, 4, 5], expect, atol=1e-12)

    def test_gram_stays_psd(self, g16):
        rng_u = random_divfree(g16, 8, 3, amplitude=0.5)
        b = random_field(g16, 9, 3, shape=(3, 3)).values
        gram = Field(g16, values=np.einsum("ik...,jk...->ij...", b, b), symmetric=True)
        p = PhysParams(0.5, 1.0, 1.0)
        info = FlowStepInfo()
        st = sigma_step_flowmap(gram, VelocitySlab.frozen(rng_u), p, 0.005, info=info)
        v = st.sigma.values
        assert np.array_equal(v, np.swapaxes(v, 0, 1))
        assert min_eig_sigma(st.sigma) >= -1e-8 * (1 + np.max(np.abs(v)))
        assert info.sigma_steps == 1 and info.max_det_deviation < 1e-6

    def test_embedded_planar_structure(self):
        g = Grid(16, 16, 4)
        x, y = g.nodes[0], g.nodes[1]
        psi = np.sin(TWO_PI * x) * np.cos(TWO_PI * 2 * y) + 0.3 * np.cos(TWO_PI * (x + y))
        ph = Field(g, values=np.broadcast_to(psi, g.shape)).hat
        u = Field(g, hat=np.stack([ph * g.multiplier(1, 1), -ph * g.multiplier(0, 1), 0 * ph]))
        sig = np.zeros((3, 3) + g.shape)
        sig[0, 0] = sig[1, 1] = 1.0
        sig[0, 1] = sig[1, 0] = 0.2 * np.sin(TWO_PI * x)
        p = PhysParams(1.0, 1.0, 1.0)
        st = sigma_step_flowmap(Field(g, values=sig, symmetric=True), VelocitySlab.frozen(u), p, 0.05)
        v = st.sigma.values
        assert np.max(np.abs(v[2])) < 1e-14 and np.max(np.abs(v[:, 2])) < 1e-14
        assert np.max(np.abs(v - v[..., :1])) < 1e-12


class TestRun:
    def test_rest_and_zero_time(self, g16, J16):
        p = PhysParams(0.5, 1.0, 1.0)
        s0 = SimState.from_velocity(0.0, constant(g16, [0.0, 0.0, 0.0]), identity_tensor(g16))
        seen = []
        assert run_nondiffusive(s0, p, NO_FORCING, J16, T=0.0, dt=0.1, sink=seen.append) is s0
        assert seen == [s0]
        out = run_nondiffusive(s0, p, NO_FORCING, J16, T=1.0, dt=0.1, sink=seen.append, diag_stride=5)
        eq = p.delta / p.gamma
        expect = eq + (1.0 - eq) * math.exp(-p.gamma)
        assert np.allclose(out.sigma.values, expect * np.eye(3).reshape(3, 3, 1, 1, 1), rtol=1e-13)
        assert [round(s.t, 12) for s in seen[1:]] == [0.0, 0.5, 1.0]

    def test_merged_half_steps_match_records(self, g16, J16):
        p = PhysParams(0.5, 2.0, 1.0)
        s0 = SimState.from_velocity(0.0, random_divfree(g16, 2, 2, amplitude=0.5), identity_tensor(g16))
        a = run_nondiffusive(s0, p, NO_FORCING, J16, T=0.1, dt=0.02, diag_stride=1)
        b = run_nondiffusive(s0, p, NO_FORCING, J16, T=0.1, dt=0.02, diag_stride=5)
        # merged half steps differ only by the trajectory truncation error
        assert rel(b.sigma.values, a.sigma.values) < 1e-6

    def test_errors(self, g16, J16):
        s0 = SimState.from_velocity(0.0, random_divfree(g16, 2, 2), identity_tensor(g16))
        with pytest.raises(ValueError):
            run_nondiffusive(s0, PhysParams(0.5, 1.0, 1.0, 0.1), NO_FORCING, J16, T=0.1, dt=0.01)
        with pytest.raises(FlowMapError):
            run_nondiffusive(s0, PhysParams(0.5, 1.0, 1.0), NO_FORCING, J16, T=0.02, dt=0.01, tol_det=1e-30)
