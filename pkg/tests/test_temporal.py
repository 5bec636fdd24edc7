from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from collapse_lab import noise as nz
from collapse_lab import temporal_model as tm
from collapse_lab.errors import CollapseLabError
from collapse_lab.hilbert import StateVector, TimeGrid, commutator, pauli
from collapse_lab.spatial_model import SpatialModelSpec, evolve_spatial_trajectory
from collapse_lab.temporal_model import (
    Channel,
    KernelProfile,
    SOperatorResult,
    TemporalModelSpec,
    Window,
)

from conftest import random_density, random_hermitian

P = pauli()
PLUS = StateVector(np.array([1, 1]) / math.sqrt(2))
GRID = TimeGrid(0.0, 0.4, 0.002)
ELL = 0.02


def qubit(form="box", g=1.0, omega=0.0, n=P["Z"], ell=ELL, window=True, envelope="triangle"):
    return TemporalModelSpec(2, [Channel(n, KernelProfile(form, ell, g, omega, envelope))], use_window=window)


kernels = st.one_of(
    st.builds(KernelProfile, st.sampled_from(["box", "triangle", "gauss-truncated"]),
              st.floats(0.005, 0.2), st.floats(0.0, 3.0)),
    st.builds(lambda ell, g, x, env: KernelProfile("modulated", ell, g, x / ell, env),
              st.floats(0.005, 0.2), st.floats(0.0, 3.0), st.floats(-1.5, 1.5),
              st.sampled_from(["box", "triangle", "gauss-truncated"])),
)


class TestKernel:
    def test_unknown_form(self):
        with pytest.raises(CollapseLabError):
            KernelProfile("lorentz", 0.1)

    def test_sign_change_rejected(self):
        with pytest.raises(CollapseLabError):
            KernelProfile("modulated", 0.1, 1.0, 20.0)

    def test_nonpositive_ell(self):
        with pytest.raises(CollapseLabError):
            KernelProfile("box", 0.0)

    @given(kernels, st.floats(-1.0, 1.0))
    def test_invariants(self, k, x):
        tau = x * 1.5 * k.ell
        assert abs(np.conj(k(tau)) - k(-tau)) <= 1e-12 * max(1.0, abs(k(tau)))
        assert (k(tau) + k(-tau)).real >= -1e-12
        if abs(tau) > k.ell * (1 + 1e-9):
            assert k(tau) == 0

    @given(kernels, st.sampled_from([1e-3, 2.5e-3]))
    def test_samples_conjugate_symmetric(self, k, step):
        _, v = k.samples(step)
        assert np.array_equal(v, v[::-1].conj())

    @pytest.mark.parametrize("form", ["box", "triangle", "gauss-truncated"])
    def test_envelope_integrates_to_g(self, form):
        k = KernelProfile(form, 0.1, 1.7)
        x = np.linspace(-0.1, 0.1, 200001)
        assert np.trapezoid(k.env(x), x) == pytest.approx(1.7, rel=1e-5)  # O(dx) from the box edge

    @pytest.mark.parametrize("env", ["box", "triangle"])
    def test_real_integral_closed_form(self, env):
        k = KernelProfile("modulated", 0.1, 1.3, 12.0, env)
        x = np.linspace(-0.1, 0.1, 400001)
        assert np.trapezoid(k(x).real, x) == pytest.approx(k.real_integral(), rel=1e-6)


class TestWindow:
    def test_profile(self):
        w = Window(0.0, 1.0, 0.05)
        assert w(0.0) == 0 and w(0.1) == 0 and w(0.9) == 0 and w(1.0) == 0
        assert w(0.2) == 1 and w(0.5) == 1
        t = np.linspace(0, 1, 1001)
        assert np.all((w(t) >= 0) & (w(t) <= 1))

    def test_disabled(self):
        assert np.all(Window(0, 1, 0.05, enabled=False)(np.linspace(0, 1, 11)) == 1)

    def test_too_short_interval(self):
        with pytest.raises(CollapseLabError):
            qubit().check_window_fits(TimeGrid(0, 0.1, 0.002))

    def test_ell_must_be_grid_multiple(self):
        with pytest.raises(CollapseLabError) as e:
            qubit(ell=0.003).support_nodes(GRID)
        assert e.value.code == "grid-misalignment"


class TestContraction:
    def test_bound_value(self):
        # box peak g/(2 ell), ||sigma_z|| = 1, noise scale 1/sqrt(2 ell)
        b = tm.contraction_bound(qubit(g=0.5), GRID, "windowed-sweep")
        ref = (0.5 / (2 * ELL)) / math.sqrt(2 * ELL) * 2 * ELL * 2 * ELL
        assert b == pytest.approx(ref, rel=1e-12)

    def test_violation(self):
        with pytest.raises(CollapseLabError) as e:
            tm.check_contraction(qubit(g=5.0), GRID, "fixed-point")
        assert e.value.code == "contraction-violated"
        assert e.value.detail["bound"] >= 0.5


class TestPotential:
    path = nz.sample_noise_path(GRID, 1, 5)

    def test_outside_support(self):
        assert np.all(tm.eval_potential(qubit(), self.path, 0.2, 0.2 + 2 * ELL).data == 0)

    def test_real_even_symmetric(self):
        spec = qubit("triangle")
        a = tm.eval_potential(spec, self.path, 0.2, 0.21).data
        b = tm.eval_potential(spec, self.path, 0.21, 0.2).data
        assert np.array_equal(a, b)

    def test_box_hand_value(self):
        spec = qubit("box", g=1.0)
        t, tp = 0.2, 0.21
        j = self.path.grid.index_of(0.5 * (t + tp))
        w = float(spec.window(GRID)(0.205))
        ref = self.path.values[0, j] / (2 * ELL) * w * P["Z"]
        assert np.allclose(tm.eval_potential(spec, self.path, t, tp).data, ref, rtol=1e-14, atol=0)

    def test_off_grid_midpoint(self):
        with pytest.raises(CollapseLabError) as e:
            tm.eval_potential(qubit(), self.path, 0.2, 0.2005)
        assert e.value.code == "grid-misalignment"

    def test_hermitian_symmetry_all_pairs(self):
        spec = qubit("modulated", omega=40.0, n=P["Y"] + 0.3 * P["X"])
        ts = GRID.times[90:110]
        for a in ts:
            for b in ts:
                if abs(a - b) <= ELL + 1e-12:
                    v1 = tm.eval_potential(spec, self.path, a, b).data
                    v2 = tm.eval_potential(spec, self.path, b, a).data
                    assert np.max(np.abs(v1.conj().T - v2)) <= 1e-10


class TestDyson:
    def test_zero_kernel(self):
        spec = qubit(g=0.0)
        rec = tm.solve_nonlocal_dyson(spec, nz.sample_noise_path(GRID, 1, 1), GRID, PLUS)
        assert np.array_equal(rec.states, np.broadcast_to(PLUS.data, rec.states.shape))

    @pytest.mark.parametrize("n", [P["Z"], P["X"] + 0.5 * P["Y"]])
    def test_solvers_agree_and_meet_residual(self, n):
        spec = qubit("modulated", g=0.5, omega=40.0, n=n)
        path = nz.sample_noise_path(GRID, 1, 2)
        a = tm.solve_nonlocal_dyson(spec, path, GRID, PLUS, "fixed-point", 1e-12)
        b = tm.solve_nonlocal_dyson(spec, path, GRID, PLUS, "windowed-sweep", 1e-12)
        assert np.abs(a.states - b.states).max() <= 1e-10
        disc = tm.Discretization.build(spec, GRID)
        coef = disc.coefficients(path.values[None])
        assert np.abs(tm.dyson_residual(disc, coef, PLUS.data, b.states[None])).max() <= 1e-11

    def test_two_channels_non_commuting(self):
        spec = TemporalModelSpec(2, [Channel(P["X"], KernelProfile("triangle", ELL, 0.4)),
                                     Channel(P["Z"], KernelProfile("box", ELL, 0.3))])
        path = nz.sample_noise_path(GRID, 2, 3)
        a = tm.solve_nonlocal_dyson(spec, path, GRID, PLUS, "fixed-point", 1e-12)
        b = tm.solve_nonlocal_dyson(spec, path, GRID, PLUS, "windowed-sweep", 1e-12)
        assert np.abs(a.states - b.states).max() <= 1e-10

    def test_divergence_reported(self):
        spec = qubit(g=40.0, window=False)
        with pytest.raises(CollapseLabError) as e:
            tm.solve_nonlocal_dyson(spec, nz.sample_noise_path(GRID, 1, 4), GRID, PLUS, "fixed-point")
        assert e.value.code in ("dyson-divergence", "dyson-no-convergence")
        assert e.value.detail["residual_history"]
        assert e.value.detail["seeds"] == [4]

    def test_iteration_cap(self):
        spec = qubit(g=0.5)
        with pytest.raises(CollapseLabError) as e:
            tm.solve_nonlocal_dyson(spec, nz.sample_noise_path(GRID, 1, 4), GRID, PLUS, "fixed-point", 1e-14, 2)
        assert e.value.code == "dyson-no-convergence"

    def test_unknown_solver(self):
        with pytest.raises(CollapseLabError):
            tm.solve_nonlocal_dyson(qubit(), nz.sample_noise_path(GRID, 1, 4), GRID, PLUS, "newton")

    def test_local_limit(self):
        # The same noise path drives both models. The smoothed phase differs
        # from the local one by int Delta(s) [B(t + s/2) - B(t)] ds, whose
        # standard deviation is of order sqrt(ell).
        h = 1 / 1024
        grid = TimeGrid(0.0, 1.0, h)
        ms = (2, 4, 8)
        dev = np.zeros(len(ms))
        for seed in range(20):
            path = nz.sample_noise_path(grid, 1, seed)
            ref = evolve_spatial_trajectory(SpatialModelSpec(2, [0.5 * P["X"]]), PLUS, grid, path).states
            for k, m in enumerate(ms):
                spec = qubit("box", 0.5, n=P["X"], ell=m * h, window=False)
                got = tm.solve_nonlocal_dyson(spec, path, grid, PLUS, "windowed-sweep", 1e-12).states
                dev[k] += np.abs(got - ref).max() / 20
        ratios = dev[1:] / dev[:-1]
        assert np.all(ratios > 1.0)
        assert np.all(np.abs(ratios - math.sqrt(2)) <= 0.3 * math.sqrt(2))
        slope = np.polyfit(np.log(ms), np.log(dev), 1)[0]
        assert abs(slope - 0.5) <= 0.15

    def test_second_order_remainder_scales_as_g_squared(self):
        spec = qubit("modulated", 1.0, 40.0, P["X"])
        path = nz.sample_noise_path(GRID, 1, 6)
        disc = tm.Discretization.build(spec, GRID)
        rem = []
        gs = np.array([0.4, 0.2, 0.1])
        for g in gs:
            s = tm.with_amplitude(spec, g)
            coef = tm.Discretization.build(s, GRID).coefficients(path.values[None])
            psi = tm.solve_nonlocal_dyson(s, path, GRID, PLUS, "fixed-point", 1e-13).states
            first = PLUS.data - 1j * tm._cumtrap(disc.apply(coef, np.broadcast_to(PLUS.data, (1, GRID.n, 2))),
                                                  GRID.h)[0]
            rem.append(np.abs(psi - first).max())
        slope = np.polyfit(np.log(gs), np.log(rem), 1)[0]
        assert abs(slope - 2) <= 0.2


def _solve(spec, seed, psi0=PLUS, tol=1e-12, grid=GRID):
    path = nz.sample_noise_path(grid, spec.channel_count, seed)
    return path, tm.solve_nonlocal_dyson(spec, path, grid, psi0, "windowed-sweep", tol)


class TestCommutatorInnerProduct:
    def test_zero_potential(self):
        spec = qubit(g=0.0)
        path, a = _solve(spec, 1)
        b = tm.solve_nonlocal_dyson(spec, path, GRID, StateVector([0.6, 0.8j]))
        assert tm.commutator_inner_product(a, b, 0.2, spec, path) == pytest.approx(np.vdot(a.states[100],
                                                                                       b.states[100]))

    @given(st.integers(0, 2**16), st.floats(0.1, 0.3))
    def test_conjugate_symmetry(self, seed, t):
        t = round(t / GRID.h) * GRID.h
        spec = qubit("modulated", 0.5, 40.0, P["X"] + P["Z"])
        rng = np.random.default_rng(seed)
        path, a = _solve(spec, seed, StateVector(random_density(rng, 2)[0]))
        b = tm.solve_nonlocal_dyson(spec, path, GRID, StateVector(rng.normal(size=2) + 1j * rng.normal(size=2)))
        ab = tm.commutator_inner_product(a, b, t, spec, path)
        ba = tm.commutator_inner_product(b, a, t, spec, path)
        assert abs(ab - np.conj(ba)) <= 1e-12

    def test_conservation(self):
        spec = qubit("modulated", 1.0, 60.0)
        disc = tm.Discretization.build(spec, GRID)
        for seed in range(5):
            path, rec = _solve(spec, seed)
            coef = disc.coefficients(path.values[None])
            ip = tm.commutator_ip_series(disc, coef, rec.states[None], rec.states[None])[0]
            plain = rec.norm_series
            assert np.abs(ip - ip[0]).max() <= 100 * (GRID.h**2 + 1e-12)
            assert np.abs(plain - 1).max() > np.abs(ip - 1).max()

    def test_insufficient_window(self):
        spec = qubit()
        path, a = _solve(spec, 1)
        with pytest.raises(CollapseLabError) as e:
            tm.commutator_inner_product(a, a, 0.01, spec, path)
        assert e.value.code == "insufficient-window"


def _oracle_s(spec, path, t):
    """S_t by a direct double sum of the potential over straddling pairs."""
    grid = path.state_grid
    i = grid.index_of(t)
    h = grid.h

    def theta(x):
        return 1.0 if x > 0 else (0.5 if x == 0 else 0.0)

    out = np.zeros((2, 2), dtype=complex)
    L = int(round(spec.ell / h))
    for p in range(i - L, i + L + 1):
        for q in range(i - L, i + L + 1):
            if abs(p - q) > L:
                continue
            w = theta(i - p) * theta(q - i) - theta(p - i) * theta(i - q)
            if w:
                out += 1j * w * h * h * tm.eval_potential(spec, path, grid.times[p], grid.times[q]).data
    return out


class TestSOperator:
    def test_zero_potential(self):
        spec = qubit(g=0.0)
        assert np.all(tm.build_S_operator(0.2, spec, nz.sample_noise_path(GRID, 1, 0)).S.data == 0)

    def test_switch_off_region(self):
        spec = qubit()
        s = tm.build_S_operator(0.4 - 2 * ELL + ELL / 2, spec, nz.sample_noise_path(GRID, 1, 0))
        assert np.all(s.S.data == 0)

    @pytest.mark.parametrize("form,omega", [("box", 0.0), ("modulated", 40.0)])
    def test_matches_direct_sum(self, form, omega):
        spec = qubit(form, 1.0, omega)
        path = nz.sample_noise_path(GRID, 1, 7)
        for t in (0.15, 0.2, 0.251):
            t = GRID.times[GRID.index_of(round(t / GRID.h) * GRID.h)]
            got = tm.build_S_operator(t, spec, path)
            assert np.abs(got.S.data - _oracle_s(spec, path, t)).max() <= 1e-8
            assert got.order == 1

    def test_dyson_propagation(self):
        spec = qubit("modulated", 0.3, 40.0, P["X"])
        path = nz.sample_noise_path(GRID, 1, 8)
        a = tm.build_S_operator(0.2, spec, path, "identity")
        b = tm.build_S_operator(0.2, spec, path, "dyson")
        assert b.order == 2
        assert np.abs(a.S.data - b.S.data).max() <= 0.1 * max(np.abs(a.S.data).max(), 1e-3)
        with pytest.raises(CollapseLabError):
            tm.build_S_operator(0.2, spec, path, "magnus")


class TestTransform:
    def _s(self, m):
        from collapse_lab.hilbert import HermitianOperator
        m = np.asarray(m, dtype=complex)
        return SOperatorResult(0.0, HermitianOperator(m), 1, float(np.linalg.eigvalsh(np.eye(2) + m)[0]))

    def test_zero(self):
        assert np.array_equal(tm.transform_state(PLUS, self._s(np.zeros((2, 2)))).data, PLUS.data)

    def test_diagonal(self):
        assert np.allclose(tm.transform_state(StateVector([1, 0]), self._s(np.diag([3.0, 0]))).data, [2, 0])

    def test_not_positive_definite(self):
        with pytest.raises(CollapseLabError) as e:
            tm.transform_state(PLUS, self._s(np.diag([-2.0, 0])))
        assert e.value.code == "not-positive-definite"

    @given(st.integers(0, 2**32 - 1))
    def test_round_trip_and_norm_identity(self, seed):
        rng = np.random.default_rng(seed)
        s = random_hermitian(rng, 2, 0.1)
        psi = StateVector(rng.normal(size=2) + 1j * rng.normal(size=2))
        out = tm.transform_state(psi, self._s(s)).data
        w, v = np.linalg.eigh(np.eye(2) + s)
        back = (v / np.sqrt(w)) @ v.conj().T @ out
        assert np.abs(back - psi.data).max() <= 1e-8
        lhs = np.vdot(psi.data, (np.eye(2) + s) @ psi.data).real
        assert abs(np.vdot(out, out).real - lhs) <= 1e-9 * lhs


class TestRates:
    def test_zero_kernel(self):
        tab = tm.rates_ab(KernelProfile("box", 0.1, 0.0))
        assert np.all(tab.a == 0) and np.all(tab.b == 0) and tab.gamma == 0

    @pytest.mark.parametrize("ell", [0.01, 0.05, 0.2])
    def test_box_quarter(self, ell):
        k = KernelProfile("box", ell, 1.0)
        assert tm.lindblad_rate(k) == pytest.approx(0.25, abs=1e-8)
        assert tm.lindblad_rate_closed_form(k) == 0.25

    @given(kernels, st.floats(0.1, 3.0))
    def test_homogeneous_degree_two(self, k, c):
        k2 = KernelProfile(k.form, k.ell, k.g * c, k.omega, k.envelope)
        assert tm.lindblad_rate(k2) == pytest.approx(c * c * tm.lindblad_rate(k), rel=1e-9, abs=1e-14)

    @given(kernels)
    def test_nonnegative(self, k):
        tab = tm.rates_ab(k)
        assert np.all(tab.a >= -1e-12) and np.all(tab.b >= -1e-12) and tab.gamma >= 0

    @pytest.mark.parametrize("env", ["box", "triangle"])
    def test_modulated_gamma_matches_closed_form(self, env):
        k = KernelProfile("modulated", 0.04, 1.0, 30.0, env)
        assert tm.lindblad_rate(k, panels=16) == pytest.approx(tm.lindblad_rate_closed_form(k), rel=1e-8)

    def test_triangle_b_closed_form(self):
        # real even: b(z) = 2 int_z^inf Delta(2 nu) d nu; for the triangle with g = ell = 1
        # this is (1 - 2z)^2 / 2 on [0, 1/2].
        k = KernelProfile("triangle", 1.0, 1.0)
        z = np.array([0.0, 0.1, 0.3, 0.45])
        assert np.allclose(tm.rate_b(k, z), (1 - 2 * z) ** 2 / 2, atol=1e-12)
        assert np.allclose(tm.rate_a(k, z), 2 * k.env(2 * z))


class TestXYZ:
    ch_real = Channel(P["Z"], KernelProfile("triangle", 0.1, 1.0))
    ch_mod = Channel(P["X"], KernelProfile("modulated", 0.1, 1.0, 12.0))

    def test_support(self):
        x, _, _ = tm.build_XYZ(0.0, 0.06, self.ch_real)
        assert np.all(x.data == 0)

    def test_real_even(self):
        x, _, _ = tm.build_XYZ(0.0, 0.01, self.ch_real)
        a, _ = tm.build_AB(0.01, self.ch_real)
        assert np.allclose(x.data, x.data.conj().T)
        assert np.allclose(a.data, x.data)

    @pytest.mark.parametrize("zeta", [-0.04, -0.01, 0.0, 0.02, 0.045])
    def test_modulated_ab(self, zeta):
        x, _, z = tm.build_XYZ(0.0, zeta, self.ch_mod)
        a, b = tm.build_AB(zeta, self.ch_mod)
        assert np.allclose(a.data, 0.5 * (x.data + x.data.conj().T))
        assert np.allclose(a.data, float(tm.rate_a(self.ch_mod.kernel, zeta)) * P["X"])
        assert np.allclose(b.data, float(tm.rate_b(self.ch_mod.kernel, zeta)[0]) * P["X"])
        # a = 2 g(2 zeta) cos(2 omega zeta)
        k = self.ch_mod.kernel
        assert float(tm.rate_a(k, zeta)) == pytest.approx(2 * float(k.env(2 * zeta)) * math.cos(2 * k.omega * zeta))

    def test_window_factor(self):
        w = Window(0.0, 1.0, 0.1)
        x, y, z = tm.build_XYZ(0.25, 0.01, self.ch_mod, w)
        x0, y0, z0 = tm.build_XYZ(0.25, 0.01, self.ch_mod)
        f = float(w(0.26))
        assert np.allclose(x.data, f * x0.data) and np.allclose(z.data, f * z0.data)


class TestEffectiveHamiltonian:
    def test_real_even_vanishes(self):
        spec = TemporalModelSpec(2, [Channel(P["Z"], KernelProfile("triangle", 0.05, 1.0)),
                                     Channel(P["X"], KernelProfile("box", 0.05, 0.7))])
        terms = tm.effective_hamiltonian_terms(0.0, spec)
        assert np.abs(terms["third"]).max() <= 1e-10

    def test_single_channel_commutators_zero(self):
        terms = tm.effective_hamiltonian_terms(0.0, qubit("modulated", 1.0, 40.0, P["X"] + P["Y"]))
        assert np.all(terms["commutator_1"] == 0) and np.all(terms["commutator_2"] == 0)

    def test_modulated_trace_shift(self):
        spec = qubit("modulated", 1.0, 40.0)
        third = tm.effective_hamiltonian_terms(0.0, spec)["third"]
        assert np.abs(third - third.conj().T).max() <= 1e-10
        assert np.abs(third - third[0, 0] * np.eye(2)).max() <= 1e-12
        assert abs(third[0, 0]) > 1e-3
        h = tm.effective_hamiltonian(0.0, spec).data
        assert h[0, 0] == pytest.approx(tm.hamiltonian_coefficient(spec.channels[0].kernel), rel=1e-10)

    def test_h0_included(self):
        spec = TemporalModelSpec(2, [], H0=P["Z"])
        assert np.allclose(tm.effective_hamiltonian(0.0, spec).data, P["Z"])


class TestMasterEquation:
    def test_zero_kernel_is_unitary(self):
        spec = TemporalModelSpec(2, [Channel(P["Z"], KernelProfile("box", 0.1, 0.0))], H0=P["X"])
        s = random_density(np.random.default_rng(0), 2)
        assert np.allclose(tm.lindblad_rhs_temporal(s, spec), -1j * commutator(P["X"], s))

    def test_box_dephasing_rate(self):
        # -2 gamma [N,[N,.]] with gamma = 1/4 damps sigma_z coherences at 8 gamma = 2.
        spec = qubit("box", 1.0, window=False)
        rhs = tm.lindblad_rhs_temporal(np.full((2, 2), 0.5), spec)
        assert rhs[0, 1] / 0.5 == pytest.approx(-2.0, rel=1e-9)
        grid = TimeGrid(0.0, 1.0, 1e-3)
        out = tm.integrate_lindblad_temporal(np.full((2, 2), 0.5), spec, grid)
        assert np.max(np.abs(out[:, 0, 1] / (0.5 * np.exp(-2 * grid.times)) - 1)) <= 1e-6
        assert np.allclose(np.trace(out, axis1=1, axis2=2), 1, atol=1e-10)

    def test_diagonal_state_constant(self):
        spec = TemporalModelSpec(2, [Channel(P["Z"], KernelProfile("modulated", 0.02, 1.0, 40.0))])
        out = tm.integrate_lindblad_temporal(np.diag([0.3, 0.7]), spec, GRID)
        assert np.allclose(out, np.diag([0.3, 0.7]), atol=1e-14)

    @given(st.integers(0, 2**32 - 1))
    def test_kossakowski_assembly(self, seed):
        rng = np.random.default_rng(seed)
        n = random_hermitian(rng, 3)
        ch = Channel(n, KernelProfile("triangle", 0.1, 1.3))
        spec = TemporalModelSpec(3, [ch])
        s = random_density(rng, 3)
        tab = tm.rates_ab(ch)
        assembled = np.zeros((3, 3), dtype=complex)
        for z, w in zip(tab.zeta, tab.weights):
            k = tm.kossakowski_kernel(ch, z).data
            assert np.allclose(k, k.conj().T)
            assembled -= 0.5 * w * commutator(k, commutator(k, s))
        rhs = tm.lindblad_rhs_temporal(s, spec, include_H=False)
        # The stated K = sqrt(ab/2) N yields a quarter of the dissipator.
        assert np.allclose(4 * assembled, rhs, atol=1e-10)
        assert abs(np.trace(rhs)) < 1e-12 and np.allclose(rhs, rhs.conj().T)


class TestEnsembles:
    spec = qubit("box", 0.5)

    def test_zero_noise_constant(self):
        rho = tm.ensemble_density_temporal(qubit(g=0.0), PLUS, GRID, 4, 0)
        assert np.allclose(rho, np.full((2, 2), 0.5))

    def test_s_zero_in_switch_regions(self):
        # S vanishes identically for real kernels, so use a modulated one.
        disc = tm.Discretization.build(qubit("modulated", 0.5, 40.0), GRID)
        W = nz.sample_ensemble_values(GRID, 1, 3, 4)
        sig = tm.s_scalars(disc, disc.coefficients(W))
        # The envelope is zero up to 2 ell and straddling pairs have midpoints
        # within ell/2 of t, so S vanishes on the first 1.5 ell.
        edge = int(round(1.5 * ELL / GRID.h)) + 1
        assert np.all(sig[:, :, :edge] == 0) and np.all(sig[:, :, -edge:] == 0)
        assert np.any(sig != 0)

    def test_s_scalars_match_operator(self):
        spec = qubit("modulated", 0.5, 40.0)
        path = nz.sample_noise_path(GRID, 1, 9)
        disc = tm.Discretization.build(spec, GRID)
        sig = tm.s_scalars(disc, disc.coefficients(path.values[None]))[0, 0]
        i = 100
        assert np.allclose(sig[i] * P["Z"], tm.build_S_operator(GRID.times[i], spec, path).S.data, atol=1e-14)

    def test_phase_variance(self):
        disc = tm.Discretization.build(self.spec, GRID)
        A = tm.phase_functionals(disc)
        W = nz.sample_ensemble_values(GRID, 1, 4, 4000)
        phi = np.einsum("cnm,rcm->rcn", A, W)[:, 0, 100]
        var = (2 / GRID.h) * np.sum(A[0, 100] ** 2)
        assert phi.var() == pytest.approx(var, rel=5 * math.sqrt(2 / 4000))

    def test_control_variate_is_unbiased(self):
        r = 400
        plain = tm.ensemble_density_temporal(self.spec, PLUS, GRID, r, 12, solver="windowed-sweep")
        ctrl, se = tm.ensemble_density_controlled(self.spec, PLUS, GRID, r, 12)
        # plain estimator SE for an entry bounded by 1/2: 0.5/sqrt(r)
        assert np.abs(plain - ctrl).max() <= 5 * 0.5 / math.sqrt(r)
        assert se.max() < 0.5 / math.sqrt(r)

    def test_control_variate_needs_commuting(self):
        spec = TemporalModelSpec(2, [Channel(P["X"], KernelProfile("box", ELL, 0.3)),
                                     Channel(P["Z"], KernelProfile("box", ELL, 0.3))])
        with pytest.raises(CollapseLabError):
            tm.ensemble_density_controlled(spec, PLUS, GRID, 2, 0)

    def test_observer_sees_every_trajectory(self):
        seen = []
        tm.ensemble_density_controlled(self.spec, PLUS, GRID, 20, 1,
                                       observer=lambda d, c, p: seen.append(p.shape[0]))
        assert sum(seen) == 20

    def test_endpoints_untransformed(self):
        disc = tm.Discretization.build(self.spec, GRID)
        for _, _, coef, psi in tm.iter_temporal_ensemble(self.spec, PLUS, GRID, 8, 2, "windowed-sweep"):
            st_ = tm.transformed_batch(self.spec, disc, coef, psi)
            assert np.array_equal(st_[:, 0], psi[:, 0]) and np.array_equal(st_[:, -1], psi[:, -1])
            assert np.abs(psi[:, -1] - psi[:, 0]).max() > 0

    def test_chunking_does_not_change_results(self):
        a = [p for _, _, _, p in tm.iter_temporal_ensemble(self.spec, PLUS, GRID, 9, 2, chunk=4)]
        b = [p for _, _, _, p in tm.iter_temporal_ensemble(self.spec, PLUS, GRID, 9, 2, chunk=9)]
        # The noise is batch independent; the iteration count follows the
        # slowest member of a batch, so states agree to the solver tolerance.
        assert np.abs(np.concatenate(a) - np.concatenate(b)).max() <= 1e-9
