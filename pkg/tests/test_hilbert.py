from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from collapse_lab.errors import CollapseLabError
from collapse_lab.hilbert import (
    DensityMatrix,
    GeneralOperator,
    HermitianOperator,
    StateVector,
    TimeGrid,
    check_dims,
    eig_hermitian,
    expectation,
    expectation_sq,
    expm_hermitian_i,
    hermitian_sqrt,
    l2_inner,
    pauli,
    trace_distance,
    trace_distance_series,
)

from conftest import oracle_trace_distance, random_density, random_hermitian, random_state

P = pauli()
seeds = st.integers(0, 2**32 - 1)
dims = st.integers(1, 6)


class TestValueTypes:
    def test_state_rejects_nonfinite(self):
        with pytest.raises(CollapseLabError):
            StateVector([1.0, np.nan])

    def test_state_rejects_empty(self):
        with pytest.raises(CollapseLabError) as e:
            StateVector([])
        assert e.value.code == "dim-mismatch"

    def test_state_is_immutable(self):
        s = StateVector([1, 0])
        with pytest.raises(ValueError):
            s.data[0] = 2

    def test_normalized_tag(self):
        assert StateVector([1, 1j]).normalized().is_normalized()
        assert not StateVector([1, 1]).is_normalized()

    def test_operator_must_be_square(self):
        with pytest.raises(CollapseLabError) as e:
            GeneralOperator(np.zeros((2, 3)))
        assert e.value.code == "dim-mismatch"

    def test_hermitian_guard(self):
        with pytest.raises(CollapseLabError) as e:
            HermitianOperator([[0, 1], [0, 0]])
        assert e.value.code == "hermiticity-error"

    def test_hermitian_accepts_within_tolerance(self):
        a = P["X"].copy()
        a[0, 1] += 1e-12
        h = HermitianOperator(a)
        assert np.array_equal(h.data, h.data.conj().T)

    def test_density_checks(self):
        DensityMatrix(np.eye(2) / 2)
        with pytest.raises(CollapseLabError) as e:
            DensityMatrix(np.eye(2))
        assert e.value.code == "schema-error"
        with pytest.raises(CollapseLabError) as e:
            DensityMatrix(np.diag([1.5, -0.5]))
        assert e.value.code == "positivity-violation"

    def test_density_from_state(self):
        s = DensityMatrix.from_state(StateVector([1, 1j]))
        assert s.trace == pytest.approx(2.0)


class TestTimeGrid:
    def test_node_count(self):
        g = TimeGrid(0.0, 1.0, 1e-3)
        assert g.n == 1001
        assert g.times[-1] == pytest.approx(1.0)

    def test_rejects_nonpositive_step(self):
        with pytest.raises(CollapseLabError):
            TimeGrid(0.0, 1.0, 0.0)

    def test_rejects_non_integer_steps(self):
        with pytest.raises(CollapseLabError) as e:
            TimeGrid(0.0, 1.0, 0.3)
        assert e.value.code == "grid-misalignment"

    def test_rejects_single_node(self):
        with pytest.raises(CollapseLabError):
            TimeGrid(0.0, 0.0, 0.1)

    def test_index_of(self):
        g = TimeGrid(0.0, 1.0, 0.1)
        assert g.index_of(0.3) == 3
        with pytest.raises(CollapseLabError):
            g.index_of(0.35)
        with pytest.raises(CollapseLabError):
            g.index_of(2.0)

    def test_half(self):
        assert TimeGrid(0.0, 1.0, 0.1).half().n == 21


class TestInner:
    def test_orthogonal(self):
        assert l2_inner(StateVector([1, 0]), StateVector([0, 1])) == 0

    def test_normalized(self):
        v = StateVector(np.array([1, 1j]) / math.sqrt(2))
        assert l2_inner(v, v) == pytest.approx(1.0, abs=1e-15)

    def test_projection(self):
        assert l2_inner(StateVector([1, 0]), StateVector([0.3 - 2j, 5])) == 0.3 - 2j

    def test_dim_mismatch(self):
        with pytest.raises(CollapseLabError) as e:
            l2_inner(StateVector([1, 0]), StateVector([1, 0, 0]))
        assert e.value.code == "dim-mismatch"

    def test_dim_cap(self):
        with pytest.raises(CollapseLabError):
            check_dims(257)

    @given(seeds, dims)
    def test_conjugate_linear_first_argument(self, seed, d):
        rng = np.random.default_rng(seed)
        a, b = random_state(rng, d), random_state(rng, d)
        c = complex(rng.normal(), rng.normal())
        lhs = l2_inner(StateVector(c * a), StateVector(b))
        assert lhs == pytest.approx(np.conj(c) * l2_inner(StateVector(a), StateVector(b)), abs=1e-12)

    @given(seeds, dims)
    def test_hermitian_is_symmetric(self, seed, d):
        rng = np.random.default_rng(seed)
        a = random_hermitian(rng, d)
        x, y = random_state(rng, d), random_state(rng, d)
        lhs = l2_inner(StateVector(a @ x), StateVector(y))
        rhs = l2_inner(StateVector(x), StateVector(a @ y))
        assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs))


class TestSpectral:
    def test_pauli_z(self):
        w, _ = eig_hermitian(HermitianOperator(P["Z"]))
        assert np.allclose(w, [-1, 1])

    def test_pauli_x(self):
        w, v = eig_hermitian(HermitianOperator(P["X"]))
        assert np.allclose(w, [-1, 1])
        for k, ref in enumerate([np.array([1, -1]) / math.sqrt(2), np.array([1, 1]) / math.sqrt(2)]):
            assert abs(abs(np.vdot(ref, v[:, k])) - 1) < 1e-12

    @given(seeds, dims)
    def test_eig_residual(self, seed, d):
        a = random_hermitian(np.random.default_rng(seed), d)
        w, v = eig_hermitian(HermitianOperator(a))
        scale = max(1.0, np.abs(a).max())
        assert np.all(np.diff(w) >= 0)
        assert np.abs(a @ v - v * w).max() <= 1e-8 * scale
        assert np.abs(v.conj().T @ v - np.eye(d)).max() <= 1e-8

    def test_sqrt_identity(self):
        assert np.allclose(hermitian_sqrt(HermitianOperator(np.eye(3))).data, np.eye(3))

    def test_sqrt_diagonal(self):
        assert np.allclose(hermitian_sqrt(HermitianOperator(np.diag([4.0, 1.0]))).data, np.diag([2.0, 1.0]))

    def test_sqrt_rejects_indefinite(self):
        with pytest.raises(CollapseLabError) as e:
            hermitian_sqrt(HermitianOperator(np.diag([1.0, -0.5])))
        assert e.value.code == "not-positive-definite"
        assert e.value.detail["eigenvalue"] == pytest.approx(-0.5)

    def test_sqrt_random_pd(self, rng):
        q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        a = q.T @ np.diag([0.5, 1.0, 2.0, 7.0]) @ q
        b = hermitian_sqrt(HermitianOperator(a)).data
        assert np.abs(b @ b - a).max() <= 1e-8 * np.abs(a).max()
        assert np.linalg.eigvalsh(b)[0] > 0

    @given(seeds, dims)
    def test_sqrt_round_trip(self, seed, d):
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d)))
        b = (q * rng.uniform(0.2, 3.0, size=d)) @ q.conj().T
        b = 0.5 * (b + b.conj().T)
        got = hermitian_sqrt(HermitianOperator(b @ b)).data
        assert np.abs(got - b).max() <= 1e-7 * np.abs(b).max()

    @given(seeds, dims)
    def test_expm_is_unitary(self, seed, d):
        u = expm_hermitian_i(random_hermitian(np.random.default_rng(seed), d, 3.0))
        assert np.abs(u.conj().T @ u - np.eye(d)).max() < 1e-12

    def test_expm_matches_closed_form(self):
        u = expm_hermitian_i(0.7 * P["X"])
        assert np.allclose(u, math.cos(0.7) * np.eye(2) - 1j * math.sin(0.7) * P["X"], atol=1e-14)


class TestTraceDistance:
    def test_equal(self):
        s = np.diag([0.3, 0.7])
        assert trace_distance(s, s) == 0

    def test_orthogonal(self):
        assert trace_distance(DensityMatrix(np.diag([1.0, 0])), DensityMatrix(np.diag([0, 1.0]))) == pytest.approx(1)

    def test_mixed(self):
        assert trace_distance(np.diag([0.75, 0.25]), np.diag([0.5, 0.5])) == pytest.approx(0.25, abs=1e-15)

    def test_dim_mismatch(self):
        with pytest.raises(CollapseLabError):
            trace_distance(np.eye(2) / 2, np.eye(3) / 3)

    @given(seeds, st.integers(1, 5))
    def test_properties(self, seed, d):
        rng = np.random.default_rng(seed)
        a, b, c = (random_density(rng, d) for _ in range(3))
        ab = trace_distance(a, b)
        assert ab == pytest.approx(trace_distance(b, a), abs=1e-14)
        assert ab == pytest.approx(oracle_trace_distance(a, b), abs=1e-12)
        assert -1e-15 <= ab <= 1 + 1e-12
        assert trace_distance(a, c) <= ab + trace_distance(b, c) + 1e-9

    def test_series_matches_scalar(self, rng):
        a = np.stack([random_density(rng, 3) for _ in range(5)])
        b = np.stack([random_density(rng, 3) for _ in range(5)])
        ser = trace_distance_series(a, b)
        assert np.allclose(ser, [trace_distance(x, y) for x, y in zip(a, b)], atol=1e-14)


class TestExpectation:
    z = HermitianOperator(P["Z"])

    def test_eigenstate(self):
        s = StateVector([1, 0])
        assert expectation(s, self.z) == 1
        assert expectation_sq(s, self.z) - expectation(s, self.z) ** 2 == 0

    def test_superposition(self):
        s = StateVector(np.array([1, 1]) / math.sqrt(2))
        assert expectation(s, self.z) == pytest.approx(0, abs=1e-15)
        assert expectation_sq(s, self.z) == pytest.approx(1)

    def test_weighted(self):
        assert expectation(StateVector([math.sqrt(0.8), math.sqrt(0.2)]), self.z) == pytest.approx(0.6, abs=1e-14)

    def test_unnormalized_warns_and_divides(self):
        with pytest.warns(UserWarning):
            assert expectation(StateVector([2, 0]), self.z) == pytest.approx(1)

    @given(seeds, dims)
    def test_variance_nonnegative(self, seed, d):
        rng = np.random.default_rng(seed)
        o = HermitianOperator(random_hermitian(rng, d))
        s = StateVector(random_state(rng, d))
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert expectation_sq(s, o) >= expectation(s, o) ** 2 - 1e-10
