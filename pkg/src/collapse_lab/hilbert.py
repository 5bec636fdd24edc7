"""Finite-dimensional complex linear algebra.

Value types for states, operators, density matrices and time grids, plus the
spectral helpers (eigendecomposition, square root, trace distance) used by
the models. All value types are immutable after construction: the wrapped
arrays are copied and flagged read-only.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from collapse_lab.errors import CollapseLabError

CONSTRUCTION_TOL = 1e-10
RESIDUAL_TOL = 1e-8
PD_EPS = 1e-10
MAX_DIM = 256

_MODULE = "hilbert"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=complex, copy=True)
    a.setflags(write=False)
    return a


def _as_array(x) -> np.ndarray:
    """Returns the underlying complex array of a value type or array-like."""
    if isinstance(x, (StateVector, GeneralOperator, DensityMatrix)):
        return x.data
    return np.asarray(x, dtype=complex)


@dataclass(frozen=True)
class StateVector:
    """Complex amplitude vector.

    Attributes:
        data: Amplitudes, shape ``(dim,)``.
    """

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=complex)
        if a.ndim != 1 or a.size < 1:
            raise CollapseLabError("dim-mismatch", "state must be a non-empty vector", _MODULE)
        if not np.all(np.isfinite(a)):
            raise CollapseLabError("blowup", "state has non-finite amplitudes", _MODULE)
        object.__setattr__(self, "data", _frozen(a))

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    def norm_sq(self) -> float:
        return float(np.vdot(self.data, self.data).real)

    def is_normalized(self) -> bool:
        return abs(self.norm_sq() - 1.0) <= CONSTRUCTION_TOL

    def normalized(self) -> StateVector:
        return StateVector(self.data / math.sqrt(self.norm_sq()))


@dataclass(frozen=True)
class GeneralOperator:
    """Square complex matrix.

    Attributes:
        data: Entries, shape ``(dim, dim)``.
    """

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=complex)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
            raise CollapseLabError("dim-mismatch", f"operator must be square, got shape {a.shape}", _MODULE)
        if not np.all(np.isfinite(a)):
            raise CollapseLabError("blowup", "operator has non-finite entries", _MODULE)
        object.__setattr__(self, "data", _frozen(a))

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    def dagger(self) -> GeneralOperator:
        return GeneralOperator(self.data.conj().T)


@dataclass(frozen=True)
class HermitianOperator(GeneralOperator):
    """Square matrix with ``max|A - A^dagger| <= 1e-10``.

    The stored matrix is symmetrized, so it is Hermitian to machine precision.
    """

    def __post_init__(self):
        super().__post_init__()
        a = self.data
        dev = float(np.max(np.abs(a - a.conj().T)))
        if dev > CONSTRUCTION_TOL:
            raise CollapseLabError("hermiticity-error", f"operator is not Hermitian (deviation {dev:.3e})",
                                   _MODULE, deviation=dev)
        object.__setattr__(self, "data", _frozen(0.5 * (a + a.conj().T)))


@dataclass(frozen=True)
class DensityMatrix(GeneralOperator):
    """Positive semidefinite Hermitian matrix with a declared trace.

    Attributes:
        data: Entries, shape ``(dim, dim)``.
        trace: Declared trace (1 for a normalized state).
    """

    trace: float = 1.0

    def __post_init__(self):
        super().__post_init__()
        a = self.data
        dev = float(np.max(np.abs(a - a.conj().T)))
        if dev > CONSTRUCTION_TOL:
            raise CollapseLabError("hermiticity-error", f"density matrix not Hermitian ({dev:.3e})", _MODULE)
        a = 0.5 * (a + a.conj().T)
        tr = float(np.trace(a).real)
        if abs(tr - self.trace) > RESIDUAL_TOL:
            raise CollapseLabError("schema-error", f"trace {tr!r} differs from declared {self.trace!r}", _MODULE)
        lo = float(np.linalg.eigvalsh(a)[0])
        if lo < -RESIDUAL_TOL:
            raise CollapseLabError("positivity-violation", f"minimum eigenvalue {lo:.3e}", _MODULE,
                                   eigenvalue=lo)
        object.__setattr__(self, "data", _frozen(a))

    @classmethod
    def from_state(cls, psi: StateVector) -> DensityMatrix:
        v = psi.data
        return cls(np.outer(v, v.conj()), trace=psi.norm_sq())


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time grid ``t0, t0 + h, ..., t1``.

    Attributes:
        t0: Start time.
        t1: End time.
        h: Step.
    """

    t0: float
    t1: float
    h: float

    def __post_init__(self):
        if not (self.h > 0 and math.isfinite(self.h)):
            raise CollapseLabError("schema-error", f"grid step must be positive, got {self.h!r}", _MODULE)
        steps = (self.t1 - self.t0) / self.h
        k = round(steps)
        if k < 1 or abs(steps - k) > 1e-9 * max(1.0, abs(steps)):
            raise CollapseLabError("grid-misalignment",
                                   f"(t1-t0)/h = {steps!r} is not a positive integer", _MODULE)

    @property
    def n(self) -> int:
        return int(round((self.t1 - self.t0) / self.h)) + 1

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.h * np.arange(self.n)

    def half(self) -> TimeGrid:
        """Returns the grid with half the step on the same interval."""
        return TimeGrid(self.t0, self.t1, self.h / 2)

    def index_of(self, t: float) -> int:
        """Returns the node index of ``t`` or raises ``grid-misalignment``."""
        x = (t - self.t0) / self.h
        k = round(x)
        if abs(x - k) > 1e-9 * max(1.0, abs(x)) or not 0 <= k < self.n:
            raise CollapseLabError("grid-misalignment", f"time {t!r} is not a grid node", _MODULE)
        return int(k)


def check_dims(*dims: int) -> int:
    """Returns the common dimension or raises ``dim-mismatch``."""
    if len(set(dims)) != 1:
        raise CollapseLabError("dim-mismatch", f"dimensions differ: {dims}", _MODULE)
    d = dims[0]
    if d > MAX_DIM:
        raise CollapseLabError("dim-mismatch", f"dimension {d} exceeds cap {MAX_DIM}", _MODULE)
    return d


def l2_inner(psi: StateVector, phi: StateVector) -> complex:
    """Standard inner product, conjugate-linear in the first argument."""
    check_dims(psi.dim, phi.dim)
    return complex(np.vdot(psi.data, phi.data))


def eig_hermitian(a: HermitianOperator) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues in ascending order and orthonormal eigenvector columns."""
    w, v = np.linalg.eigh(a.data)
    return w, v


def hermitian_sqrt(a: HermitianOperator) -> HermitianOperator:
    """Positive square root of a positive definite Hermitian operator.

    Raises:
        CollapseLabError: ``not-positive-definite`` if an eigenvalue is below
            ``PD_EPS``; the eigenvalue is attached as ``detail["eigenvalue"]``.
    """
    w, v = eig_hermitian(a)
    if w[0] < PD_EPS:
        raise CollapseLabError("not-positive-definite", f"eigenvalue {w[0]:.3e} below {PD_EPS}", _MODULE,
                               eigenvalue=float(w[0]))
    return HermitianOperator((v * np.sqrt(w)) @ v.conj().T)


def hermitian_function(a: np.ndarray, f) -> np.ndarray:
    """Applies a scalar function to a Hermitian matrix (batched over leading axes)."""
    w, v = np.linalg.eigh(a)
    return (v * f(w)[..., None, :]) @ np.swapaxes(v.conj(), -1, -2)


def expm_hermitian_i(a: np.ndarray) -> np.ndarray:
    """Returns ``exp(-i a)`` for Hermitian ``a`` (batched over leading axes)."""
    return hermitian_function(a, lambda w: np.exp(-1j * w))


def trace_distance(s1: DensityMatrix | np.ndarray, s2: DensityMatrix | np.ndarray) -> float:
    """Half the trace norm of the difference."""
    a, b = _as_array(s1), _as_array(s2)
    check_dims(a.shape[-1], b.shape[-1])
    diff = a - b
    diff = 0.5 * (diff + np.swapaxes(diff.conj(), -1, -2))
    return float(0.5 * np.sum(np.abs(np.linalg.eigvalsh(diff))))


def trace_distance_series(s1: np.ndarray, s2: np.ndarray) -> np.ndarray:
    """Trace distance per node for stacks of matrices of shape ``(n, d, d)``."""
    diff = s1 - s2
    diff = 0.5 * (diff + np.swapaxes(diff.conj(), -1, -2))
    return 0.5 * np.sum(np.abs(np.linalg.eigvalsh(diff)), axis=-1)


def _expect_raw(psi: StateVector, o: HermitianOperator) -> tuple[complex, float]:
    check_dims(psi.dim, o.dim)
    nrm = psi.norm_sq()
    if abs(nrm - 1.0) > CONSTRUCTION_TOL:
        warnings.warn("expectation of a non-normalized state; dividing by its norm", stacklevel=3)
    return np.vdot(psi.data, o.data @ psi.data), nrm


def expectation(psi: StateVector, o: HermitianOperator) -> float:
    """Expectation value ``(psi|O psi) / (psi|psi)``."""
    val, nrm = _expect_raw(psi, o)
    return float(val.real / nrm)


def expectation_sq(psi: StateVector, o: HermitianOperator) -> float:
    """Expectation value of ``O^2``, computed as ``|O psi|^2 / (psi|psi)``."""
    check_dims(psi.dim, o.dim)
    nrm = psi.norm_sq()
    if abs(nrm - 1.0) > CONSTRUCTION_TOL:
        warnings.warn("expectation of a non-normalized state; dividing by its norm", stacklevel=2)
    v = o.data @ psi.data
    return float(np.vdot(v, v).real / nrm)


def commutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b - b @ a


def max_norm(a: np.ndarray) -> float:
    return float(np.max(np.abs(a))) if a.size else 0.0


def pauli() -> dict[str, np.ndarray]:
    """Pauli matrices and the 2x2 identity."""
    return {
        "I": np.eye(2, dtype=complex),
        "X": np.array([[0, 1], [1, 0]], dtype=complex),
        "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
        "Z": np.array([[1, 0], [0, -1]], dtype=complex),
    }
