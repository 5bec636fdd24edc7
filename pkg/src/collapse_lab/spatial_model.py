"""Stochastic dynamics with a potential that is nonlocal in space only.

In the interaction picture the state obeys the Ito equation

    d psi = (-i sum_k M_k dW_k - 1/2 sum_k M_k^2 dt) psi

whose ensemble density follows the dephasing-type master equation
``d sigma/dt = -1/2 sum_k [M_k, [M_k, sigma]]``. Trajectories are driven by
:class:`~collapse_lab.noise.NoisePath` objects; an ensemble is reduced in a
fixed trajectory order so that results are reproducible bit for bit.
"""

from __future__ import annotations

from collections.abc import Callable, Iterator
from dataclasses import dataclass, field

import numpy as np

from collapse_lab import noise as nz
from collapse_lab.errors import CollapseLabError
from collapse_lab.hilbert import (
    CONSTRUCTION_TOL,
    DensityMatrix,
    HermitianOperator,
    StateVector,
    TimeGrid,
    check_dims,
    commutator,
    expm_hermitian_i,
)

_MODULE = "spatial_model"

STEPPERS = ("unitary-exp", "euler-maruyama")
POSITIVITY_TOL = 1e-6
CHUNK = 256


@dataclass(frozen=True)
class SpatialModelSpec:
    """Interaction-picture kernels of the stochastic potential.

    Attributes:
        dim: Hilbert dimension.
        M_channels: Hermitian kernels ``M_k``, one per noise channel.
        H0: Free Hamiltonian, used only when ``interaction_picture`` is false.
        interaction_picture: If true the free Hamiltonian is ignored.
    """

    dim: int
    M_channels: list = field(default_factory=list)
    H0: HermitianOperator | None = None
    interaction_picture: bool = True

    def __post_init__(self):
        ms = [m if isinstance(m, HermitianOperator) else HermitianOperator(m) for m in self.M_channels]
        check_dims(self.dim, *[m.dim for m in ms])
        if self.H0 is not None:
            h0 = self.H0 if isinstance(self.H0, HermitianOperator) else HermitianOperator(self.H0)
            check_dims(self.dim, h0.dim)
            object.__setattr__(self, "H0", h0)
        object.__setattr__(self, "M_channels", ms)

    @property
    def channel_count(self) -> int:
        return len(self.M_channels)

    def m_stack(self) -> np.ndarray:
        if not self.M_channels:
            return np.zeros((0, self.dim, self.dim), dtype=complex)
        return np.array([m.data for m in self.M_channels])

    def h0_active(self) -> np.ndarray | None:
        if self.interaction_picture or self.H0 is None:
            return None
        return self.H0.data


@dataclass(frozen=True)
class TrajectoryRecord:
    """States of one trajectory on a grid.

    Attributes:
        grid: Time grid.
        states: Array ``(n, dim)``; ``states[0]`` is the initial state.
        seed: Seed of the driving noise path (``-1`` when not applicable).
        norm_series: ``(psi_i | psi_i)`` per node.
    """

    grid: TimeGrid
    states: np.ndarray
    seed: int = -1
    norm_series: np.ndarray | None = None

    def __post_init__(self):
        s = np.array(self.states, dtype=complex, copy=True)
        if s.ndim != 2 or s.shape[0] != self.grid.n:
            raise CollapseLabError("grid-misalignment", f"states shape {s.shape} vs {self.grid.n} nodes", _MODULE)
        s.setflags(write=False)
        object.__setattr__(self, "states", s)
        nrm = np.einsum("ij,ij->i", s.conj(), s).real
        nrm.setflags(write=False)
        object.__setattr__(self, "norm_series", nrm)

    def state(self, i: int) -> StateVector:
        return StateVector(self.states[i])


def _common_eigenbasis(ops: list[np.ndarray]) -> np.ndarray | None:
    """Unitary diagonalizing all ``ops`` simultaneously, or None if they do not commute."""
    for i, a in enumerate(ops):
        for b in ops[i + 1:]:
            if np.max(np.abs(commutator(a, b))) > CONSTRUCTION_TOL:
                return None
    if not ops:
        return None
    # A generic real combination separates all joint eigenspaces.
    coeffs = np.sqrt(np.arange(2, len(ops) + 2, dtype=float))
    combo = sum(c * a for c, a in zip(coeffs, ops))
    _, v = np.linalg.eigh(combo)
    for a in ops:
        off = v.conj().T @ a @ v
        if np.max(np.abs(off - np.diag(np.diag(off)))) > 1e-8 * max(1.0, np.max(np.abs(a))):
            return None
    return v


def propagate_batch(spec: SpatialModelSpec, psi0: np.ndarray, h: float, dw: np.ndarray,
                    stepper: str = "unitary-exp") -> np.ndarray:
    """Propagates a batch of trajectories.

    Args:
        spec: Model.
        psi0: Initial state ``(dim,)``.
        h: Time step.
        dw: Noise increments ``(R, channels, steps)``.
        stepper: ``"unitary-exp"`` or ``"euler-maruyama"``.

    Returns:
        States ``(R, steps + 1, dim)``.

    Raises:
        CollapseLabError: ``blowup`` on non-finite amplitudes.
    """
    if stepper not in STEPPERS:
        raise CollapseLabError("schema-error", f"unknown stepper {stepper!r}", _MODULE)
    r, c, steps = dw.shape
    d = spec.dim
    ms = spec.m_stack()
    h0 = spec.h0_active()
    out = np.empty((r, steps + 1, d), dtype=complex)
    out[:, 0] = psi0
    if stepper == "unitary-exp":
        ops = list(ms) + ([h0] if h0 is not None else [])
        v = _common_eigenbasis(ops)
        if v is not None or c == 0:
            if v is None:
                v = np.eye(d, dtype=complex)
            lam = np.array([np.diag(v.conj().T @ m @ v).real for m in ms]).reshape(c, d)
            phase = np.einsum("rcs,cd->rsd", dw, lam)
            if h0 is not None:
                phase = phase + h * np.diag(v.conj().T @ h0 @ v).real
            cum = np.cumsum(phase, axis=1)
            coef = v.conj().T @ psi0
            out[:, 1:] = np.einsum("rsd,ed->rse", np.exp(-1j * cum) * coef, v)
        else:
            psi = np.broadcast_to(psi0, (r, d)).copy()
            for j in range(steps):
                expo = np.einsum("rc,cij->rij", dw[:, :, j], ms)
                if h0 is not None:
                    expo = expo + h * h0
                psi = np.einsum("rij,rj->ri", expm_hermitian_i(expo), psi)
                out[:, j + 1] = psi
    else:
        drift = -0.5 * h * np.einsum("cij,cjk->ik", ms, ms) if c else np.zeros((d, d), dtype=complex)
        if h0 is not None:
            drift = drift - 1j * h * h0
        psi = np.broadcast_to(psi0, (r, d)).copy()
        with np.errstate(over="ignore", invalid="ignore"):  # blowup is reported below
            for j in range(steps):
                gen = -1j * np.einsum("rc,cij->rij", dw[:, :, j], ms)
                psi = psi + np.einsum("rij,rj->ri", gen, psi) + psi @ drift.T
                out[:, j + 1] = psi
    bad = ~np.all(np.isfinite(out), axis=(0, 2))
    if np.any(bad):
        step = int(np.argmax(bad))
        raise CollapseLabError("blowup", f"non-finite amplitudes at step {step}", _MODULE, step=step)
    return out


def evolve_spatial_trajectory(spec: SpatialModelSpec, psi0: StateVector, grid: TimeGrid, noise: nz.NoisePath,
                              stepper: str = "unitary-exp") -> TrajectoryRecord:
    """Evolves one trajectory driven by ``noise``.

    The increment over ``[t_j, t_{j+1}]`` is ``(h/2)(W_{2j} + W_{2j+1})`` on the
    half-step noise grid.

    Raises:
        CollapseLabError: ``grid-misalignment`` if the noise grid differs from
            ``grid``; ``dim-mismatch``; ``blowup``.
    """
    check_dims(spec.dim, psi0.dim)
    if noise.state_grid != grid:
        raise CollapseLabError("grid-misalignment", "noise path grid differs from the state grid", _MODULE)
    if noise.channel_count != spec.channel_count:
        raise CollapseLabError("dim-mismatch", "noise channel count differs from the model", _MODULE)
    dw = noise.increments()[None]
    states = propagate_batch(spec, psi0.data, grid.h, dw, stepper)[0]
    return TrajectoryRecord(grid, states, noise.seed)


def iter_ensemble(spec: SpatialModelSpec, psi0: StateVector, grid: TimeGrid, realizations: int, base_seed: int,
                  stepper: str = "unitary-exp", chunk: int = CHUNK) -> Iterator[tuple[int, np.ndarray]]:
    """Yields ``(first_index, states)`` chunks of an ensemble in index order.

    Trajectory ``r`` is driven by the path with seed
    ``derive_seed(base_seed, r)``.
    """
    check_dims(spec.dim, psi0.dim)
    for start in range(0, realizations, chunk):
        count = min(chunk, realizations - start)
        vals = nz.sample_ensemble_values(grid, spec.channel_count, base_seed, count, start)
        dw = nz.increments_from_values(vals, grid.h)
        yield start, propagate_batch(spec, psi0.data, grid.h, dw, stepper)


def simulate_ensemble(spec: SpatialModelSpec, psi0: StateVector, grid: TimeGrid, realizations: int,
                      base_seed: int, stepper: str = "unitary-exp") -> list[TrajectoryRecord]:
    """Simulates and returns every trajectory (for modest ensembles)."""
    out = []
    for start, states in iter_ensemble(spec, psi0, grid, realizations, base_seed, stepper):
        for k in range(states.shape[0]):
            out.append(TrajectoryRecord(grid, states[k], nz.derive_seed(base_seed, start + k)))
    return out


def density_sum(states: np.ndarray, normalize_mode: str = "raw") -> np.ndarray:
    """Sum over trajectories of projectors, ``states`` shaped ``(R, n, d)``."""
    if normalize_mode == "l2":
        nrm = np.sqrt(np.einsum("rnd,rnd->rn", states.conj(), states).real)
        states = states / nrm[..., None]
    elif normalize_mode != "raw":
        raise CollapseLabError("schema-error", f"unknown normalize mode {normalize_mode!r}", _MODULE)
    return np.einsum("rni,rnj->nij", states, states.conj())


def ensemble_density(trajectories: list[TrajectoryRecord], normalize_mode: str = "raw") -> np.ndarray:
    """Mean projector per node, summed in trajectory order.

    Returns:
        Array ``(n, d, d)``.

    Raises:
        CollapseLabError: ``insufficient-samples`` for an empty list;
            ``grid-misalignment`` if grids differ.
    """
    if not trajectories:
        raise CollapseLabError("insufficient-samples", "no trajectories", _MODULE)
    grid = trajectories[0].grid
    if any(t.grid != grid for t in trajectories):
        raise CollapseLabError("grid-misalignment", "trajectories on different grids", _MODULE)
    acc = None
    for t in trajectories:
        term = density_sum(t.states[None], normalize_mode)
        acc = term if acc is None else acc + term
    return acc / len(trajectories)


def ensemble_density_streamed(spec: SpatialModelSpec, psi0: StateVector, grid: TimeGrid, realizations: int,
                              base_seed: int, stepper: str = "unitary-exp") -> np.ndarray:
    """Ensemble density without keeping trajectories in memory."""
    acc = np.zeros((grid.n, spec.dim, spec.dim), dtype=complex)
    for _, states in iter_ensemble(spec, psi0, grid, realizations, base_seed, stepper):
        acc += density_sum(states)
    return acc / realizations


def lindblad_rhs_spatial(sigma, spec: SpatialModelSpec) -> np.ndarray:
    """Right-hand side ``-1/2 sum_k [M_k, [M_k, sigma]]`` (plus ``-i[H0, sigma]``)."""
    s = sigma.data if isinstance(sigma, DensityMatrix) else np.asarray(sigma, dtype=complex)
    check_dims(spec.dim, s.shape[0])
    out = np.zeros_like(s)
    for m in spec.M_channels:
        out -= 0.5 * commutator(m.data, commutator(m.data, s))
    h0 = spec.h0_active()
    if h0 is not None:
        out -= 1j * commutator(h0, s)
    return out


def integrate_rk4(rhs: Callable[[float, np.ndarray], np.ndarray], sigma0: np.ndarray, grid: TimeGrid,
                  module: str = _MODULE) -> np.ndarray:
    """Classical RK4 for a density matrix with Hermitian re-symmetrization.

    Raises:
        CollapseLabError: ``positivity-violation`` when the minimum eigenvalue
            drops below ``-1e-6``.
    """
    h = grid.h
    ts = grid.times
    out = np.empty((grid.n,) + sigma0.shape, dtype=complex)
    s = np.array(sigma0, dtype=complex)
    out[0] = s
    for j in range(grid.n - 1):
        t = ts[j]
        k1 = rhs(t, s)
        k2 = rhs(t + 0.5 * h, s + 0.5 * h * k1)
        k3 = rhs(t + 0.5 * h, s + 0.5 * h * k2)
        k4 = rhs(t + h, s + h * k3)
        s = s + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        s = 0.5 * (s + s.conj().T)
        lo = float(np.linalg.eigvalsh(s)[0])
        if lo < -POSITIVITY_TOL:
            raise CollapseLabError("positivity-violation", f"eigenvalue {lo:.3e} at t={ts[j + 1]!r}", module,
                                   eigenvalue=lo, step=j + 1)
        out[j + 1] = s
    return out


def integrate_lindblad_spatial(sigma0, spec: SpatialModelSpec, grid: TimeGrid) -> np.ndarray:
    """Integrates the ensemble master equation with RK4.

    Returns:
        Density matrices ``(n, d, d)`` on the grid.
    """
    s0 = sigma0.data if isinstance(sigma0, DensityMatrix) else np.asarray(sigma0, dtype=complex)
    return integrate_rk4(lambda t, s: lindblad_rhs_spatial(s, spec), s0, grid)


def no_collapse_check(spec: SpatialModelSpec, observable: HermitianOperator, psi0: StateVector, grid: TimeGrid,
                      realizations: int, base_seed: int = 0, stepper: str = "unitary-exp",
                      n_sigma: float = 5.0) -> dict:
    """Checks that the mean variance of a conserved observable stays constant.

    Returns:
        Report with ``variance_series``, ``se_series``, ``max_drift`` and
        ``pass`` (every node within ``n_sigma`` standard errors of the start).

    Raises:
        CollapseLabError: ``observable-not-commuting`` if the observable fails
            to commute with some ``M_k`` (or with ``H0`` outside the
            interaction picture).
    """
    o = observable.data
    check_dims(spec.dim, observable.dim, psi0.dim)
    others = [m.data for m in spec.M_channels]
    if spec.h0_active() is not None:
        others.append(spec.h0_active())
    for k, m in enumerate(others):
        dev = float(np.max(np.abs(commutator(o, m))))
        if dev > CONSTRUCTION_TOL:
            raise CollapseLabError("observable-not-commuting", f"[O, M_{k}] has max entry {dev:.3e}", _MODULE,
                                   channel=k, deviation=dev)
    s1 = np.zeros(grid.n)
    s2 = np.zeros(grid.n)
    for _, states in iter_ensemble(spec, psi0, grid, realizations, base_seed, stepper):
        nrm = np.einsum("rnd,rnd->rn", states.conj(), states).real
        ov = states @ o.T
        e1 = np.einsum("rnd,rnd->rn", states.conj(), ov).real / nrm
        e2 = np.einsum("rnd,rnd->rn", ov.conj(), ov).real / nrm
        var = e2 - e1 ** 2
        s1 += var.sum(axis=0)
        s2 += (var ** 2).sum(axis=0)
    mean = s1 / realizations
    se = np.sqrt(np.maximum(s2 / realizations - mean ** 2, 0.0) / max(realizations - 1, 1))
    drift = np.abs(mean - mean[0])
    ok = bool(np.all(drift <= n_sigma * se + 1e-10))
    return {
        "variance_series": mean,
        "se_series": se,
        "max_drift": float(drift.max()),
        "pass": ok,
    }
