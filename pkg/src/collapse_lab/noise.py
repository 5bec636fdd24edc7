"""Gaussian white-noise fields and covariance diagonalization.

Noise normalization
-------------------
Noise lives on the half-step grid ``t0, t0 + h/2, ..., t1`` (``2n - 1`` nodes
for a state grid of ``n`` nodes). Every node value is an independent
``Normal(0, 2/h)`` variable, so a sum over half-nodes weighted by the
half-step ``h/2`` reproduces the unit delta correlation of white noise.

Seed splitting
--------------
Random streams are Philox counter-based generators keyed through
:class:`numpy.random.SeedSequence`. The stream for channel ``k`` of a path
with seed ``s`` is ``Philox(SeedSequence(s, spawn_key=(k,)))`` and its node
values are drawn in increasing node order. Trajectory ``r`` of an ensemble with
base seed ``b`` uses the path seed ``derive_seed(b, r)``, the first 64-bit word
of ``SeedSequence(b, spawn_key=(r,)).generate_state``. This rule is part of the
public contract: it fixes every sampled value given the base seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from collapse_lab.errors import CollapseLabError
from collapse_lab.hilbert import TimeGrid

_MODULE = "noise"

MIN_PATHS = 1000
ZERO_MODE_REL = 1e-12
PSD_REL = 1e-8


def derive_seed(base_seed: int, *keys: int) -> int:
    """Derives a 64-bit seed from a base seed and integer keys."""
    ss = np.random.SeedSequence(int(base_seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0])


def channel_generator(seed: int, channel: int) -> np.random.Generator:
    """Generator for one channel of a noise path (see module docstring)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(int(channel),))))


@dataclass(frozen=True)
class NoisePath:
    """Sampled white noise on the half-step grid.

    Attributes:
        state_grid: Grid of the states driven by this path.
        values: Array ``(channel_count, 2n - 1)`` of node values.
        seed: Seed the path was sampled from.
    """

    state_grid: TimeGrid
    values: np.ndarray
    seed: int

    def __post_init__(self):
        v = np.array(self.values, dtype=float, copy=True)
        if v.ndim != 2 or v.shape[1] != 2 * self.state_grid.n - 1:
            raise CollapseLabError("grid-misalignment", f"noise shape {v.shape} does not match the grid", _MODULE)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def grid(self) -> TimeGrid:
        """The half-step grid carrying the values."""
        return self.state_grid.half()

    @property
    def channel_count(self) -> int:
        return self.values.shape[0]

    def increments(self) -> np.ndarray:
        """Integrated noise over each state step, shape ``(channels, n - 1)``.

        The step ``[t_j, t_{j+1}]`` covers half-nodes ``2j`` and ``2j + 1``,
        each weighted by ``h/2``; the increments are independent with variance
        ``h``.
        """
        return increments_from_values(self.values, self.state_grid.h)


def increments_from_values(values: np.ndarray, h: float) -> np.ndarray:
    """Step increments from half-grid values (last axis is the half-grid)."""
    return 0.5 * h * (values[..., 0:-1:2] + values[..., 1::2])


def sample_values(grid: TimeGrid, channel_count: int, seed: int) -> np.ndarray:
    """Raw half-grid noise values of shape ``(channel_count, 2n - 1)``."""
    m = 2 * grid.n - 1
    scale = math.sqrt(2.0 / grid.h)
    out = np.empty((channel_count, m))
    for k in range(channel_count):
        out[k] = channel_generator(seed, k).standard_normal(m) * scale
    return out


def sample_noise_path(grid: TimeGrid, channel_count: int, seed: int) -> NoisePath:
    """Samples one noise path.

    Args:
        grid: State grid; the path lives on its half-step refinement.
        channel_count: Number of independent channels.
        seed: 64-bit seed.

    Returns:
        The path; identical inputs give bitwise-identical values.
    """
    return NoisePath(grid, sample_values(grid, channel_count, seed), int(seed))


def sample_ensemble_values(grid: TimeGrid, channel_count: int, base_seed: int, count: int,
                           start: int = 0) -> np.ndarray:
    """Noise values for trajectories ``start .. start + count - 1``.

    Returns:
        Array ``(count, channel_count, 2n - 1)``; row ``r`` equals the path
        sampled with seed ``derive_seed(base_seed, start + r)``.
    """
    m = 2 * grid.n - 1
    out = np.empty((count, channel_count, m))
    for r in range(count):
        out[r] = sample_values(grid, channel_count, derive_seed(base_seed, start + r))
    return out


def empirical_covariance_check(paths: list[NoisePath] | np.ndarray, h: float | None = None,
                               n_sigma: float = 5.0) -> dict:
    """Compares empirical second moments against ``(2/h) delta``.

    Args:
        paths: Noise paths, or an array ``(R, channels, nodes)`` of values.
        h: State step, required when ``paths`` is an array.
        n_sigma: Pass threshold in standard errors.

    Returns:
        Report with ``max_abs_dev`` (largest deviation of a second moment from
        its target), ``max_z`` (largest deviation in standard errors over both
        first and second moments) and ``pass``.

    Raises:
        CollapseLabError: ``insufficient-samples`` for fewer than 1000 paths.
    """
    if isinstance(paths, np.ndarray):
        vals = paths
        if h is None:
            raise CollapseLabError("schema-error", "step h required for raw arrays", _MODULE)
    else:
        if len(paths) == 0:
            raise CollapseLabError("insufficient-samples", "no paths", _MODULE)
        h = paths[0].state_grid.h
        vals = np.stack([p.values for p in paths])
    r = vals.shape[0]
    if r < MIN_PATHS:
        raise CollapseLabError("insufficient-samples", f"{r} paths, need at least {MIN_PATHS}", _MODULE)
    x = vals.reshape(r, -1)
    var = 2.0 / h
    second = x.T @ x / r
    target = var * np.eye(x.shape[1])
    # Gaussian moments: Var(W^2) = 2 var^2, Var(W_a W_b) = var^2.
    se = np.full_like(second, var / math.sqrt(r))
    np.fill_diagonal(se, math.sqrt(2.0) * var / math.sqrt(r))
    dev = second - target
    z_second = float(np.max(np.abs(dev) / se))
    z_mean = float(np.max(np.abs(x.mean(axis=0)) / math.sqrt(var / r)))
    max_z = max(z_second, z_mean)
    return {
        "max_abs_dev": float(np.max(np.abs(dev))),
        "max_z": max_z,
        "pass": bool(max_z <= n_sigma),
    }


@dataclass(frozen=True)
class CovarianceSpec:
    """Covariances of the raw potentials.

    Attributes:
        dim: Hilbert dimension ``d``.
        matrices: One ``(d*d, d*d)`` matrix per channel, acting on row-major
            vectorized ``d x d`` matrices.
    """

    dim: int
    matrices: list = field(default_factory=list)

    def __post_init__(self):
        d2 = self.dim * self.dim
        mats = []
        for a, c in enumerate(self.matrices):
            c = np.asarray(c, dtype=complex)
            if c.shape != (d2, d2):
                raise CollapseLabError("dim-mismatch", f"covariance {a} has shape {c.shape}, need {(d2, d2)}",
                                       _MODULE, channel=a)
            scale = max(1.0, float(np.max(np.abs(c))))
            if np.max(np.abs(c - c.conj().T)) > 1e-10 * scale:
                raise CollapseLabError("hermiticity-error", f"covariance {a} is not Hermitian", _MODULE, channel=a)
            mats.append(0.5 * (c + c.conj().T))
        object.__setattr__(self, "matrices", mats)

    @property
    def channels_a(self) -> int:
        return len(self.matrices)


@dataclass(frozen=True)
class CovarianceMode:
    """One independent normalized field: weight ``lam``, kernel ``phi``."""

    lam: float
    phi: np.ndarray
    channel: int


def hermitian_basis(d: int) -> np.ndarray:
    """Orthonormal basis of Hermitian ``d x d`` matrices under ``tr(A^dagger B)``.

    Returns:
        Array ``(d*d, d, d)``: diagonal units, then symmetric and
        antisymmetric off-diagonal combinations.
    """
    basis = []
    for j in range(d):
        e = np.zeros((d, d), dtype=complex)
        e[j, j] = 1.0
        basis.append(e)
    s = 1.0 / math.sqrt(2.0)
    for j in range(d):
        for k in range(j + 1, d):
            e = np.zeros((d, d), dtype=complex)
            e[j, k] = e[k, j] = s
            basis.append(e)
            f = np.zeros((d, d), dtype=complex)
            f[j, k] = -1j * s
            f[k, j] = 1j * s
            basis.append(f)
    return np.array(basis)


def diagonalize_covariance(spec: CovarianceSpec) -> list[CovarianceMode]:
    """Splits each covariance into independent normalized Hermitian modes.

    The covariance is expressed in an orthonormal basis of Hermitian matrices,
    where it must be real symmetric, and diagonalized there; eigenvectors map
    back to Hermitian kernels ``phi`` with ``C = sum lam vec(phi) vec(phi)^dagger``.
    Modes with ``lam <= 1e-12 max lam`` are dropped.

    Raises:
        CollapseLabError: ``covariance-not-psd`` for an eigenvalue below
            ``-1e-8 ||C||``; ``hermiticity-error`` if the covariance does not
            map Hermitian kernels to a real quadratic form.
    """
    d = spec.dim
    basis = hermitian_basis(d)
    bvec = basis.reshape(d * d, d * d)  # row m = vec(B_m), row-major
    modes: list[CovarianceMode] = []
    for a, c in enumerate(spec.matrices):
        ct = bvec.conj() @ c @ bvec.T
        norm = float(np.linalg.norm(c, 2)) if c.size else 0.0
        if np.max(np.abs(ct.imag)) > 1e-10 * max(1.0, norm):
            raise CollapseLabError("hermiticity-error", f"covariance {a} is not real on Hermitian kernels",
                                   _MODULE, channel=a)
        w, v = np.linalg.eigh(ct.real)
        if norm > 0 and w[0] < -PSD_REL * norm:
            raise CollapseLabError("covariance-not-psd", f"covariance {a} has eigenvalue {w[0]:.3e}", _MODULE,
                                   channel=a, eigenvalue=float(w[0]))
        top = float(w[-1]) if w.size else 0.0
        if top <= 0:
            continue
        for k in range(w.size - 1, -1, -1):
            if w[k] > ZERO_MODE_REL * top:
                phi = np.tensordot(v[:, k], basis, axes=1)
                modes.append(CovarianceMode(float(w[k]), phi, a))
    return modes


def reconstruct_covariance(modes: list[CovarianceMode], dim: int, channels: int) -> list[np.ndarray]:
    """Rebuilds ``sum lam vec(phi) vec(phi)^dagger`` per channel."""
    out = [np.zeros((dim * dim, dim * dim), dtype=complex) for _ in range(channels)]
    for m in modes:
        v = m.phi.reshape(-1)
        out[m.channel] += m.lam * np.outer(v, v.conj())
    return out
