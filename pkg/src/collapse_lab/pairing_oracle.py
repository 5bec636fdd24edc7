"""Monte-Carlo checks of the Gaussian-pairing reductions.

Each identity equates the statistical mean of a random expression, built
from the sampled potential of the temporal model, with a closed reduction:
a two-dimensional ``(zeta, nu)`` quadrature coefficient times a fixed
operator structure in ``N``. The Monte-Carlo side evaluates the random
expression on the grid with the same conventions as the solver (trapezoid
weights, ``Theta(0) = 1/2``, ``eps(0) = 0``) and averages over independent
noise paths; the analytic side is the reduced formula, taken verbatim.
A mismatch shows up as a large z-score and is reported, never corrected.

Expressions that involve the surface operator ``S_t`` are evaluated with
the state frozen at ``psi0``: the reductions are second order in the
potential, so the state enters at zeroth order. Expressions about the state
itself (``MEAN-DYSON``, ``KET-BRA``) use full Dyson solutions.

All expressions except ``MEAN-DYSON`` are stationary on the plateau of the
envelope, so each trajectory contributes the average over all plateau nodes
at least ``5 ell`` away from the grid ends; the standard error is computed
from these per-trajectory averages.
"""

from __future__ import annotations

import hashlib
import json
import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from collapse_lab import noise as nz
from collapse_lab import quadrature as quad
from collapse_lab.errors import CollapseLabError
from collapse_lab.hilbert import StateVector, TimeGrid, check_dims, trace_distance_series
from collapse_lab.temporal_model import (
    Channel,
    Discretization,
    KernelProfile,
    TemporalModelSpec,
    check_contraction,
    chunk_size,
    ensemble_density_controlled,
    integrate_lindblad_temporal,
    lindblad_rate,
    solve_batch,
)

_MODULE = "pairing_oracle"

PAIRING_IDS = ("MEAN-DYSON", "KET-BRA", "A1", "A2PLUS", "A3", "B2", "B3", "D1", "C1")
N_SIGMA = 5.0
QUAD_RTOL = 1e-6
PLATEAU_MARGIN = 5.0  # in units of ell
SE_FLOOR = 1e-13  # round-off floor for expressions that vanish identically
SLOPE_TARGET = 2.0
SLOPE_TOL = 0.3


@dataclass(frozen=True)
class PairingIdentity:
    """One pairing identity.

    Attributes:
        id: Identifier from ``PAIRING_IDS``.
        description: The random expression whose mean is taken.
        structure: Operator structure of the reduced form: ``"mean-state"``,
            ``"ket-bra"``, ``"NdagN"`` (acting on ``psi``), ``"N2"``
            (acting on ``psi``), ``"N2-operator"`` or ``"sandwich"``
            (``N |psi)(psi| N^dagger``).
    """

    id: str
    description: str
    structure: str


IDENTITIES = {
    "MEAN-DYSON": PairingIdentity("MEAN-DYSON", "<<psi(t)>> against exp(-int sum X Y) psi0", "mean-state"),
    "KET-BRA": PairingIdentity("KET-BRA", "<<|d_t psi)(psi|>> + sum X Y <<|psi)(psi|>> against sum X |psi)(psi| Z^dagger",
                               "ket-bra"),
    "A1": PairingIdentity("A1", "straddle int V(t, z)^dagger V(tau, tau') psi", "NdagN"),
    "A2PLUS": PairingIdentity("A2PLUS", "int V(t, z1) int_{tau2<z1} V psi - int V(z1, t) int_{tau2<t} V psi", "N2"),
    "A3": PairingIdentity("A3", "int dz1 int_t^{z1} dtau1 int V(tau1, z2)^dagger V(z1, t) psi", "NdagN"),
    "B2": PairingIdentity("B2", "-int (V(t, tau1) - V(tau1, t)) |psi)(psi| int_{tau2<t} V^dagger", "sandwich"),
    "B3": PairingIdentity("B3", "-int V(t, z1) |psi)(psi| straddle V^dagger", "sandwich"),
    "D1": PairingIdentity("D1", "int (V(t, tau1) - V(tau1, t)) |psi)(psi| straddle V^dagger", "sandwich"),
    "C1": PairingIdentity("C1", "S_t dS_t/dt = -straddle V int (V(t, tau) - V(tau, t))", "N2-operator"),
}


@dataclass(frozen=True)
class PairingConfig:
    """Model, grid and initial state of a pairing check.

    Attributes:
        spec: Temporal model.
        grid: State grid.
        psi0: Initial (or frozen) state.
        theta0: Value of the step function at zero used in straddle sums.
        solver: Dyson solver for the state-based identities.
        tol: Dyson residual target.
        panels: Gauss-Legendre panels per smooth piece (doubled once for the
            refinement check).
        sample_count: Comparison times for ``MEAN-DYSON``.
    """

    spec: TemporalModelSpec
    grid: TimeGrid
    psi0: StateVector
    theta0: float = 0.5
    solver: str = "windowed-sweep"
    tol: float = 1e-10
    panels: int = 4
    sample_count: int = 5

    def __post_init__(self):
        check_dims(self.spec.dim, self.psi0.dim)
        if self.theta0 not in (0.0, 0.5, 1.0):
            raise CollapseLabError("schema-error", f"theta0 must be 0, 0.5 or 1, got {self.theta0!r}", _MODULE)

    def digest(self) -> str:
        """Short hash of the configuration for report provenance."""
        parts = {
            "grid": [self.grid.t0, self.grid.t1, self.grid.h],
            "psi0": [[z.real, z.imag] for z in self.psi0.data],
            "theta0": self.theta0,
            "solver": self.solver,
            "use_window": self.spec.use_window,
            "channels": [
                {"N": [[z.real, z.imag] for z in c.N.data.ravel()], "form": c.kernel.form, "ell": c.kernel.ell,
                 "g": c.kernel.g, "omega": c.kernel.omega, "envelope": c.kernel.envelope}
                for c in self.spec.channels
            ],
        }
        blob = json.dumps(parts, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class OracleReport:
    """Outcome of one identity check.

    ``pass`` holds iff ``max |mc - analytic| <= 5 standard_error``.
    """

    id: str
    mc_estimate: np.ndarray
    analytic: np.ndarray
    standard_error: float
    z_score: float
    passed: bool
    realizations: int
    config_digest: str
    coefficients: dict = field(default_factory=dict)
    seeds: tuple = ()

    def to_dict(self) -> dict:
        def cplx(a):
            a = np.asarray(a)
            return {"re": a.real.tolist(), "im": a.imag.tolist()}

        return {
            "id": self.id,
            "pass": self.passed,
            "z_score": self.z_score,
            "standard_error": self.standard_error,
            "R": self.realizations,
            "seeds": list(self.seeds),
            "config_digest": self.config_digest,
            "coefficients": {k: ([v.real, v.imag] if isinstance(v, complex) else v)
                             for k, v in self.coefficients.items()},
            "mc_estimate": cplx(self.mc_estimate),
            "analytic": cplx(self.analytic),
        }


def _report(pid: str, mc: np.ndarray, an: np.ndarray, se: float, cfg: PairingConfig, r: int, coefs: dict,
            seeds=()) -> OracleReport:
    diff = float(np.max(np.abs(mc - an))) if mc.size else 0.0
    se = max(float(se), SE_FLOOR)
    z = diff / se
    return OracleReport(pid, mc, an, se, z, bool(diff <= N_SIGMA * se), r, cfg.digest(), coefs, tuple(seeds))


# ------------------------------------------------------------ coefficients


def _inner_limits(region: str, zeta: float, half: float) -> list[tuple[float, float, float]]:
    """Oriented sub-intervals ``(lo, hi, sign)`` of the ``nu`` region, clipped to the support."""
    if region == "below":  # (-inf, zeta)
        parts = [(-half, min(zeta, half), 1.0)]
    elif region == "below-neg":  # (-inf, -zeta)
        parts = [(-half, min(-zeta, half), 1.0)]
    elif region == "sym":  # oriented int_{-zeta}^{zeta}
        a = abs(zeta)
        sgn = 1.0 if zeta >= 0 else -1.0
        parts = [(-min(a, half), min(a, half), sgn)]
    elif region == "eps":  # eps(nu) on |nu| > |zeta|
        a = abs(zeta)
        parts = [(a, half, 1.0), (-half, -a, -1.0)]
    else:
        raise ValueError(region)
    return [(lo, hi, s) for lo, hi, s in parts if hi > lo]


def _double(outer, inner, region: str, ell: float, panels: int) -> complex:
    """``int d zeta outer(zeta) int_region inner(nu) d nu`` over the kernel support."""
    half = 0.5 * ell
    brk = (-half, 0.0, half)
    z, w = quad.nodes_weights(-half, half, (0.0,), panels)
    total = 0.0 + 0.0j
    for zi, wi in zip(z, w):
        acc = 0.0 + 0.0j
        for lo, hi, sgn in _inner_limits(region, zi, half):
            acc += sgn * complex(quad.integrate(inner, lo, hi, brk, panels))
        total += wi * complex(outer(zi)) * acc
    return total


def _raw_coefficients(pid: str, k: KernelProfile, panels: int) -> dict:
    conj = np.conj
    if pid == "MEAN-DYSON":
        return {"xy": 4 * _double(lambda z: k(2 * z), lambda v: k(-2 * v), "below", k.ell, panels)}
    if pid == "KET-BRA":
        return {
            "xy": 4 * _double(lambda z: k(2 * z), lambda v: k(-2 * v), "below", k.ell, panels),
            "xz": 4 * _double(lambda z: k(2 * z), lambda v: conj(k(-2 * v)), "below-neg", k.ell, panels),
        }
    if pid == "A1":
        return {"c": -4 * _double(lambda z: conj(k(2 * z)), lambda v: k(-2 * v), "eps", k.ell, panels)}
    if pid == "A2PLUS":
        return {"c": 4 * _double(lambda z: k(2 * z), lambda v: k(-2 * v), "sym", k.ell, panels)}
    if pid == "A3":
        return {"c": 4 * _double(lambda z: k(-2 * z), lambda v: conj(k(-2 * v)), "sym", k.ell, panels)}
    if pid == "B2":
        return {"c": -4 * _double(lambda z: k(2 * z) - k(-2 * z), lambda v: conj(k(-2 * v)), "below-neg", k.ell,
                                  panels)}
    if pid == "B3":
        return {"c": 4 * _double(lambda z: k(2 * z), lambda v: conj(k(-2 * v)), "eps", k.ell, panels)}
    if pid == "D1":
        return {"c": 4 * _double(lambda z: k(2 * z) - k(-2 * z), lambda v: conj(k(2 * v)), "eps", k.ell, panels)}
    if pid == "C1":
        return {"c": 4 * _double(lambda z: k(2 * z) - k(-2 * z), lambda v: k(-2 * v), "eps", k.ell, panels)}
    raise CollapseLabError("schema-error", f"unknown pairing identity {pid!r}", _MODULE)


def pairing_coefficients(pid: str, kernel: KernelProfile, panels: int = 4) -> dict:
    """Reduced-form coefficients of one identity for one channel.

    The quadrature is repeated with doubled panels; the finer values are
    returned.

    Raises:
        CollapseLabError: ``quadrature-unstable`` if any coefficient changes
            by more than ``1e-6`` relative between the two refinements.
    """
    coarse = _raw_coefficients(pid, kernel, panels)
    fine = _raw_coefficients(pid, kernel, 2 * panels)
    scale = max(kernel.g, 1e-300) ** 2 * max(1.0, abs(kernel.omega) * kernel.ell)
    for key, v in fine.items():
        ref = max(abs(v), 1e-3 * scale)
        if abs(v - coarse[key]) > QUAD_RTOL * ref:
            raise CollapseLabError("quadrature-unstable", f"coefficient {key} of {pid} changed by "
                                   f"{abs(v - coarse[key]):.3e} under refinement", _MODULE, identity=pid)
    return fine


def _window_rate(spec: TemporalModelSpec, grid: TimeGrid, times: np.ndarray, panels: int) -> np.ndarray:
    """``c_c(t) = int 4 Delta(2 zeta) w(t + zeta)^2 int_{nu<zeta} Delta(-2 nu)``, shape ``(channels, len(times))``."""
    win = spec.window(grid)
    out = np.zeros((spec.channel_count, times.size), dtype=complex)
    for c, ch in enumerate(spec.channels):
        k = ch.kernel
        half = 0.5 * k.ell
        brk = (-half, 0.0, half)
        z, w = quad.nodes_weights(-half, half, (0.0,), 2 * panels)
        vals = np.array([4 * complex(k(2 * zi)) * complex(quad.integrate(lambda v: k(-2 * v), -half, min(zi, half),
                                                                         brk, 2 * panels)) for zi in z])
        w2 = win(times[:, None] + z[None, :]) ** 2
        out[c] = w2 @ (w * vals)
    return out


def mean_dyson_prediction(cfg: PairingConfig) -> np.ndarray:
    """Reduced mean state on the grid, ``(n, d)``.

    Integrates ``d<<psi>>/dt = -sum_c c_c(t) N_c^2 <<psi>>`` by RK4 with the
    envelope-weighted rate ``c_c(t)``.
    """
    spec, grid = cfg.spec, cfg.grid
    for ch in spec.channels:
        pairing_coefficients("MEAN-DYSON", ch.kernel, cfg.panels)  # stability guard
    n2 = np.array([c.N.data @ c.N.data for c in spec.channels]) if spec.channels else np.zeros((0, spec.dim,
                                                                                                  spec.dim))
    h = grid.h
    t = grid.times
    nodes = np.concatenate([t, t[:-1] + 0.5 * h])
    rates = _window_rate(spec, grid, nodes, cfg.panels) if spec.channels else np.zeros((0, nodes.size))
    n = grid.n
    r_full, r_half = rates[:, :n], rates[:, n:]

    def gen(col):
        return np.einsum("c,cij->ij", col, n2) if n2.shape[0] else np.zeros((spec.dim, spec.dim))

    out = np.empty((n, spec.dim), dtype=complex)
    out[0] = cfg.psi0.data
    y = cfg.psi0.data.astype(complex)
    for i in range(n - 1):
        a0, am, a1 = gen(r_full[:, i]), gen(r_half[:, i]), gen(r_full[:, i + 1])
        k1 = -a0 @ y
        k2 = -am @ (y + 0.5 * h * k1)
        k3 = -am @ (y + 0.5 * h * k2)
        k4 = -a1 @ (y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        out[i + 1] = y
    return out


def reduced_form(pid: str, cfg: PairingConfig, state: np.ndarray | None = None) -> np.ndarray:
    """Analytic side of an identity on the envelope plateau.

    Args:
        pid: Identity id (not ``MEAN-DYSON`` or ``KET-BRA``, whose analytic
            sides depend on the ensemble; see :func:`verify_pairing_identity`).
        cfg: Configuration.
        state: State used in the structure (defaults to ``psi0``).

    Returns:
        Vector ``(d,)`` for ``NdagN``/``N2``, matrix ``(d, d)`` otherwise.
    """
    ident = IDENTITIES[pid]
    psi = cfg.psi0.data if state is None else np.asarray(state, dtype=complex)
    d = cfg.spec.dim
    if ident.structure not in ("NdagN", "N2", "N2-operator", "sandwich"):
        raise CollapseLabError("schema-error", f"{pid} has no plateau reduced form", _MODULE)
    proj = np.outer(psi, psi.conj())
    total = np.zeros((d, d), dtype=complex)
    for ch in cfg.spec.channels:
        c = pairing_coefficients(pid, ch.kernel, cfg.panels)["c"]
        n = ch.N.data
        if ident.structure == "NdagN":
            total += c * (n.conj().T @ n)
        elif ident.structure == "sandwich":
            total += c * (n @ proj @ n.conj().T)
        else:
            total += c * (n @ n)
    if ident.structure in ("NdagN", "N2"):
        return total @ psi
    return total


# --------------------------------------------------------- discrete fields


def straddle_weights(L: int, theta0: float = 0.5) -> np.ndarray:
    """Weights of pairs ``(p, q) = (i + a, i + a + s)`` in the surface sums at node ``i``.

    ``Theta(i - p) Theta(q - i) - Theta(p - i) Theta(i - q)`` with
    ``Theta(0) = theta0``; array ``(2L + 1, 2L + 1)`` indexed by ``(a + L, s + L)``.
    """

    def th(x):
        return np.where(x > 0, 1.0, np.where(x == 0, theta0, 0.0))

    a = np.arange(-L, L + 1)[:, None]
    s = np.arange(-L, L + 1)[None, :]
    p, q = a, a + s
    return th(-p) * th(q) - th(p) * th(-q)


@dataclass
class _Fields:
    """Operator-valued integrals of the potential for one batch at plateau nodes.

    Every array has shape ``(R, m, d, d)`` for the ``m`` sample nodes.
    """

    F: np.ndarray  # int V(t, z) dz
    G: np.ndarray  # int V(tau, t) dtau
    S: np.ndarray  # straddle sum, S_t = i S
    cum: np.ndarray  # int_{tau < t} dtau int V(tau, z) dz, truncated
    a2: np.ndarray  # int dz1 V(t, z1) cum(z1)
    a3: np.ndarray  # int dz1 (cum(z1) - cum(t))^dagger V(z1, t)


def _fields(disc: Discretization, coef: np.ndarray, nodes: np.ndarray, theta0: float) -> _Fields:
    r, c, n, _ = coef.shape
    L, h = disc.L, disc.grid.h
    d = disc.n_ops.shape[1]
    nops = disc.n_ops
    # f[r, c, p] = sum_s coef[p, s]; column sums g[r, c, p] = sum_s coef[p - s, s].
    f = coef.sum(axis=-1)
    g = np.zeros_like(f)
    for s in range(-L, L + 1):
        lo, hi = max(0, s), min(n, n + s)
        g[:, :, lo:hi] += coef[:, :, lo - s:hi - s, s + L]

    def op(x):  # (r, c, ...) scalars -> (r, ..., d, d)
        return np.einsum("rc...,cij->r...ij", x, nops)

    # Truncated cumulative integral around each node with base i - 2L; the
    # cut only drops terms independent of everything paired at i.
    base = 2 * L
    m = nodes.size
    F_op = op(f[:, :, nodes])
    G_op = op(g[:, :, nodes])
    w = straddle_weights(L, theta0)
    S_sc = np.zeros((r, c, m), dtype=complex)
    for a in range(-L, L + 1):
        S_sc += np.einsum("rcms,s->rcm", coef[:, :, nodes + a, :], w[a + L]) * h
    S_op = op(S_sc)
    # cum at nodes z = i - L .. i + L relative to base i - 2L.
    offs = np.arange(-L, L + 1)
    cum_sc = np.zeros((r, c, m, 2 * L + 1), dtype=complex)
    for j, o in enumerate(offs):
        z = nodes + o
        acc = np.zeros((r, c, m), dtype=complex)
        for p in range(-base, o):
            acc += f[:, :, nodes + p]
        acc += 0.5 * f[:, :, z]
        cum_sc[:, :, :, j] = h * acc
    # a2: sum_z coef[i, z - i] (channel c) N_c times cum(z) (channel c') N_c'
    row = coef[:, :, nodes, :]  # (r, c, m, 2L+1): V(t_i, t_{i+s}) weights
    v_row = np.einsum("rcms,cij->rmsij", row, nops)
    cum_op = np.einsum("rcms,cij->rmsij", cum_sc, nops)
    a2 = np.einsum("rmsij,rmsjk->rmik", v_row, cum_op)
    # a3: column entries V(t_z, t_i) = coef[z, i - z], z = i + o.
    col = np.zeros((r, c, m, 2 * L + 1), dtype=complex)
    for j, o in enumerate(offs):
        col[:, :, :, j] = coef[:, :, nodes + o, L - o]
    v_col = np.einsum("rcms,cij->rmsij", col, nops)
    cum_t = cum_op[:, :, L]  # cum(t_i)
    rel = cum_op - cum_t[:, :, None]
    a3 = np.einsum("rmsji,rmsjk->rmik", rel.conj(), v_col)
    return _Fields(F_op, G_op, S_op, cum_op[:, :, L], a2, a3)


def plateau_nodes(spec: TemporalModelSpec, grid: TimeGrid) -> np.ndarray:
    """Nodes where every paired midpoint sees the full envelope.

    Raises:
        CollapseLabError: ``insufficient-window`` if there are none.
    """
    ell = spec.ell
    margin = (PLATEAU_MARGIN + (4.0 if spec.use_window else 0.0)) * ell
    t = grid.times
    sel = np.nonzero((t >= grid.t0 + margin - 1e-12) & (t <= grid.t1 - margin + 1e-12))[0]
    if sel.size == 0:
        raise CollapseLabError("insufficient-window", f"no plateau nodes; interval must exceed {2 * margin!r}",
                               _MODULE)
    return sel


def _expression(pid: str, fl: _Fields, psi: np.ndarray) -> np.ndarray:
    """Per-trajectory, per-node value of the random expression."""
    proj = np.outer(psi, psi.conj())
    dag = lambda a: np.swapaxes(a.conj(), -1, -2)  # noqa: E731
    if pid == "A1":
        return np.einsum("rmij,j->rmi", dag(fl.F) @ fl.S, psi)
    if pid == "A2PLUS":
        return np.einsum("rmij,j->rmi", fl.a2 - fl.G @ fl.cum, psi)
    if pid == "A3":
        return np.einsum("rmij,j->rmi", fl.a3, psi)
    if pid == "B2":
        return -(fl.F - fl.G) @ proj @ dag(fl.cum)
    if pid == "B3":
        return -fl.F @ proj @ dag(fl.S)
    if pid == "D1":
        return (fl.F - fl.G) @ proj @ dag(fl.S)
    if pid == "C1":
        return -fl.S @ (fl.F - fl.G)
    raise CollapseLabError("schema-error", f"unknown pairing identity {pid!r}", _MODULE)


class _Accumulator:
    """Running sums for means and per-entry standard errors of complex arrays."""

    def __init__(self):
        self.n = 0
        self.s1 = None
        self.s2 = None

    def add(self, x: np.ndarray) -> None:
        if self.s1 is None:
            self.s1 = np.zeros(x.shape[1:], dtype=complex)
            self.s2 = np.zeros(x.shape[1:])
        self.n += x.shape[0]
        self.s1 += x.sum(axis=0)
        self.s2 += (np.abs(x) ** 2).sum(axis=0)

    def mean(self) -> np.ndarray:
        return self.s1 / self.n

    def se(self) -> np.ndarray:
        m = self.mean()
        var = np.maximum(self.s2 / self.n - np.abs(m) ** 2, 0.0) * self.n / max(self.n - 1, 1)
        return np.sqrt(var / self.n)


def _batches(cfg: PairingConfig, realizations: int, base_seed: int, solve: bool):
    spec, grid = cfg.spec, cfg.grid
    spec.check_window_fits(grid)
    disc = Discretization.build(spec, grid)
    chunk = chunk_size(spec, grid)
    for start in range(0, realizations, chunk):
        count = min(chunk, realizations - start)
        W = nz.sample_ensemble_values(grid, spec.channel_count, base_seed, count, start)
        coef = disc.coefficients(W)
        psi = None
        if solve:
            seeds = [nz.derive_seed(base_seed, start + k) for k in range(count)]
            psi, _ = solve_batch(disc, coef, cfg.psi0.data, cfg.solver, cfg.tol, seeds=seeds)
        yield disc, coef, psi


def mc_statistical_mean(expression: str, cfg: PairingConfig, realizations: int, base_seed: int
                        ) -> tuple[np.ndarray, np.ndarray]:
    """Ensemble mean of an expression and its per-entry standard error.

    Args:
        expression: ``"mean_state"`` (``(n, d)`` mean Dyson state),
            ``"projector"`` (``(n, d, d)`` mean projector) or a pairing id
            whose random expression is averaged over the plateau nodes.
        cfg: Configuration.
        realizations: Number of noise paths ``R``.
        base_seed: Base seed; path ``r`` uses ``derive_seed(base_seed, r)``.

    Returns:
        ``(mean, se)`` with matching shapes.
    """
    acc = _Accumulator()
    if expression in ("mean_state", "projector"):
        if cfg.spec.channel_count == 0:
            psi0 = cfg.psi0.data
            st = np.broadcast_to(psi0, (cfg.grid.n, psi0.size)).astype(complex)
            if expression == "mean_state":
                return st, np.zeros(st.shape)
            pr = np.einsum("ni,nj->nij", st, st.conj())
            return pr, np.zeros(pr.shape)
        for _, _, psi in _batches(cfg, realizations, base_seed, True):
            if expression == "mean_state":
                acc.add(psi)
            else:
                acc.add(np.einsum("rni,rnj->rnij", psi, psi.conj()))
        return acc.mean(), acc.se()
    if expression not in IDENTITIES or expression in ("MEAN-DYSON", "KET-BRA"):
        raise CollapseLabError("schema-error", f"unknown expression {expression!r}", _MODULE)
    nodes = plateau_nodes(cfg.spec, cfg.grid)
    for disc, coef, _ in _batches(cfg, realizations, base_seed, False):
        fl = _fields(disc, coef, nodes, cfg.theta0)
        acc.add(_expression(expression, fl, cfg.psi0.data).mean(axis=1))
    return acc.mean(), acc.se()


def _check_realizations(r: int) -> None:
    if r < 2:
        raise CollapseLabError("insufficient-samples", f"need at least 2 realizations, got {r}", _MODULE)


def verify_pairing_identity(pid: str, cfg: PairingConfig, realizations: int, base_seed: int) -> OracleReport:
    """Compares both sides of one pairing identity.

    ``MEAN-DYSON``: mean Dyson state at ``sample_count`` equally spaced nodes
    against the RK4 solution of the reduced mean equation.
    ``KET-BRA``: per node, ``|-i F)(psi| + sum c_xy N^2 |psi)(psi|`` against
    ``sum c_xz N |psi)(psi| N``, averaged over the plateau; the standard error
    is that of the paired difference.
    Other ids: the random expression against :func:`reduced_form`.

    Raises:
        CollapseLabError: ``quadrature-unstable``; solver errors with seeds.
    """
    if pid not in IDENTITIES:
        raise CollapseLabError("schema-error", f"unknown pairing identity {pid!r}", _MODULE)
    _check_realizations(realizations)
    spec, grid = cfg.spec, cfg.grid
    coefs = {}
    for c, ch in enumerate(spec.channels):
        for key, v in pairing_coefficients(pid, ch.kernel, cfg.panels).items():
            coefs[f"{key}_{c}"] = complex(v)
    seeds = (int(base_seed),)
    if spec.channel_count == 0:
        zero_shape = {"mean-state": (cfg.sample_count, spec.dim), "ket-bra": (spec.dim, spec.dim),
                      "NdagN": (spec.dim,), "N2": (spec.dim,)}.get(IDENTITIES[pid].structure, (spec.dim, spec.dim))
        if pid == "MEAN-DYSON":
            st = np.broadcast_to(cfg.psi0.data, zero_shape).astype(complex)
            return _report(pid, st, st.copy(), 0.0, cfg, realizations, coefs, seeds)
        z = np.zeros(zero_shape, dtype=complex)
        return _report(pid, z, z.copy(), 0.0, cfg, realizations, coefs, seeds)
    if pid == "MEAN-DYSON":
        mean, se = mc_statistical_mean("mean_state", cfg, realizations, base_seed)
        pred = mean_dyson_prediction(cfg)
        idx = np.unique(np.linspace(0, grid.n - 1, cfg.sample_count).round().astype(int))
        return _report(pid, mean[idx], pred[idx], float(np.max(se[idx])), cfg, realizations, coefs, seeds)
    if pid == "KET-BRA":
        nodes = plateau_nodes(spec, grid)
        n_ops = spec.n_stack()
        xy = np.array([coefs[f"xy_{c}"] for c in range(spec.channel_count)])
        xz = np.array([coefs[f"xz_{c}"] for c in range(spec.channel_count)])
        lhs_acc, rhs_acc, diff_acc = _Accumulator(), _Accumulator(), _Accumulator()
        for disc, coef, psi in _batches(cfg, realizations, base_seed, True):
            dpsi = -1j * disc.apply(coef, psi)[:, nodes]
            st = psi[:, nodes]
            proj = np.einsum("rmi,rmj->rmij", st, st.conj())
            n2 = np.einsum("c,cij,cjk->ik", xy, n_ops, n_ops)
            lhs = np.einsum("rmi,rmj->rmij", dpsi, st.conj()) + n2 @ proj
            rhs = np.einsum("c,cij,rmjk,clk->rmil", xz, n_ops, proj, n_ops.conj())
            lhs_acc.add(lhs.mean(axis=1))
            rhs_acc.add(rhs.mean(axis=1))
            diff_acc.add((lhs - rhs).mean(axis=1))
        se = float(np.max(diff_acc.se()))
        return _report(pid, lhs_acc.mean(), rhs_acc.mean(), se, cfg, realizations, coefs, seeds)
    mean, se = mc_statistical_mean(pid, cfg, realizations, base_seed)
    return _report(pid, mean, reduced_form(pid, cfg), float(np.max(se)), cfg, realizations, coefs, seeds)


def verify_b3_conventions(cfg: PairingConfig, realizations: int, base_seed: int) -> dict[float, OracleReport]:
    """Runs ``B3`` with ``Theta(0)`` in ``{0, 1/2, 1}`` (same noise for all three)."""
    out = {}
    for th in (0.0, 0.5, 1.0):
        c = PairingConfig(cfg.spec, cfg.grid, cfg.psi0, th, cfg.solver, cfg.tol, cfg.panels, cfg.sample_count)
        out[th] = verify_pairing_identity("B3", c, realizations, base_seed)
    return out


def conjugation_pairs_consistent(cfg: PairingConfig, tol: float = 1e-12) -> bool:
    """Checks the reduced sandwich forms commute with Hermitian conjugation.

    For ``B2``, ``B3`` and ``D1`` the structure is ``c N P N^dagger``; its
    adjoint must equal the same structure with ``conj(c)``. ``C1`` and its
    adjoint ``dS/dt S`` share the structure ``N^2``.
    """
    psi = cfg.psi0.data
    proj = np.outer(psi, psi.conj())
    ok = True
    for pid in ("B2", "B3", "D1", "C1"):
        m = reduced_form(pid, cfg)
        alt = np.zeros_like(m)
        for ch in cfg.spec.channels:
            c = np.conj(pairing_coefficients(pid, ch.kernel, cfg.panels)["c"])
            n = ch.N.data
            alt += c * (n @ proj @ n.conj().T if pid != "C1" else n @ n)
        ok &= bool(np.max(np.abs(m.conj().T - alt)) <= tol * max(1.0, float(np.max(np.abs(m)))))
    return ok


def _scaled_spec(spec: TemporalModelSpec, ell: float, g: float, gamma_ref: list[float] | None) -> TemporalModelSpec:
    """Copy of ``spec`` with every support radius set to ``ell`` and amplitude ``g``.

    With ``gamma_ref`` given, each channel amplitude is then rescaled so its
    rate matches the reference, which keeps ``gamma`` fixed across ``ell``.
    """
    chans = []
    for k, ch in enumerate(spec.channels):
        kern = dataclasses.replace(ch.kernel, ell=ell, g=g)
        if gamma_ref is not None and g > 0:
            rate = lindblad_rate(kern)
            if rate > 0:
                kern = dataclasses.replace(kern, g=g * math.sqrt(gamma_ref[k] / rate))
        chans.append(Channel(ch.N, kern))
    return TemporalModelSpec(spec.dim, chans, spec.H0, spec.use_window)


def adjacent_residual(spec: TemporalModelSpec, grid: TimeGrid, psi0: StateVector, realizations: int,
                      base_seed: int, solver: str = "windowed-sweep", tol: float = 1e-10) -> tuple[float, float]:
    """``max_t`` trace distance between the ensemble and the master equation.

    The ensemble mean uses the Gaussian-phase control variate. The standard
    error is the bound ``sqrt(d)/2 * ||SE||_F`` at the node of the maximum.

    Returns:
        ``(residual, standard_error)``.
    """
    rho0 = np.outer(psi0.data, psi0.data.conj())
    lind = integrate_lindblad_temporal(rho0, spec, grid)
    mean, se = ensemble_density_controlled(spec, psi0, grid, realizations, base_seed, solver=solver, tol=tol)
    td = trace_distance_series(mean, lind)
    j = int(np.argmax(td))
    return float(td[j]), float(0.5 * math.sqrt(spec.dim) * np.sqrt(np.sum(se[j] ** 2)))


def _fit(g: np.ndarray, res: np.ndarray) -> tuple[float, float]:
    """Least-squares slope of ``log res`` against ``log g`` and the rms misfit."""
    x, y = np.log(g), np.log(res)
    slope, icpt = np.polyfit(x, y, 1)
    return float(slope), float(np.sqrt(np.mean((y - slope * x - icpt) ** 2)))


def nonadjacent_scaling_probe(ell_list, g_list, config: PairingConfig, realizations: int,
                              base_seed: int = 0) -> dict:
    """Scaling of the non-adjacent pairing error with amplitude and support radius.

    For every ``(ell, g)`` the residual is the largest trace distance between
    the ensemble density and the adjacent-pairing master equation. Rows are
    indexed by ``g`` as set at the first ``ell``; at the other radii the
    amplitude is rescaled to keep each channel rate fixed. Slopes are fitted
    in ``g`` at fixed ``ell`` over the positive ``g`` values.

    Returns:
        Dict with ``ell``, ``g``, ``residual`` and ``standard_error``
        (``[ell][g]``), ``slopes`` and ``fit_residuals`` per ``ell``,
        ``slopes_ok`` (each within ``2 +- 0.3``) and ``ell_ordering`` (per
        ``g > 0``, residual non-increasing as ``ell`` shrinks).

    Raises:
        CollapseLabError: ``schema-error`` for fewer than three values or a
            ``g`` range short of a decade; ``contraction-violated`` from the
            guard; ``underpowered`` if some residual is within five standard
            errors of zero, with the required ``R``.
    """
    ells = [float(x) for x in ell_list]
    gs = [float(x) for x in g_list]
    pos = [g for g in gs if g > 0]
    if len(ells) < 3 or len(gs) < 3:
        raise CollapseLabError("schema-error", "need at least three values of ell and of g", _MODULE)
    if len(pos) < 2 or max(pos) < 10.0 * min(pos) * (1 - 1e-9):
        raise CollapseLabError("schema-error", "positive g values must span a decade", _MODULE)
    _check_realizations(realizations)
    base = config.spec
    res = np.zeros((len(ells), len(gs)))
    err = np.zeros_like(res)
    refs: dict[float, list[float]] = {}
    specs = {}
    for i, ell in enumerate(ells):
        for j, g in enumerate(gs):
            spec = _scaled_spec(base, ell, g, refs.get(g))
            if i == 0:
                refs[g] = [lindblad_rate(c) for c in spec.channels]
            if g > 0:
                check_contraction(spec, config.grid, config.solver)  # every point before any run
                specs[i, j] = spec
    for (i, j), spec in specs.items():
        ell, g = ells[i], gs[j]
        res[i, j], err[i, j] = adjacent_residual(spec, config.grid, config.psi0, realizations, base_seed,
                                                 config.solver, config.tol)
        if err[i, j] * N_SIGMA >= res[i, j]:
            need = int(math.ceil(1.1 * realizations * (N_SIGMA * err[i, j] / max(res[i, j], 1e-300)) ** 2))
            raise CollapseLabError("underpowered", f"residual {res[i, j]:.3e} within {N_SIGMA} standard errors "
                                   f"({err[i, j]:.3e}) at ell={ell}, g={g}", _MODULE, required_R=need,
                                   ell=ell, g=g)
    cols = [j for j, g in enumerate(gs) if g > 0]
    gpos = np.array([gs[j] for j in cols])
    slopes, misfit = [], []
    for i in range(len(ells)):
        sl, mf = _fit(gpos, res[i, cols])
        slopes.append(sl)
        misfit.append(mf)
    order = np.argsort(ells)[::-1]
    ordering = {gs[j]: bool(np.all(np.diff(res[order, j]) <= 0)) for j in cols}
    return {
        "ell": ells,
        "g": gs,
        "residual": res.tolist(),
        "standard_error": err.tolist(),
        "slopes": slopes,
        "fit_residuals": misfit,
        "slopes_ok": [abs(s - SLOPE_TARGET) <= SLOPE_TOL for s in slopes],
        "ell_ordering": ordering,
        "realizations": realizations,
        "config_digest": config.digest(),
    }
