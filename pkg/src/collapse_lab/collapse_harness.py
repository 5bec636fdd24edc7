"""Collapse experiments on rescaled temporal-model trajectories.

Statistics use the commutator inner product ``(psi|A psi)``, which equals
``<psi~|A psi~>`` for the transformed states ``psi~ = sqrt(1 + S) psi``
whenever ``A`` commutes with every ``N_c``; it is conserved along each
trajectory up to the discretization defect. Trajectories are rescaled by
the ensemble factor ``c(t) = 1 / sqrt(<<(psi(t)|psi(t))>>)``. This factor is
a mean over the whole ensemble, so every experiment makes two passes over
the same noise paths: the first accumulates ``<<(psi|psi)>>`` at every node,
the second forms ``psi_res = c(t) psi`` and all statistics. Both passes
regenerate the paths from the base seed, so they see identical
trajectories.

A trajectory is assigned to eigenspace ``i`` of the observable when
``(psi|P_i psi) / (psi|psi) >= p_c`` at ``t1`` (where the envelope is off and
this is the plain norm ratio); otherwise it is unresolved. The same test
applied node by node gives the collapse time, the first node at which some
eigenspace reaches ``p_c``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from collapse_lab import noise as nz
from collapse_lab import temporal_model as tm
from collapse_lab.errors import CollapseLabError
from collapse_lab.hilbert import HermitianOperator, StateVector, TimeGrid, check_dims, commutator, max_norm

_MODULE = "collapse_harness"

COMMUTE_TOL = 1e-10
EIGEN_TOL = 1e-8
N_SIGMA = 5.0
CI_LEVEL = 0.99
MIN_GAMMA_T = 5.0
FAIL_FRACTION = 0.01
SMOOTH_NODES = 10


@dataclass(frozen=True)
class CollapseConfig:
    """Collapse experiment setup.

    Attributes:
        spec: Temporal model with mutually commuting ``N_c``.
        observable: Measured observable, commuting with every ``N_c``.
        psi0: Initial state.
        grid: State grid.
        realizations: Number of trajectories ``R``.
        base_seed: Base seed of the ensemble.
        p_c: Classification threshold in ``(0.5, 1)``.
        solver: Dyson solver.
        tol: Dyson residual target.
    """

    spec: tm.TemporalModelSpec
    observable: HermitianOperator
    psi0: StateVector
    grid: TimeGrid
    realizations: int = 4000
    base_seed: int = 0
    p_c: float = 0.95
    solver: str = "windowed-sweep"
    tol: float = 1e-10

    def __post_init__(self):
        if not isinstance(self.observable, HermitianOperator):
            object.__setattr__(self, "observable", HermitianOperator(self.observable))
        check_dims(self.spec.dim, self.observable.dim, self.psi0.dim)
        if not 0.5 < self.p_c < 1.0:
            raise CollapseLabError("schema-error", f"p_c must lie in (0.5, 1), got {self.p_c!r}", _MODULE)
        if self.realizations < 2:
            raise CollapseLabError("insufficient-samples", "need at least 2 realizations", _MODULE)
        o = self.observable.data
        ops = [c.N.data for c in self.spec.channels]
        for k, n in enumerate(ops):
            dev = max_norm(commutator(o, n))
            if dev > COMMUTE_TOL:
                raise CollapseLabError("observable-not-commuting", f"observable does not commute with channel {k} "
                                       f"({dev:.3e})", _MODULE, channel=k, deviation=dev)
            for j in range(k):
                dev = max_norm(commutator(ops[j], n))
                if dev > COMMUTE_TOL:
                    raise CollapseLabError("observable-not-commuting", f"channels {j} and {k} do not commute",
                                           _MODULE, channels=[j, k], deviation=dev)
        self.spec.check_window_fits(self.grid)


def eigenspaces(observable: HermitianOperator) -> tuple[np.ndarray, np.ndarray]:
    """Distinct eigenvalues (ascending) and orthogonal projectors ``(k, d, d)``."""
    w, v = np.linalg.eigh(observable.data)
    groups: list[list[int]] = []
    for j, x in enumerate(w):
        if groups and abs(x - w[groups[-1][0]]) <= EIGEN_TOL * max(1.0, abs(x)):
            groups[-1].append(j)
        else:
            groups.append([j])
    vals = np.array([float(np.mean(w[g])) for g in groups])
    projs = np.array([v[:, g] @ v[:, g].conj().T for g in groups])
    return vals, projs


def total_rate(spec: tm.TemporalModelSpec, grid: TimeGrid) -> float:
    """``sum_c gamma_c int w^2 dt``, the dephasing exposure of a run."""
    win = spec.window(grid)
    t = grid.times
    w2 = win(t) ** 2
    exposure = float(np.sum(0.5 * (w2[1:] + w2[:-1])) * grid.h)
    return sum(tm.lindblad_rate(c) for c in spec.channels) * exposure


@dataclass
class _Moments:
    """Per-node sums over trajectories."""

    n: int = 0
    sums: dict = field(default_factory=dict)

    def add(self, key: str, x: np.ndarray) -> None:
        s = x.sum(axis=0)
        if key in self.sums:
            self.sums[key] = self.sums[key] + s
        else:
            self.sums[key] = s

    def mean(self, key: str) -> np.ndarray:
        return self.sums[key] / self.n


def _passes(cfg: CollapseConfig, chunk: int | None = None):
    """Yields ``(disc, coef, psi)`` batches in index order; failed trajectories are dropped.

    Raises:
        CollapseLabError: the first solver error if more than 1% of the
            trajectories fail.
    """
    spec, grid = cfg.spec, cfg.grid
    disc = tm.Discretization.build(spec, grid)
    chunk = chunk or tm.chunk_size(spec, grid)
    failed: list[int] = []
    first_error = None
    for start in range(0, cfg.realizations, chunk):
        count = min(chunk, cfg.realizations - start)
        W = nz.sample_ensemble_values(grid, spec.channel_count, cfg.base_seed, count, start)
        coef = disc.coefficients(W)
        seeds = [nz.derive_seed(cfg.base_seed, start + k) for k in range(count)]
        try:
            psi, _ = tm.solve_batch(disc, coef, cfg.psi0.data, cfg.solver, cfg.tol, seeds=seeds)
        except CollapseLabError as err:
            # Retry one by one so a single bad path does not sink the batch.
            first_error = first_error or err
            keep = []
            for k in range(count):
                try:
                    p, _ = tm.solve_batch(disc, coef[k:k + 1], cfg.psi0.data, cfg.solver, cfg.tol,
                                          seeds=[seeds[k]])
                    keep.append(k)
                except CollapseLabError:
                    failed.append(start + k)
            if len(failed) > FAIL_FRACTION * cfg.realizations:
                raise CollapseLabError(first_error.code, f"{len(failed)} trajectories failed: {first_error}",
                                       _MODULE, failed=failed, seeds=[nz.derive_seed(cfg.base_seed, r)
                                                                      for r in failed]) from err
            if not keep:
                continue
            coef = coef[keep]
            psi, _ = tm.solve_batch(disc, coef, cfg.psi0.data, cfg.solver, cfg.tol,
                                    seeds=[seeds[k] for k in keep])
        yield disc, coef, psi
    if failed:
        warnings.warn(f"{len(failed)} trajectories failed and were dropped", stacklevel=3)


def _cip(disc: tm.Discretization, coef: np.ndarray, psi: np.ndarray, op: np.ndarray) -> np.ndarray:
    """Real part of ``(psi|op psi)`` at every node, ``(R, n)``."""
    return tm.commutator_ip_series(disc, coef, psi, psi @ op.T).real


@dataclass(frozen=True)
class CollapseReport:
    """Statistics of a collapse run.

    Attributes:
        times: Grid times.
        c: Rescaling factor ``c(t)``.
        mean_observable: ``<<(psi_res|O psi_res)>>`` per node.
        mean_observable_se: Its standard error.
        martingale_drift: ``max_t |<<O>>_res(t) - <<O>>_res(t0)|``.
        martingale_z: Largest drift in units of the paired standard error.
        variance_series: ``<<(psi_res|O^2 psi_res) - (psi_res|O psi_res)^2>>``.
        variance_se: Its standard error per node.
        eigenvalues: Distinct eigenvalues of the observable.
        born_table: Rows ``{eigenvalue, predicted, observed, ci_low, ci_high, inside}``.
        unresolved_fraction: Fraction of trajectories assigned to no eigenspace.
        collapse_times: Per-trajectory collapse time (``inf`` if never resolved).
        realizations: Trajectories that entered the statistics.
        gamma_t: Dephasing exposure ``sum gamma int w^2``.
        p_c: Classification threshold.
        variance_floor: Per-node bound on the variance error caused by the
            measured drift of ``(psi|psi)`` along trajectories (the
            discretization defect of the norm).
    """

    times: np.ndarray
    c: np.ndarray
    mean_observable: np.ndarray
    mean_observable_se: np.ndarray
    martingale_drift: float
    martingale_z: float
    variance_series: np.ndarray
    variance_se: np.ndarray
    eigenvalues: np.ndarray
    born_table: list
    unresolved_fraction: float
    collapse_times: np.ndarray
    realizations: int
    gamma_t: float
    p_c: float
    variance_floor: np.ndarray | None = None

    @property
    def variance_ratio(self) -> float:
        """Final over initial ensemble variance (``inf`` if the initial one is zero)."""
        v0 = float(self.variance_series[0])
        return float(self.variance_series[-1]) / v0 if v0 > 0 else math.inf

    def martingale_ok(self) -> bool:
        return self.martingale_z <= N_SIGMA

    def born_ok(self) -> bool:
        return all(row["inside"] for row in self.born_table)

    def variance_monotone(self) -> bool:
        """Smoothed variance non-increasing up to 5 standard errors at every node.

        The norm-defect floor is added to the allowance, at both the later node
        and the earlier one it is compared with.
        """
        k = min(SMOOTH_NODES, self.variance_series.size)
        ker = np.ones(k) / k
        v = np.convolve(self.variance_series, ker, mode="valid")
        se = np.convolve(self.variance_se, ker, mode="valid")
        floor = 0.0 if self.variance_floor is None else np.convolve(self.variance_floor, ker, mode="valid")
        # each node is compared with every earlier one, both with their allowance
        allow = N_SIGMA * se + floor + 1e-12
        return bool(np.all(v - allow <= np.minimum.accumulate(v + allow)))

    def to_dict(self) -> dict:
        return {
            "martingale_drift": self.martingale_drift,
            "martingale_z": self.martingale_z,
            "variance_initial": float(self.variance_series[0]),
            "variance_final": float(self.variance_series[-1]),
            "variance_ratio": self.variance_ratio,
            "born_table": self.born_table,
            "unresolved_fraction": self.unresolved_fraction,
            "realizations": self.realizations,
            "gamma_t": self.gamma_t,
            "p_c": self.p_c,
        }


def binomial_interval(p: float, n: int, level: float = CI_LEVEL) -> tuple[float, float]:
    """Central ``level`` interval of ``Binomial(n, p) / n``."""
    a = 0.5 * (1.0 - level)
    return float(stats.binom.ppf(a, n, p)) / n, float(stats.binom.ppf(1.0 - a, n, p)) / n


def _weights(psi: np.ndarray, projs: np.ndarray) -> np.ndarray:
    """``||P_k psi||^2`` for states ``(..., d)``, shape ``(..., k)``."""
    return np.einsum("...i,kij,...j->...k", psi.conj(), projs, psi).real


def run_collapse_experiment(cfg: CollapseConfig) -> CollapseReport:
    """Two-pass collapse run (see module docstring).

    Raises:
        CollapseLabError: solver errors if more than 1% of trajectories fail.
    """
    spec, grid = cfg.spec, cfg.grid
    gamma_t = total_rate(spec, grid)
    if spec.channels and gamma_t < MIN_GAMMA_T:
        warnings.warn(f"dephasing exposure gamma T = {gamma_t:.3g} below {MIN_GAMMA_T}", stacklevel=2)
    vals, projs = eigenspaces(cfg.observable)

    def weights(disc, coef, psi):
        # (psi|P_k psi), shape (R, n, k); O and O^2 are combinations of these.
        return np.stack([_cip(disc, coef, psi, p) for p in projs], axis=-1)

    # Pass 1: ensemble norm.
    norm_sum = np.zeros(grid.n)
    count = 0
    for disc, coef, psi in _passes(cfg):
        norm_sum += weights(disc, coef, psi).sum(axis=(0, 2))
        count += psi.shape[0]
    c = 1.0 / np.sqrt(norm_sum / count)

    # Pass 2: statistics of the rescaled states.
    mom = _Moments()
    assigned = np.zeros(len(vals))
    unresolved = 0
    ctimes = []
    t = grid.times
    for disc, coef, psi in _passes(cfg):
        wts = weights(disc, coef, psi)
        c2 = (c ** 2)[None, :]
        e1 = c2 * (wts @ vals)
        e2 = c2 * (wts @ vals ** 2)
        var = e2 - e1 ** 2
        drift = e1 - e1[:, :1]
        nrm = wts.sum(axis=-1)
        defect = np.abs(nrm - nrm[:, :1])
        mom.n += psi.shape[0]
        for key, x in (("e1", e1), ("e1sq", e1 ** 2), ("var", var), ("varsq", var ** 2), ("drift", drift),
                       ("driftsq", drift ** 2), ("defect", defect)):
            mom.add(key, x)
        frac = wts / np.maximum(wts.sum(axis=-1, keepdims=True), 1e-300)
        final = frac[:, -1]
        hit = final >= cfg.p_c
        for k in range(len(vals)):
            assigned[k] += int(np.sum(hit[:, k]))
        unresolved += int(np.sum(~hit.any(axis=1)))
        resolved_at = (frac >= cfg.p_c).any(axis=-1)
        first = np.where(resolved_at.any(axis=1), t[np.argmax(resolved_at, axis=1)], np.inf)
        ctimes.append(first)
    r = mom.n

    def se(key, sq):
        m = mom.mean(key)
        v = np.maximum(mom.mean(sq) - m ** 2, 0.0) * r / max(r - 1, 1)
        return np.sqrt(v / r)

    mean_o = mom.mean("e1")
    se_o = se("e1", "e1sq")
    drift = mom.mean("drift")
    se_d = se("drift", "driftsq")
    with np.errstate(divide="ignore", invalid="ignore"):
        zs = np.where(se_d > 0, np.abs(drift) / se_d, np.where(np.abs(drift) > 1e-12, np.inf, 0.0))
    var_series = mom.mean("var")
    var_se = se("var", "varsq")
    # The variance is quadratic in weights that each carry the norm defect.
    var_floor = 2.0 * float(np.max(vals ** 2)) * c ** 2 * mom.mean("defect")

    psi0 = cfg.psi0.data
    pred = _weights(psi0, projs) / float(np.vdot(psi0, psi0).real)
    pred = pred / pred.sum()
    table = []
    for k, lam in enumerate(vals):
        lo, hi = binomial_interval(float(pred[k]), r)
        obs = assigned[k] / r
        table.append({"eigenvalue": float(lam), "predicted": float(pred[k]), "observed": float(obs),
                      "ci_low": lo, "ci_high": hi, "inside": bool(lo <= obs <= hi)})
    return CollapseReport(t, c, mean_o, se_o, float(np.max(np.abs(drift))), float(np.max(zs)), var_series, var_se,
                          vals, table, unresolved / r, np.concatenate(ctimes), r, gamma_t, cfg.p_c, var_floor)


def _coll2_coefficients(spec: tm.TemporalModelSpec, grid: TimeGrid, times: np.ndarray, panels: int = 4
                        ) -> np.ndarray:
    """``k_c(t) = int (X - X^dagger)(Z - Z^dagger) d zeta`` as scalars times ``N_c^2``, ``(channels, len(times))``."""
    from collapse_lab import quadrature as quad

    win = spec.window(grid)
    out = np.zeros((spec.channel_count, times.size))
    for c, ch in enumerate(spec.channels):
        half = 0.5 * ch.kernel.ell
        z, w = quad.nodes_weights(-half, half, (0.0,), panels)
        prod = np.zeros(z.size, dtype=complex)
        for j, zj in enumerate(z):
            x, _, zz = tm.build_XYZ(0.0, zj, ch, None, panels)
            n = ch.N.data
            # X - X^dagger = x_s N and Z - Z^dagger = z_s N with purely imaginary scalars.
            k = int(np.argmax(np.abs(n.ravel())))
            x_s = (x.data - x.data.conj().T).ravel()[k] / n.ravel()[k]
            z_s = (zz.data - zz.data.conj().T).ravel()[k] / n.ravel()[k]
            prod[j] = x_s * z_s
        w2 = win(times[:, None] + z[None, :]) ** 2
        out[c] = (w2 @ (w * prod)).real
    return out


def variance_rate_check(cfg: CollapseConfig, sample_times) -> dict:
    """Measured variance rate against the pairing formula between sample times.

    LHS: finite difference of the ensemble variance of ``psi_res`` between
    adjacent sample times (standard error of the paired per-trajectory
    difference). RHS: the formula
    ``-4 sum int (<O(X-X^+)> <1> - <O><X-X^+>)(<O(Z-Z^+)> <1> - <O><Z-Z^+>)``
    evaluated on every rescaled state and averaged over the ensemble and the
    two interval ends.

    Returns:
        Dict with ``times`` (interval midpoints), ``lhs_rate``, ``lhs_se``,
        ``rhs_formula``, ``z`` (``|lhs - rhs| / se``), ``nonpositive``
        (``lhs <= 5 se`` everywhere) and ``pass``.

    Raises:
        CollapseLabError: ``underpowered`` if every standard error is zero
            while the two sides differ.
    """
    spec, grid = cfg.spec, cfg.grid
    idx = np.array(sorted({grid.index_of(float(s)) for s in sample_times}))
    if idx.size < 2:
        raise CollapseLabError("schema-error", "need at least two sample times", _MODULE)
    o = cfg.observable.data
    o2 = o @ o
    n_ops = spec.n_stack()
    ts = grid.times[idx]
    kc = _coll2_coefficients(spec, grid, ts) if spec.channels else np.zeros((0, idx.size))

    eye = np.eye(spec.dim)

    def ip(disc, coef, psi, op):
        return _cip(disc, coef, psi, op)[:, idx]

    norm_sum = np.zeros(idx.size)
    count = 0
    for disc, coef, psi in _passes(cfg):
        norm_sum += ip(disc, coef, psi, eye).sum(axis=0)
        count += psi.shape[0]
    c2 = (1.0 / (norm_sum / count))[None, :]

    m = idx.size
    s_d = np.zeros(m - 1)
    s_d2 = np.zeros(m - 1)
    s_rhs = np.zeros(m)
    r = 0
    for disc, coef, psi in _passes(cfg):
        nrm = c2 * ip(disc, coef, psi, eye)
        e1 = c2 * ip(disc, coef, psi, o)
        e2 = c2 * ip(disc, coef, psi, o2)
        var = e2 - e1 ** 2
        dv = np.diff(var, axis=1)
        s_d += dv.sum(axis=0)
        s_d2 += (dv ** 2).sum(axis=0)
        rhs = np.zeros(var.shape)
        for k in range(spec.channel_count):
            n = n_ops[k]
            eon = c2 * ip(disc, coef, psi, o @ n)
            en = c2 * ip(disc, coef, psi, n)
            cov = eon * nrm - e1 * en
            # (x_s cov)(z_s cov) with x_s z_s = k_c.
            rhs += -4.0 * kc[k][None, :] * cov ** 2
        s_rhs += rhs.sum(axis=0)
        r += psi.shape[0]
    dt = np.diff(ts)
    mean_d = s_d / r
    se_d = np.sqrt(np.maximum(s_d2 / r - mean_d ** 2, 0.0) * r / max(r - 1, 1) / r)
    lhs = mean_d / dt
    lhs_se = se_d / dt
    rhs_nodes = s_rhs / r
    rhs = 0.5 * (rhs_nodes[1:] + rhs_nodes[:-1])
    diff = np.abs(lhs - rhs)
    if np.all(lhs_se == 0) and np.any(diff > 1e-12):
        raise CollapseLabError("underpowered", "zero standard error with non-zero difference", _MODULE,
                               required_R=None)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(lhs_se > 0, diff / lhs_se, np.where(diff > 1e-12, np.inf, 0.0))
    nonpos = bool(np.all(lhs <= N_SIGMA * lhs_se + 1e-12))
    return {"times": 0.5 * (ts[1:] + ts[:-1]), "lhs_rate": lhs, "lhs_se": lhs_se, "rhs_formula": rhs, "z": z,
            "nonpositive": nonpos, "pass": bool(nonpos and np.all(z <= N_SIGMA))}


def composite_check(cfg: CollapseConfig, panels: int = 4) -> dict:
    """How far ``sum int (-XY - Y^+X^+ + Z^+X + X^+Z)`` is from a multiple of the identity.

    Evaluated on the envelope plateau by quadrature over ``zeta``.

    Returns:
        Dict with ``operator_estimate`` (``(d, d)``) and
        ``deviation_from_scalar`` (relative Frobenius distance to
        ``tr/d * 1``, zero for the zero operator).
    """
    from collapse_lab import quadrature as quad

    d = cfg.spec.dim
    est = np.zeros((d, d), dtype=complex)
    for ch in cfg.spec.channels:
        half = 0.5 * ch.kernel.ell
        z, w = quad.nodes_weights(-half, half, (0.0,), panels)
        for zj, wj in zip(z, w):
            x, y, zz = (a.data for a in tm.build_XYZ(0.0, zj, ch, None, panels))
            xd, yd, zd = x.conj().T, y.conj().T, zz.conj().T
            est += wj * (-x @ y - yd @ xd + zd @ x + xd @ zz)
    nrm = float(np.linalg.norm(est))
    if nrm == 0.0:
        dev = 0.0
    else:
        scalar = np.trace(est) / d * np.eye(d)
        dev = float(np.linalg.norm(est - scalar)) / nrm
    return {"operator_estimate": est, "deviation_from_scalar": dev}


def median_interval(x: np.ndarray, level: float = 0.95) -> tuple[float, float, float]:
    """Sample median and a distribution-free order-statistic interval.

    ``inf`` entries (unresolved) sort last, so the median is ``inf`` when at
    least half the samples are unresolved.
    """
    s = np.sort(np.asarray(x, dtype=float))
    n = s.size
    if n == 0:
        return math.inf, math.inf, math.inf
    med = float(np.median(s)) if np.isfinite(s[(n - 1) // 2]) and np.isfinite(s[n // 2]) else math.inf
    a = 0.5 * (1.0 - level)
    lo = int(stats.binom.ppf(a, n, 0.5))
    hi = int(stats.binom.ppf(1.0 - a, n, 0.5))
    return med, float(s[max(lo - 1, 0)]), float(s[min(hi, n - 1)])


def hartree_fock_demo(cfg: CollapseConfig, q_list) -> dict:
    """Composite collapse times of products of independent one-particle runs.

    One ensemble of ``R`` one-particle trajectories is split into disjoint
    groups of ``q`` consecutive trajectories; a composite collapses at the
    earliest collapse time in its group.

    Returns:
        Dict with per-``q`` rows ``{q, composites, median, ci_low, ci_high,
        unresolved}``, ``monotone`` (each median at most the upper interval
        end of the previous ``q``) and ``all_resolved_median`` (every median
        finite).
    """
    qs = sorted(int(q) for q in q_list)
    if not qs or qs[0] < 1:
        raise CollapseLabError("schema-error", "q values must be >= 1", _MODULE)
    rep = run_collapse_experiment(cfg)
    times = rep.collapse_times
    rows = []
    for q in qs:
        m = times.size // q
        if m < 1:
            raise CollapseLabError("insufficient-samples", f"not enough trajectories for q={q}", _MODULE)
        comp = times[:m * q].reshape(m, q).min(axis=1)
        med, lo, hi = median_interval(comp)
        rows.append({"q": q, "composites": m, "median": med, "ci_low": lo, "ci_high": hi,
                     "unresolved": int(np.sum(~np.isfinite(comp)))})
    mono = all(b["median"] <= a["ci_high"] for a, b in zip(rows[:-1], rows[1:]))
    return {"rows": rows, "monotone": bool(mono),
            "all_resolved_median": bool(all(math.isfinite(r["median"]) for r in rows)),
            "single_particle": rep}
