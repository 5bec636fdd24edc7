from __future__ import annotations

import math
import types

import numpy as np
import pytest

from collapse_lab import collapse_harness as ch
from collapse_lab.collapse_harness import CollapseConfig
from collapse_lab.errors import CollapseLabError
from collapse_lab.hilbert import HermitianOperator, StateVector, TimeGrid, pauli
from collapse_lab.temporal_model import Channel, KernelProfile, TemporalModelSpec

P = pauli()
GRID = TimeGrid(0.0, 0.4, 0.004)
BORN = StateVector([math.sqrt(0.8), math.sqrt(0.2)])


def spec(g=1.0, n=P["Z"], form="box"):
    return TemporalModelSpec(2, [Channel(n, KernelProfile(form, 0.02, g))])


def cfg(g=1.0, psi0=BORN, r=200, obs=P["Z"], **kw):
    return CollapseConfig(spec(g), HermitianOperator(obs), psi0, GRID, r, 3, **kw)


class TestConfig:
    def test_threshold_range(self):
        for p in (0.5, 1.0, 0.2):
            with pytest.raises(CollapseLabError):
                cfg(p_c=p)

    def test_observable_must_commute(self):
        with pytest.raises(CollapseLabError) as e:
            cfg(obs=P["X"])
        assert e.value.code == "observable-not-commuting"

    def test_channels_must_commute(self):
        s = TemporalModelSpec(2, [Channel(P["Z"], KernelProfile("box", 0.02)),
                                  Channel(P["X"], KernelProfile("box", 0.02))])
        with pytest.raises(CollapseLabError) as e:
            CollapseConfig(s, HermitianOperator(np.eye(2)), BORN, GRID)
        assert e.value.code == "observable-not-commuting"

    def test_window_must_fit(self):
        with pytest.raises(CollapseLabError):
            CollapseConfig(spec(), HermitianOperator(P["Z"]), BORN, TimeGrid(0, 0.1, 0.004))

    def test_realizations(self):
        with pytest.raises(CollapseLabError):
            cfg(r=1)


class TestHelpers:
    def test_eigenspaces_group_degenerate(self):
        vals, projs = ch.eigenspaces(HermitianOperator(np.diag([1.0, -1.0, 1.0])))
        assert np.allclose(vals, [-1, 1])
        assert np.allclose(projs[1], np.diag([1, 0, 1]))
        assert np.allclose(projs.sum(axis=0), np.eye(3))

    def test_binomial_interval(self):
        lo, hi = ch.binomial_interval(0.8, 4000)
        assert lo < 0.8 < hi
        assert hi - lo == pytest.approx(2 * 2.5758 * math.sqrt(0.16 / 4000), rel=0.05)

    def test_total_rate(self):
        s = spec()
        flat = TemporalModelSpec(2, s.channels, use_window=False)
        assert ch.total_rate(flat, GRID) == pytest.approx(0.25 * 0.4, rel=1e-8)
        assert ch.total_rate(s, GRID) < ch.total_rate(flat, GRID)

    def test_median_interval(self):
        med, lo, hi = ch.median_interval(np.arange(1.0, 102.0))
        assert med == 51 and lo < 51 < hi
        assert ch.median_interval(np.array([1.0, np.inf, np.inf]))[0] == math.inf
        assert ch.median_interval(np.array([]))[0] == math.inf


class TestRun:
    def test_eigenstate(self):
        rep = ch.run_collapse_experiment(cfg(psi0=StateVector([1, 0])))
        # zero up to the O(h^2) norm defect carried by c(t)
        assert np.abs(rep.variance_series).max() < 1e-6
        rows = {r["eigenvalue"]: r for r in rep.born_table}
        assert rows[1.0]["observed"] == 1.0 and rows[-1.0]["observed"] == 0.0
        assert rep.unresolved_fraction == 0
        assert rep.martingale_ok()

    def test_zero_kernel(self):
        rep = ch.run_collapse_experiment(cfg(g=0.0))
        assert np.allclose(rep.variance_series, rep.variance_series[0], atol=1e-14)
        assert rep.unresolved_fraction == 1.0
        assert np.all(np.isinf(rep.collapse_times))
        assert np.allclose(rep.c, 1.0)

    def test_born_sums_and_endpoints(self):
        rep = ch.run_collapse_experiment(cfg())
        assert sum(r["predicted"] for r in rep.born_table) == pytest.approx(1.0, abs=1e-14)
        assert sum(r["observed"] for r in rep.born_table) + rep.unresolved_fraction == pytest.approx(1.0, abs=1e-14)
        assert rep.c[0] == pytest.approx(1.0, abs=1e-10)
        assert rep.c[-1] == pytest.approx(1.0, abs=1e-4)
        assert rep.martingale_ok()
        assert rep.variance_monotone()
        d = rep.to_dict()
        assert d["realizations"] == 200 and d["p_c"] == 0.95

    def test_eigenspace_weights_frozen(self):
        # The commutator norm of each eigenspace component is conserved along
        # every trajectory, so the weights at t1 equal the initial ones.
        c = cfg(r=50)
        vals, projs = ch.eigenspaces(c.observable)
        for disc, coef, psi in ch._passes(c):
            w = np.stack([ch._cip(disc, coef, psi, p).real for p in projs], axis=-1)
            frac = w / w.sum(axis=-1, keepdims=True)
            assert np.abs(frac[:, -1, 1] - 0.8).max() < 1e-6
            assert np.abs(psi[:, -1] - psi[:, 0]).max() > 1e-3  # trajectories do move

    def test_rate_warning_for_short_runs(self):
        with pytest.warns(UserWarning):
            ch.run_collapse_experiment(cfg(r=4))


class TestVarianceRate:
    def test_eigenstate(self):
        rep = ch.variance_rate_check(cfg(psi0=StateVector([1, 0]), r=40), [0.1, 0.2, 0.3])
        assert np.allclose(rep["lhs_rate"], 0, atol=1e-5) and np.allclose(rep["rhs_formula"], 0, atol=1e-12)
        assert rep["pass"]

    def test_sides_agree(self):
        rep = ch.variance_rate_check(cfg(r=200), [0.1, 0.16, 0.2, 0.24, 0.3])
        assert rep["nonpositive"]
        assert np.all(rep["z"] <= 5)

    @pytest.mark.xfail(strict=True, reason="eigenspace weights are conserved per trajectory, so the variance "
                                           "does not decrease (see the decisions ledger)")
    def test_variance_decreases_early(self):
        rep = ch.variance_rate_check(cfg(r=400), [0.1, 0.12])
        assert rep["lhs_rate"][0] < -3 * rep["lhs_se"][0]

    def test_needs_two_times(self):
        with pytest.raises(CollapseLabError):
            ch.variance_rate_check(cfg(r=4), [0.1])


class TestComposite:
    def test_sigma_z_scalar(self):
        rep = ch.composite_check(cfg())
        assert rep["deviation_from_scalar"] < 1e-12

    def test_projector_not_scalar(self):
        c = CollapseConfig(spec(n=np.diag([1.0, 0.0])), HermitianOperator(P["Z"]), BORN, GRID)
        assert ch.composite_check(c)["deviation_from_scalar"] > 0.1

    def test_zero_kernel(self):
        rep = ch.composite_check(cfg(g=0.0))
        assert rep["deviation_from_scalar"] == 0 and np.all(rep["operator_estimate"] == 0)


class TestHartreeFock:
    def test_bad_q(self):
        with pytest.raises(CollapseLabError):
            ch.hartree_fock_demo(cfg(r=4), [0, 1])

    def test_zero_kernel_unresolved(self):
        out = ch.hartree_fock_demo(cfg(g=0.0, r=8), [1, 2])
        assert all(r["unresolved"] == r["composites"] for r in out["rows"])
        assert not out["all_resolved_median"]

    def test_order_statistics(self, monkeypatch):
        # Exercise the composite logic on i.i.d. exponential collapse times.
        times = np.random.default_rng(0).exponential(1.0, 4000)
        fake = types.SimpleNamespace(collapse_times=times)
        monkeypatch.setattr(ch, "run_collapse_experiment", lambda c: fake)
        out = ch.hartree_fock_demo(cfg(r=4), [4, 1, 2])
        rows = out["rows"]
        assert [r["q"] for r in rows] == [1, 2, 4]
        assert rows[0]["median"] == pytest.approx(np.median(times))
        # min of q exponentials has median ln2 / q
        for r in rows:
            assert r["ci_low"] <= math.log(2) / r["q"] <= r["ci_high"]
        assert out["monotone"] and out["all_resolved_median"]
