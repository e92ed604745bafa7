import logging
import math

import numpy as np
import pytest

from emqm.circuit import ModelParams
from emqm.hamiltonian import HamiltonianSpec, LocalTerm, builtin_spec
from emqm.harness import (
    BudgetExceeded,
    DeviationSeries,
    RealizationResult,
    RunConfig,
    aggregate,
    cpu_estimate,
    derive_params,
    err_curve,
    output_steps,
    predict_errors,
    run_experiment,
    run_realization,
)


class TestDeriveParams:
    def test_half(self):
        p = derive_params(4, 0.5)
        assert (p.S, p.delta_t) == (64, 0.125)
        assert p.m0 == pytest.approx(9.765625e-4, rel=1e-15)
        assert p.delta_m == pytest.approx(1.1920928955078125e-07, rel=1e-15)
        # (dm/4)(Sn/2N)(3/(1-1/N)) dt
        assert p.Delta_t == pytest.approx(1.1920928955078125e-07 / 4 * 8 * 3.2 * 0.125, rel=1e-12)

    def test_monotone_limit(self):
        ps = [derive_params(4, e) for e in (1.0, 0.5, 0.2, 0.1, 0.05)]
        for a, b in zip(ps, ps[1:]):
            assert b.S > a.S
            assert b.delta_t < a.delta_t and b.m0 < a.m0 and b.delta_m < a.delta_m

    def test_caption_mismatch_flagged(self, caplog):
        with caplog.at_level(logging.WARNING):
            p = derive_params(4, 0.02)
        assert p.S == 40000
        assert "800" in caplog.text

    def test_override_propagates(self):
        p = derive_params(4, 0.02, S=800)
        assert p.S == 800
        assert p.m0 == pytest.approx(0.02 / (800 * 8))

    def test_inadmissible_dt_halved(self, caplog):
        g = 4 * builtin_spec("yx-y", 2).terms[0].g
        spec = HamiltonianSpec(2, [LocalTerm(1, g), LocalTerm(2, g)])
        with caplog.at_level(logging.WARNING):
            p = derive_params(2, 1.0, spec)
        assert p.delta_t < 0.5
        assert "halving" in caplog.text

    @pytest.mark.parametrize("bad", [dict(n=3, epsilon0=0.5), dict(n=4, epsilon0=0.0), dict(n=4, epsilon0=1.5)])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            derive_params(**bad)


class TestPredict:
    def test_zero_time(self):
        pred = predict_errors(derive_params(4, 0.5), 0.0)
        for arr in (pred.eps_m, pred.eps_t, pred.eps_S, pred.eps_stat, pred.eps_delay, pred.total):
            assert arr[0] == 0.0

    def test_crossover_at_inverse_eps0(self):
        p = derive_params(4, 0.5)
        pred = predict_errors(p, 2.0)
        for arr in (pred.eps_m, pred.eps_t, pred.eps_S, pred.eps_stat):
            assert arr[0] == pytest.approx(1.0, rel=1e-12)

    def test_total_matches_single_knob_curve(self):
        p = derive_params(4, 0.5)
        t = np.geomspace(0.01, 10, 25)
        pred = predict_errors(p, t)
        assert np.allclose(pred.total, np.minimum(err_curve(0.5, t), math.sqrt(2)), rtol=1e-12)
        assert np.all(pred.total <= math.sqrt(2))

    def test_delay_negligible(self):
        eps0, n = 0.5, 4
        p = derive_params(n, eps0)
        t = np.array([0.5, 2.0])
        pred = predict_errors(p, t)
        expect = eps0**4 * t / (n**3 * 16 * np.sqrt(eps0 * t))
        assert np.allclose(pred.eps_delay / pred.eps_stat, expect, rtol=1e-12)
        assert np.all(pred.eps_delay / pred.total < 1e-3)

    def test_jump_term(self):
        p = derive_params(4, 1.0)
        t = np.array([1.0])
        const = predict_errors(p, t, delta_jump=100)
        assert const.eps_jump[0] == pytest.approx(4 * p.Delta_t * 100)
        # constant jumps: sum of squares over t / (dj Delta_t) jumps gives the same value
        k = 1.0 / (100 * p.Delta_t)
        summed = predict_errors(p, t, jump_sq_sum=k * 100**2)
        assert summed.eps_jump[0] == pytest.approx(const.eps_jump[0])
        assert summed.tilde[0] >= summed.total[0]
        assert summed.v_fast == pytest.approx(1 / p.Delta_t)

    def test_calibration(self):
        p = derive_params(4, 0.5)
        base = predict_errors(p, 1.0)
        cal = predict_errors(p, 1.0, calibration={"S": 3.0})
        assert cal.eps_S[0] == pytest.approx(3 * base.eps_S[0])
        assert cal.eps_m[0] == base.eps_m[0]


class TestCpu:
    def test_zero(self):
        est = cpu_estimate(derive_params(4, 0.5), 0.0)
        assert est["steps"] == 0 and est["exact_site_updates"] == 0 and est["fast_jumps"] == 0

    def test_linear_in_S(self):
        a = ModelParams(4, 10, 0.1, 0.01, 1e-4)
        b = ModelParams(4, 20, 0.1, 0.01, 5e-5)
        assert a.Delta_t == pytest.approx(b.Delta_t)
        ea, eb = cpu_estimate(a, 1.0), cpu_estimate(b, 1.0)
        assert eb["exact_site_updates"] == pytest.approx(2 * ea["exact_site_updates"])

    def test_eps0_power(self):
        e1 = cpu_estimate(derive_params(4, 0.5), 1.0)["exact_site_updates"]
        e2 = cpu_estimate(derive_params(4, 0.25), 1.0)["exact_site_updates"]
        assert e2 / e1 == pytest.approx(2**8, rel=1e-12)

    def test_budget(self):
        cfg = RunConfig(n=4, epsilon0=0.5, t_max=4.0, max_work=1e3)
        with pytest.raises(BudgetExceeded):
            run_experiment(cfg)


class TestConfig:
    def test_parse(self):
        text = """
        # comment
        n = 2
        epsilon0 = 1.0   # trailing
        S = 8
        mode = fast
        output_times = 0.1, 0.2, 0.4
        calibration = S:2, stat:0.5
        joint = false
        """
        cfg = RunConfig.from_text(text, seed=5)
        assert cfg.n == 2 and cfg.S == 8 and cfg.mode == "fast" and cfg.seed == 5 and not cfg.joint
        assert np.allclose(cfg.times(), [0.1, 0.2, 0.4])
        assert cfg.calibration == {"S": 2.0, "stat": 0.5}
        assert cfg.params().S == 8

    def test_override_wins(self):
        assert RunConfig.from_text("n = 2", n=4).n == 4

    @pytest.mark.parametrize("text", ["bogus = 1", "n 2", "mode = slow", "output_times = 0.2 0.1", "realizations = 0"])
    def test_rejects(self, text):
        with pytest.raises(ValueError):
            RunConfig.from_text(text)

    def test_component(self):
        assert RunConfig(n=4).component == "0110"
        assert RunConfig(n=6).component == "011001"
        with pytest.raises(ValueError):
            RunConfig(n=4, component="01")

    def test_default_grid_log_spaced(self):
        t = RunConfig(t_min=0.01, t_max=1.0, n_times=3).times()
        assert np.allclose(t, [0.01, 0.1, 1.0])

    def test_output_steps_increasing(self):
        assert list(output_steps(np.array([0.0, 1e-9, 1.0]), 0.5)) == [0, 1, 2]


def small_config(**kw):
    base = dict(n=2, epsilon0=1.0, realizations=2, t_min=0.05, t_max=0.5, n_times=4, seed=3)
    return RunConfig(**(base | kw))


class TestRunner:
    def test_frozen_slow_variables(self):
        cfg = small_config(delta_m=0.0)
        res = run_experiment(cfg)
        eps = res.series.eps_mean
        assert np.ptp(eps) < 1e-12 and eps.max() < 1e-12

    def test_deterministic_bytes(self, tmp_path):
        cfg = small_config()
        run_experiment(cfg, tmp_path / "a")
        run_experiment(cfg, tmp_path / "b")
        for name in ("deviation.csv", "components.csv", "realization_0001/deviation.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_csv_schema(self, tmp_path):
        run_experiment(small_config(mode="fast"), tmp_path)
        lines = (tmp_path / "deviation.csv").read_text().splitlines()
        assert lines[0] == ",".join(DeviationSeries.HEADER)
        assert len(lines) == 5
        row = dict(zip(DeviationSeries.HEADER, lines[1].split(",")))
        eps = float(row["eps_mean"])
        assert 0 <= eps <= 2
        assert int(row["count"]) == 2
        sub = (tmp_path / "realization_0000" / "deviation.csv").read_text().splitlines()
        assert sub[0] == "t,tau,eps,psi_01,psi_qm_01"

    def test_realizations_differ(self):
        cfg = small_config()
        a, b = run_realization(cfg, 0), run_realization(cfg, 1)
        assert not np.array_equal(a.eps, b.eps)
        assert a.error is None

    def test_failure_is_recorded(self, tmp_path):
        # m0 = 0 leaves no emergent wavefunction to extract
        res = run_experiment(small_config(m0=0.0, realizations=1), tmp_path)
        assert res.realizations[0].error.startswith("ZeroPerturbation")
        assert (tmp_path / "realization_0000" / "error.txt").exists()
        assert np.all(res.series.count == 0)

    def test_parallel_matches_serial(self):
        a = run_experiment(small_config(realizations=3))
        b = run_experiment(small_config(realizations=3, workers=2))
        assert np.array_equal(a.series.eps_mean, b.series.eps_mean)


def test_standard_error_halves_with_four_times_the_runs():
    params = derive_params(2, 1.0)
    rng = np.random.default_rng(0)
    taus = np.array([1, 2, 3])

    def se(R):
        res = [RealizationResult(i, taus, rng.gamma(2.0, 0.1, 3), np.zeros(3), np.zeros(3), np.zeros(3)) for i in range(R)]
        s = aggregate(RunConfig(n=2, epsilon0=1.0), params, res)
        return s.eps_std / np.sqrt(s.count)

    ratio = se(800) / se(200)
    assert np.all(np.abs(ratio - 0.5) < 0.3 * 0.5)
