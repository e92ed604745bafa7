"""Acceptance gate. Each test prints one ``criterion k PASS|FAIL`` line.

The reproduction runs (criteria 4 to 7) take minutes each and carry the
``slow`` marker; deselect them with ``-m "not slow"``.
"""

import itertools
import math

import numpy as np
import pytest
from scipy.linalg import expm

from emqm.circuit import ModelParams, boundary_distribution, init_state, layer_matrix, step
from emqm.hamiltonian import (
    HamiltonianSpec,
    LocalTerm,
    build_boundary_kernel,
    builtin_spec,
    map_hamiltonian,
    map_state,
    random_local_term,
    validate_local_term,
)
from emqm.harness import BudgetExceeded, RunConfig, cpu_estimate, err_curve, run_experiment
from emqm.mixing import accumulate_W, design_moment, design_target, perp_eigenvalues
from emqm.reference import evolve_exact

G_EX = np.array([[0, -1, 1, 0], [1, 0, -1, 0], [-1, 1, 0, 0], [0, 0, 0, 0]], dtype=float)


def loglog_slope(t, y):
    return float(np.polyfit(np.log(t), np.log(y), 1)[0])


def test_kernel_identity(criterion):
    rng = np.random.default_rng(2024)
    worst_diff, worst_col, min_entry = 0.0, 0.0, np.inf
    for _ in range(100):
        term = LocalTerm(1, random_local_term(rng))
        for dt in (1e-3, 1e-2):
            k = build_boundary_kernel(term, dt)
            worst_diff = max(worst_diff, np.abs(k.b_plus - k.b_minus - dt * term.g).max())
            for b in (k.b_plus, k.b_minus):
                worst_col = max(worst_col, np.abs(b.sum(axis=0) - 1).max())
                min_entry = min(min_entry, b.min())
    ok = worst_diff < 1e-12 and worst_col < 1e-12 and min_entry >= 0
    assert criterion(1, "kernel identity", ok,
                     f"max|B+ - B- - dt G| = {worst_diff:.2e}, max column-sum error = {worst_col:.2e}, min entry = {min_entry:.3g}")


def test_warmup_drift(criterion):
    spec = HamiltonianSpec(2, [LocalTerm(1, G_EX), LocalTerm(2, np.zeros((4, 4)))])
    st = init_state(ModelParams(2, 1, 0.2, 0.1, 1e-3, seed=7), spec)
    steps = 100_000
    dt_eff = st.params.Delta_t
    diffs = np.empty((steps, 4))
    pred = np.empty((steps, 4))
    p = boundary_distribution(st).v
    for k in range(steps):
        step(st)
        q = boundary_distribution(st).v
        diffs[k] = q - p
        pred[k] = dt_eff * G_EX @ p
        p = q
    se = diffs.std(axis=0, ddof=1) / math.sqrt(steps)
    gap = diffs.mean(axis=0) - pred.mean(axis=0)
    # a component that never moves must match exactly
    frozen = se == 0
    z = np.where(frozen, np.where(gap == 0, 0.0, np.inf), gap / np.where(frozen, 1.0, se))
    ok = bool(np.all(np.abs(z) < 3))
    assert criterion(2, "warm-up drift", ok, f"z-scores {np.array2string(z, precision=2)} (|z| < 3)")


def test_dense_oracle(criterion):
    spec = builtin_spec("yx-y", 4)
    worst = 0.0
    for S in range(1, 9):
        st = init_state(ModelParams(4, S, 0.1, 0.05, 0.0, seed=100 + S), spec)
        dense = np.full(16, 1 / 16)
        for l in range(S):
            dense = layer_matrix(st, l) @ dense
        worst = max(worst, np.abs(boundary_distribution(st).v - dense).max())
    assert criterion(3, "boundary distribution vs dense chain", worst < 1e-12, f"max abs error {worst:.2e} over S = 1..8")


@pytest.mark.slow
def test_direct_simulation_tracks_estimate(criterion):
    times = np.geomspace(0.2, 4.0, 8)
    cfg = RunConfig(n=4, epsilon0=0.5, mode="exact", output_times=list(times), realizations=3, seed=11)
    res = run_experiment(cfg)
    target = np.minimum(err_curve(0.5, res.series.t), math.sqrt(2))
    ratios = np.array([r.eps / target for r in res.realizations])
    eps_max = max(np.nanmax(r.eps) for r in res.realizations)
    errors = [r.error for r in res.realizations if r.error]
    ok = not errors and np.all((ratios > 0.5) & (ratios < 2)) and eps_max < 2
    assert criterion(4, "direct simulation vs single-knob estimate", ok,
                     f"eps/estimate in [{np.nanmin(ratios):.3f}, {np.nanmax(ratios):.3f}] over t in [0.2, 4] "
                     f"(3 seeds, estimate capped at sqrt 2), max eps {eps_max:.3f} < 2")


@pytest.mark.slow
def test_fast_matches_exact(criterion):
    base = dict(n=4, epsilon0=1.0, epsilon_j=0.02, t_min=0.01, t_max=3.0, n_times=10, realizations=240)
    exact = run_experiment(RunConfig(mode="exact", seed=21, **base)).series
    fast = run_experiment(RunConfig(mode="fast", seed=22, **base)).series
    se = np.sqrt(exact.eps_std**2 / exact.count + fast.eps_std**2 / fast.count)
    z = np.abs(exact.eps_mean - fast.eps_mean) / se
    std_ratio = fast.eps_std / exact.eps_std
    ok = np.all(z < 3) and np.all(np.abs(std_ratio - 1) < 0.3)
    assert criterion(5, "fast algorithm vs exact ensemble", ok,
                     f"max |mean difference| / combined SE = {z.max():.2f} (< 3), "
                     f"std ratio in [{std_ratio.min():.3f}, {std_ratio.max():.3f}] (within 30%), 240 runs per mode")


def _component_case(name: str) -> dict:
    eps0, n, N = 0.05, 4, 16
    S = round(N / eps0**2)
    dt = eps0 / n
    if name == "S":
        S = round(N / (10 * eps0) ** 2)
    m0 = eps0 / (S * n**1.5)
    if name == "t":
        dt *= 10
    if name == "m":
        m0 *= 10
    # statistical channel two orders of magnitude below the single-knob value
    return dict(S=S, delta_t=dt, m0=m0, delta_m=1e-4 * m0**2 * eps0 / n)


@pytest.mark.slow
def test_error_component_isolation(criterion):
    details, ok = [], True
    for name in ("S", "t", "m"):
        cfg = RunConfig(n=4, epsilon0=0.05, mode="fast", epsilon_j=0.2, t_min=1e-7, t_max=2.0, n_times=16,
                        realizations=2, seed=31, **_component_case(name))
        s = run_experiment(cfg).series
        pred = s.prediction
        target = {"S": pred.eps_S, "t": pred.eps_t, "m": pred.eps_m}[name]
        others = [pred.eps_S, pred.eps_t, pred.eps_m]
        dominant = all(np.all(target >= o) for o in others)
        ratio = s.eps_mean / pred.total
        early = s.t < 3e-6
        late = (s.t > 1e-3) & (s.t < 0.3)
        slope_early = loglog_slope(s.t[early], s.eps_mean[early])
        slope_late = loglog_slope(s.t[late], s.eps_mean[late])
        case_ok = (dominant and np.all((ratio > 0.5) & (ratio < 2))
                   and 0.25 < slope_early < 0.75 and 0.75 < slope_late < 1.25)
        ok &= bool(case_ok)
        details.append(f"eps_{name}: ratio [{ratio.min():.2f}, {ratio.max():.2f}], slopes {slope_early:.2f} -> {slope_late:.2f}")
    assert criterion(6, "error component isolation", ok, "; ".join(details))


@pytest.mark.slow
def test_jump_error_model(criterion):
    cfg = RunConfig(n=4, epsilon0=0.01, mode="fast", epsilon_j=10.0, t_min=0.01, t_max=10.0, n_times=13,
                    realizations=3, seed=41)
    res = run_experiment(cfg)
    pred = res.series.prediction
    dominated = pred.eps_jump > pred.total
    ratios = np.array([r.eps[dominated] / pred.tilde[dominated] for r in res.realizations])
    ok = dominated.sum() >= 3 and np.all((ratios > 0.5) & (ratios < 2))
    t_dom = res.series.t[dominated]
    assert criterion(7, "jump-error model", ok,
                     f"{dominated.sum()} jump-dominated times in [{t_dom.min():.3g}, {t_dom.max():.3g}], "
                     f"eps/eps_tilde in [{ratios.min():.3f}, {ratios.max():.3f}] (3 seeds)")


def test_mixing_statistics(criterion):
    n, S, N = 4, 4096, 16
    spec = builtin_spec("yx-y", n)
    means, stds, rank_ok = [], [], True
    for seed in range(10):
        w = accumulate_W(init_state(ModelParams(n, S, 0.1, 0.0, 0.0, seed=seed), spec))
        ev = perp_eigenvalues(w)
        means.append(ev.mean())
        stds.append(ev.std())
        rank_ok &= np.linalg.matrix_rank(w) <= min(2 * S * n, N)
    mean_ratio = np.mean(means) / (3 * S * n / (2 * (N - 1)))
    std_ratio = np.mean(stds) / (4 * math.sqrt(S * n / (2 * N)))
    ok = abs(mean_ratio - 1) < 0.2 and abs(std_ratio - 1) < 0.3 and rank_ok
    assert criterion(8, "mixing statistics", ok,
                     f"mean ratio {mean_ratio:.4f} (within 20%), std ratio {std_ratio:.3f} (within 30%), rank bound {rank_ok}")


def test_exact_one_design(criterion):
    perms = np.array(list(itertools.permutations(range(4))))
    err = np.abs(design_moment(perms) - design_target(4)).max()
    assert criterion(9, "exact 1-design at N=4", err < 1e-12, f"max abs deviation {err:.2e} over 24 permutations")


def test_mapping_round_trip(criterion):
    rng = np.random.default_rng(10)
    worst_evo, worst_pair, zero_sum_ok = 0.0, 0.0, True
    for _ in range(20):
        a = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
        h = (a + a.conj().T) / 2
        psi = rng.standard_normal(4) + 1j * rng.standard_normal(4)
        psi /= np.linalg.norm(psi)
        g = map_hamiltonian(h)
        zero_sum_ok &= validate_local_term(g, atol=0.0).passed
        mapped = evolve_exact(g, map_state(psi), 1.0)
        worst_evo = max(worst_evo, np.abs(mapped - map_state(expm(-1j * h) @ psi)).max())
        e = np.sort(np.linalg.eigvalsh(1j * g))
        worst_pair = max(worst_pair, np.abs(e + e[::-1]).max())
    ok = worst_evo < 1e-9 and zero_sum_ok and worst_pair < 1e-10
    assert criterion(10, "complex-to-real zero-sum mapping", ok,
                     f"evolution mismatch {worst_evo:.2e}, exact zero-sum validation {zero_sum_ok}, pairing error {worst_pair:.2e}")


def test_long_run_mode_is_gated(criterion):
    cfg = RunConfig(n=6, epsilon0=0.05, mode="fast", epsilon_j=0.1, t_min=0.1, t_max=100.0, max_work=1e11)
    params = cfg.params()
    est = cpu_estimate(params, cfg.t_max, cfg.epsilon_j, cfg.epsilon0)
    try:
        run_experiment(cfg)
        gated = False
    except BudgetExceeded:
        gated = True
    assert criterion(11, "large-system runs are opt-in", gated,
                     f"n=6 eps0=0.05 (S={params.S}) to t=100 needs {est['steps']:.3g} raw steps, "
                     f"{est['fast_jumps']:.3g} jumps, work {est['fast_work']:.3g}; rejected under a 1e11 budget")
