"""Experiment orchestration: parameterization, deviation predictor, runner and CSV output."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .circuit import ModelParams, emergent_wavefunction, init_state, make_rng, run_steps
from .fastsim import FastContext, JumpLog, run_jumps
from .hamiltonian import HamiltonianSpec, InadmissibleTimeStep, boundary_kernels, builtin_spec
from .reference import deviation, evolve_exact_series

log = logging.getLogger(__name__)

# S values printed in the figure caption for the long runs, keyed by (n, eps0)
CAPTION_S = {(4, 0.02): 800, (6, 0.05): 1280}

COMPONENTS = ("m", "t", "S", "stat", "delay", "jump")


class BudgetExceeded(RuntimeError):
    """A run would exceed the configured work budget."""


def derive_params(n: int, epsilon0: float, spec: HamiltonianSpec | None = None, seed: int = 0, **overrides) -> ModelParams:
    """Single-knob parameterization; any of ``S, delta_t, m0, delta_m`` may be overridden.

    Unset quantities are derived from those already fixed, so an overridden ``S``
    feeds into ``m0`` and ``delta_m``.
    """
    if not 0 < epsilon0 <= 1:
        raise ValueError(f"epsilon0 must be in (0, 1], got {epsilon0}")
    if n < 2 or n % 2:
        raise ValueError(f"n must be even and >= 2, got {n}")
    N = 1 << n
    S = overrides.get("S")
    S = max(1, round(N / epsilon0**2)) if S is None else int(S)
    caption = CAPTION_S.get((n, round(epsilon0, 6)))
    if caption is not None and caption != S:
        log.warning("S=%d from the parameterization differs from the caption value S=%d", S, caption)
    delta_t = overrides.get("delta_t")
    delta_t = epsilon0 / n if delta_t is None else float(delta_t)
    m0 = overrides.get("m0")
    m0 = epsilon0 / (S * n**1.5) if m0 is None else float(m0)
    delta_m = overrides.get("delta_m")
    delta_m = m0**2 * epsilon0 / n if delta_m is None else float(delta_m)
    if spec is not None:
        for _ in range(60):
            try:
                boundary_kernels(spec, delta_t)
                break
            except InadmissibleTimeStep:
                log.warning("delta_t=%g inadmissible for the boundary kernels; halving", delta_t)
                delta_t *= 0.5
    return ModelParams(n=n, S=S, delta_t=delta_t, m0=m0, delta_m=delta_m, seed=seed)


@dataclass
class Prediction:
    t: np.ndarray
    eps_m: np.ndarray
    eps_t: np.ndarray
    eps_S: np.ndarray
    eps_stat: np.ndarray
    eps_delay: np.ndarray
    eps_jump: np.ndarray
    total: np.ndarray
    tilde: np.ndarray
    v_fast: float


def predict_errors(params: ModelParams, t, jump_sq_sum=None, delta_jump=None, calibration: dict | None = None) -> Prediction:
    """Analytic deviation components at times ``t``.

    The jump term is ``n Delta_t^2 sum_k delta_jump_k^2`` (the integral of
    ``n Delta_t delta_jump(t')`` over the elapsed time); pass the running sum of
    squared jump sizes, or a constant ``delta_jump``.
    """
    cal = {k: 1.0 for k in COMPONENTS}
    cal.update(calibration or {})
    t = np.atleast_1d(np.asarray(t, dtype=float))
    n, S, N = params.n, params.S, params.N
    dt_eff = params.Delta_t
    eps_m = cal["m"] * min(S * n * params.m0, 1.0) * math.sqrt(n) * t
    eps_t = cal["t"] * n * params.delta_t * t
    eps_S = cal["S"] * math.sqrt(N / S) * t
    if params.m0 > 0:
        eps_stat = cal["stat"] * np.sqrt(params.delta_m * n * t) / params.m0
    else:
        eps_stat = np.full_like(t, np.inf if params.delta_m > 0 else 0.0)
    eps_delay = cal["delay"] * params.delta_m * n**2 * S**2 / N * params.delta_t * t
    if jump_sq_sum is not None:
        eps_jump = cal["jump"] * n * dt_eff**2 * np.broadcast_to(np.asarray(jump_sq_sum, dtype=float), t.shape)
    elif delta_jump is not None:
        eps_jump = cal["jump"] * n * dt_eff * float(delta_jump) * t
    else:
        eps_jump = np.zeros_like(t)
    total = np.minimum(np.sqrt(eps_m**2 + eps_t**2 + eps_S**2 + eps_stat**2), math.sqrt(2))
    tilde = np.minimum(np.sqrt(total**2 + eps_jump**2), math.sqrt(2))
    v_fast = 1.0 / dt_eff if dt_eff > 0 else math.inf
    return Prediction(t, eps_m, eps_t, eps_S, eps_stat, eps_delay, eps_jump, total, tilde, v_fast)


def err_curve(epsilon0: float, t) -> np.ndarray:
    """``sqrt(eps0 t + 3 (eps0 t)^2)``, the single-knob deviation estimate."""
    x = epsilon0 * np.asarray(t, dtype=float)
    return np.sqrt(x + 3 * x**2)


def cpu_estimate(params: ModelParams, t: float, epsilon_j: float = 0.02, epsilon0: float | None = None) -> dict:
    """Step and work counts to reach emergent time ``t``."""
    from .fastsim import max_jump

    n, S, N = params.n, params.S, params.N
    if t <= 0:
        steps = 0.0
    elif params.Delta_t > 0:
        steps = t / params.Delta_t
    else:
        steps = math.inf  # frozen slow variables never reach t
    dj = max_jump(params, epsilon_j, epsilon0)
    jumps = math.ceil(steps / dj) if 0 < steps < math.inf else (0 if steps == 0 else math.inf)
    return {
        "steps": steps,
        "exact_site_updates": S * n * steps,
        "fast_jumps": jumps,
        "fast_work": jumps * (S * n * N + S * N * N),
    }


# --- runner ---------------------------------------------------------------------------------


@dataclass
class RunConfig:
    n: int = 4
    epsilon0: float = 0.5
    S: int | None = None
    delta_t: float | None = None
    m0: float | None = None
    delta_m: float | None = None
    epsilon_j: float = 0.02
    mode: str = "exact"
    realizations: int = 1
    t_min: float = 0.01
    t_max: float = 1.0
    n_times: int = 10
    output_times: list[float] | None = None
    seed: int = 0
    spec: str = "yx-y"
    component: str | None = None  # bit string of length n; default 0110 repeated
    joint: bool = True
    max_work: float = math.inf
    workers: int = 1
    calibration: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("exact", "fast"):
            raise ValueError(f"mode must be 'exact' or 'fast', got {self.mode!r}")
        if self.realizations < 1:
            raise ValueError("realizations must be >= 1")
        if self.component is None:
            self.component = ("0110" * self.n)[: self.n]
        if len(self.component) != self.n or set(self.component) - {"0", "1"}:
            raise ValueError(f"component must be a bit string of length n={self.n}")
        times = self.times()
        if np.any(np.diff(times) <= 0) or times[0] < 0:
            raise ValueError("output times must be nonnegative and strictly increasing")

    def times(self) -> np.ndarray:
        if self.output_times is not None:
            return np.asarray(self.output_times, dtype=float)
        return np.geomspace(self.t_min, self.t_max, self.n_times)

    def load_spec(self) -> HamiltonianSpec:
        if Path(self.spec).is_file():
            return HamiltonianSpec.load(self.spec)
        return builtin_spec(self.spec, self.n)

    def params(self) -> ModelParams:
        over = {k: getattr(self, k) for k in ("S", "delta_t", "m0", "delta_m") if getattr(self, k) is not None}
        return derive_params(self.n, self.epsilon0, self.load_spec(), seed=self.seed, **over)

    @classmethod
    def from_text(cls, text: str, **overrides) -> RunConfig:
        """Parse ``key = value`` lines (``#`` comments); ``overrides`` win."""
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            kw[key] = value
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**{k: _coerce(k, v) for k, v in kw.items()})


def _coerce(key: str, value):
    if not isinstance(value, str):
        return value
    if key in ("n", "realizations", "n_times", "seed", "workers"):
        return int(value)
    if key == "S":
        return int(float(value))
    if key in ("epsilon0", "delta_t", "m0", "delta_m", "epsilon_j", "t_min", "t_max", "max_work"):
        return float(value)
    if key == "joint":
        return value.lower() in ("1", "true", "yes", "on")
    if key == "output_times":
        return [float(v) for v in value.replace(",", " ").split()]
    if key == "calibration":
        out = {}
        for item in value.replace(",", " ").split():
            k, v = item.split(":")
            out[k] = float(v)
        return out
    return value


@dataclass
class RealizationResult:
    index: int
    tau: np.ndarray
    eps: np.ndarray
    psi: np.ndarray  # chosen component of the emergent wavefunction
    psi_qm: np.ndarray
    jump_sq: np.ndarray  # running sum of squared jump sizes at each output time
    error: str | None = None


@dataclass
class DeviationSeries:
    t: np.ndarray
    tau: np.ndarray
    warmup: np.ndarray
    eps_mean: np.ndarray
    eps_std: np.ndarray
    count: np.ndarray
    prediction: Prediction

    HEADER = ("t", "tau", "warmup", "eps_mean", "eps_std", "count", "eps_m", "eps_t", "eps_S",
              "eps_stat", "eps_delay", "eps_jump", "eps_predicted", "eps_tilde")

    def rows(self):
        p = self.prediction
        for k in range(self.t.size):
            yield (self.t[k], int(self.tau[k]), int(self.warmup[k]), self.eps_mean[k], self.eps_std[k],
                   int(self.count[k]), p.eps_m[k], p.eps_t[k], p.eps_S[k], p.eps_stat[k], p.eps_delay[k],
                   p.eps_jump[k], p.total[k], p.tilde[k])


@dataclass
class ExperimentResult:
    config: RunConfig
    params: ModelParams
    times: np.ndarray
    series: DeviationSeries
    realizations: list[RealizationResult]


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.9g}"


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([_fmt(v) for v in row])


def output_steps(times: np.ndarray, delta_t_eff: float) -> np.ndarray:
    """Raw step counts at the output times, forced strictly increasing."""
    taus = np.rint(times / delta_t_eff).astype(np.int64) if delta_t_eff > 0 else np.zeros(times.size, np.int64)
    for k in range(1, taus.size):
        taus[k] = max(taus[k], taus[k - 1] + 1)
    return taus


def run_realization(config: RunConfig, index: int) -> RealizationResult:
    """One trajectory with its own Philox stream derived from ``(seed, index)``."""
    spec = config.load_spec()
    params = config.params()
    times = config.times()
    taus = output_steps(times, params.Delta_t)
    rng = make_rng(np.random.SeedSequence([config.seed, index]))
    k_comp = int(config.component, 2)
    nt = times.size
    res = RealizationResult(index, taus, np.full(nt, np.nan), np.full(nt, np.nan), np.full(nt, np.nan), np.zeros(nt))
    try:
        state = init_state(params, spec, rng)
        psi0 = emergent_wavefunction(state).v
        # the reference trajectory uses the realized step count, t = tau * Delta_t
        ref = evolve_exact_series(spec, psi0, taus * params.Delta_t)
        ctx = FastContext(state, joint=config.joint) if config.mode == "fast" else None
        jlog = JumpLog() if ctx is not None else None
        for k, tau in enumerate(taus):
            nsteps = int(tau - state.tau)
            if ctx is None:
                run_steps(state, nsteps)
            else:
                run_jumps(state, nsteps, config.epsilon_j, config.epsilon0, ctx, jlog)
                res.jump_sq[k] = jlog.jump_sq_sum()
            psi = emergent_wavefunction(state).v
            res.eps[k] = deviation(psi, ref[k])
            res.psi[k] = psi[k_comp]
            res.psi_qm[k] = ref[k][k_comp]
    except Exception as exc:  # keep what was measured so far
        log.error("realization %d aborted: %s", index, exc)
        res.error = f"{type(exc).__name__}: {exc}"
    return res


def aggregate(config: RunConfig, params: ModelParams, results: list[RealizationResult]) -> DeviationSeries:
    taus = results[0].tau
    t = taus * params.Delta_t
    eps = np.array([r.eps for r in sorted(results, key=lambda r: r.index)])
    count = np.sum(~np.isnan(eps), axis=0)
    safe = np.where(np.isnan(eps), 0.0, eps)
    n_ok = np.maximum(count, 1)
    mean = np.where(count > 0, safe.sum(axis=0) / n_ok, np.nan)
    var = np.where(count > 0, (np.where(np.isnan(eps), 0.0, (eps - mean) ** 2)).sum(axis=0) / n_ok, np.nan)
    std = np.sqrt(var)
    jump_sq = results[0].jump_sq if config.mode == "fast" else None
    pred = predict_errors(params, t, jump_sq_sum=jump_sq, calibration=config.calibration)
    warm = taus < 2 * params.S
    return DeviationSeries(t, taus, warm, mean, std, count, pred)


def run_experiment(config: RunConfig, out: str | Path | None = None) -> ExperimentResult:
    params = config.params()
    times = config.times()
    est = cpu_estimate(params, float(times[-1]), config.epsilon_j, config.epsilon0)
    work = est["exact_site_updates"] if config.mode == "exact" else est["fast_work"]
    if work > config.max_work:
        raise BudgetExceeded(f"estimated work {work:.3g} exceeds budget {config.max_work:.3g}")
    indices = range(config.realizations)
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            results = list(pool.map(run_realization, [config] * config.realizations, indices))
    else:
        results = [run_realization(config, i) for i in indices]
    results.sort(key=lambda r: r.index)
    series = aggregate(config, params, results)
    result = ExperimentResult(config, params, times, series, results)
    if out is not None:
        write_outputs(result, out)
    return result


def write_outputs(result: ExperimentResult, out) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "deviation.csv", DeviationSeries.HEADER, result.series.rows())
    p = result.series.prediction
    _write_csv(
        out / "components.csv",
        ("t", "eps_m", "eps_t", "eps_S", "eps_stat", "eps_delay", "eps_jump", "eps_predicted", "eps_tilde"),
        zip(p.t, p.eps_m, p.eps_t, p.eps_S, p.eps_stat, p.eps_delay, p.eps_jump, p.total, p.tilde),
    )
    label = result.config.component
    for r in result.realizations:
        sub = out / f"realization_{r.index:04d}"
        sub.mkdir(exist_ok=True)
        t = r.tau * result.params.Delta_t
        _write_csv(sub / "deviation.csv", ("t", "tau", "eps", f"psi_{label}", f"psi_qm_{label}"),
                   zip(t, r.tau, r.eps, r.psi, r.psi_qm))
        if r.error:
            (sub / "error.txt").write_text(r.error + "\n")


def with_overrides(config: RunConfig, **kw) -> RunConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
