"""Approximate simulator that advances the slow variables many steps at once.

The stochastic matrices are frozen for ``delta_jump`` raw steps.  The boundary
pair statistics over that window are drawn as one multinomial count matrix per
boundary flavor pair, pulled back through the permutation layers, localized to
each brick and applied as a single batched update of ``m``.  A per-brick repair
of the conditional ``p(e|b-)`` keeps every ``M`` nonnegative.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .circuit import CircuitState, boundary_deviation
from .hamiltonian import boundary_layer_matrix, pair_index

REPAIR_MAX_ITER = 12
_NEG_TOL = 0.0


class RepairInfeasible(RuntimeError):
    """The conditional-probability repair has no solution; use a smaller jump."""


@dataclass
class BetaCounts:
    gamma: int
    counts: np.ndarray  # (N, N) int64, rows b+, columns b-

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class RepairTable:
    site: tuple[int, int] | None
    gamma: int | None
    p: np.ndarray  # p[e, b-]: each column is a distribution over e
    free_mask: np.ndarray  # same layout as p
    iterations: int
    m_new: np.ndarray


def boundary_layer_pair(spec, delta_t: float, gamma: int) -> tuple[np.ndarray, np.ndarray]:
    """Dense ``B^(+gamma)`` and ``B^(-gamma)`` for boundary flavor pair ``gamma``."""
    parity = {1: "odd", 2: "even"}[gamma]
    return (
        boundary_layer_matrix(spec, delta_t, parity, "+"),
        boundary_layer_matrix(spec, delta_t, parity, "-"),
    )


def pair_probabilities(p_S, b_plus: np.ndarray, b_minus: np.ndarray, joint: bool = True) -> np.ndarray:
    """Probability matrix of ``(b+, b-)`` given the boundary distribution.

    ``joint=True`` conditions both flavors on the same boundary string,
    ``B+ diag(P) B-^T``; ``joint=False`` uses the product of the marginals.
    """
    p = np.clip(np.asarray(getattr(p_S, "v", p_S), dtype=float), 0.0, None)
    if joint:
        prob = (b_plus * p[None, :]) @ b_minus.T
    else:
        prob = np.outer(b_plus @ p, b_minus @ p)
    prob = np.clip(prob, 0.0, None)
    return prob / prob.sum()


def boundary_pair_counts(p_S, kernels, delta_jump: int, gamma: int, rng, joint: bool = True) -> BetaCounts:
    """Multinomial counts of boundary pairs over ``delta_jump`` frozen steps.

    ``kernels`` is the ``(B+, B-)`` pair of dense N x N boundary layers for ``gamma``.
    """
    if delta_jump < 1:
        raise ValueError("delta_jump must be >= 1")
    prob = pair_probabilities(p_S, kernels[0], kernels[1], joint)
    counts = rng.multinomial(int(delta_jump), prob.ravel()).reshape(prob.shape)
    return BetaCounts(gamma, counts.astype(np.int64))


def conjugate_backpropagate(beta: BetaCounts, layer_map: np.ndarray) -> BetaCounts:
    """Pull counts back through one permutation layer.

    ``layer_map[i]`` is the output label of input ``i``; the result satisfies
    ``out[i, j] = beta[layer_map[i], layer_map[j]]``.
    """
    f = np.asarray(layer_map)
    return BetaCounts(beta.gamma, beta.counts[np.ix_(f, f)])


def localize_counts(beta, x: int, n: int) -> np.ndarray:
    """4x4 marginal over the bits of bond ``x`` (1-based) of both indices."""
    counts = getattr(beta, "counts", beta)
    N = 1 << n
    pr = pair_index(np.arange(N), x - 1, n)
    out = np.zeros((4, 4), dtype=counts.dtype)
    np.add.at(out, (pr[:, None], pr[None, :]), counts)
    return out


def _transfer(beta_local: np.ndarray) -> np.ndarray:
    """``K = beta - diag(column sums)``: net +/- row effect per subtracting row ``b-``."""
    beta_local = np.asarray(beta_local, dtype=float)
    return beta_local - np.diag(beta_local.sum(axis=0))


def _assemble(free: np.ndarray, z: np.ndarray) -> np.ndarray:
    """``Pm[b-, e]`` from free unknowns ``z``; fixed entries share the leftover mass uniformly."""
    pm = np.zeros((4, 4))
    pm[free] = z
    for r in range(4):
        nf = 4 - free[r].sum()
        pm[r, ~free[r]] = (1.0 - pm[r, free[r]].sum()) / nf
    return pm


def repair_conditional(m, q, beta_local, delta_m: float, site=None, gamma=None) -> RepairTable:
    """Choose ``p(e|b-)`` so that ``Q + m + delta_m K Pm`` is nonnegative.

    ``beta_local`` is the 4x4 count matrix (or a sequence of them, one per
    flavor pair, which are summed since ``p`` is shared).  Entries driven
    negative are made free and solved to land exactly on zero; other entries of
    the same row share the leftover probability uniformly.
    """
    m = np.asarray(m, dtype=float)
    q = np.asarray(q, dtype=float)
    beta_local = np.asarray(beta_local, dtype=float)
    if beta_local.ndim == 3:
        beta_local = beta_local.sum(axis=0)
    kmat = delta_m * _transfer(beta_local)
    base = q + m
    free = np.zeros((4, 4), dtype=bool)  # [b-, e]
    pm = np.full((4, 4), 0.25)
    iterations = 0
    while True:
        cand = base + kmat @ pm
        newly = (cand < _NEG_TOL) & ~free
        if not newly.any():
            break
        if iterations == REPAIR_MAX_ITER:
            raise RepairInfeasible("repair did not converge within 12 iterations")
        iterations += 1
        # most negative entry first when a row would run out of fixed entries
        order = np.argsort(cand[newly])
        rows, cols = np.nonzero(newly)
        for k in order:
            r, c = rows[k], cols[k]
            if free[r].sum() == 3:
                raise RepairInfeasible(f"row {r} would have every conditional entry free")
            free[r, c] = True
        nfree = int(free.sum())
        c0 = base + kmat @ _assemble(free, np.zeros(nfree))
        a = np.empty((nfree, nfree))
        for k in range(nfree):
            unit = np.zeros(nfree)
            unit[k] = 1.0
            a[:, k] = (base + kmat @ _assemble(free, unit) - c0)[free]
        try:
            z = np.linalg.solve(a, -c0[free])
        except np.linalg.LinAlgError as exc:
            raise RepairInfeasible("singular repair system") from exc
        pm = _assemble(free, z)
        if pm.min() < -1e-12:
            raise RepairInfeasible("repaired conditional leaves the probability simplex")
        pm = np.clip(pm, 0.0, None)
        pm /= pm.sum(axis=1, keepdims=True)
    m_new = m + kmat @ pm
    if free.any():
        # snap solved entries to exactly zero; the permutation entry absorbs the residual
        perm_row = q.argmax(axis=0)
        for r, c in zip(*np.nonzero(free)):
            resid = q[r, c] + m_new[r, c]
            m_new[r, c] -= resid
            m_new[perm_row[c], c] += resid
    return RepairTable(site, gamma, pm.T.copy(), free.T.copy(), iterations, m_new)


def max_jump(params, epsilon_j: float, epsilon0: float | None = None, remaining: int | None = None) -> int:
    """``floor(eps0 eps_j / (Delta_t n))``, at least 1 and at most ``remaining``.

    ``epsilon0`` defaults to ``n * delta_t``, its value under the single-knob parameterization.
    """
    eps0 = params.n * params.delta_t if epsilon0 is None else epsilon0
    dt = params.Delta_t
    if epsilon_j <= 0 or dt <= 0:
        val = 1
    else:
        val = max(1, math.floor(eps0 * epsilon_j / (dt * params.n)))
    if remaining is not None:
        val = max(1, min(val, int(remaining)))
    return val


@dataclass
class JumpRecord:
    tau: int
    delta_jump: int
    repaired_bricks: int
    repair_iterations: int


@dataclass
class JumpLog:
    records: list[JumpRecord] = field(default_factory=list)

    def jump_sq_sum(self) -> float:
        return float(sum(float(r.delta_jump) ** 2 for r in self.records))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["tau", "delta_jump", "repaired_bricks", "repair_iterations"])
            for r in self.records:
                wr.writerow([r.tau, r.delta_jump, r.repaired_bricks, r.repair_iterations])


class FastContext:
    """Per-state caches for the jump: dense boundary layers of both flavor pairs."""

    def __init__(self, state: CircuitState, joint: bool = True):
        self.layers = {g: boundary_layer_pair(state.spec, state.params.delta_t, g) for g in (1, 2)}
        self.joint = joint


def jump(state: CircuitState, delta_jump: int, ctx: FastContext | None = None, log: JumpLog | None = None) -> CircuitState:
    """Advance ``state`` by ``delta_jump`` raw steps with frozen stochastic matrices."""
    if delta_jump < 1:
        raise ValueError("delta_jump must be >= 1")
    ctx = FastContext(state) if ctx is None else ctx
    n, N = state.n, state.N
    p_S = 1.0 / N + boundary_deviation(state)
    total = np.zeros((N, N), dtype=np.int64)
    for g in (1, 2):
        total += boundary_pair_counts(p_S, ctx.layers[g], delta_jump, g, state.rng, ctx.joint).counts
    fwd, _ = state.maps()
    loc = K.localize_all(total, fwd, n)  # (S, n/2, 4, 4) rows b+, columns b-
    idx = np.arange(4)
    kmat = loc.copy()
    kmat[..., idx, idx] -= loc.sum(axis=-2)
    dm = state.params.delta_m
    # uniform p: every column of the update equals delta_m/4 times the row sums of K
    delta = np.repeat((0.25 * dm) * kmat.sum(axis=-1, keepdims=True), 4, axis=-1)
    q = state.q
    cand = q + state.m + delta
    bad = cand.min(axis=(-2, -1)) < 0
    state.m[~bad] += delta[~bad]
    iters = 0
    for l, j in zip(*np.nonzero(bad)):
        table = repair_conditional(state.m[l, j], q[l, j], loc[l, j], dm, site=(int(l), int(j)))
        state.m[l, j] = table.m_new
        iters += table.iterations
    state.tau += int(delta_jump)
    if log is not None:
        log.records.append(JumpRecord(state.tau, int(delta_jump), int(bad.sum()), iters))
    return state


def run_jumps(state: CircuitState, nsteps: int, epsilon_j: float, epsilon0: float | None = None,
              ctx: FastContext | None = None, log: JumpLog | None = None) -> CircuitState:
    """Advance by exactly ``nsteps`` raw steps using the largest admissible jumps."""
    ctx = FastContext(state) if ctx is None else ctx
    remaining = int(nsteps)
    while remaining > 0:
        dj = max_jump(state.params, epsilon_j, epsilon0, remaining)
        jump(state, dj, ctx, log)
        remaining -= dj
    return state
