"""Exact bit-level simulator of the stochastic brickwork circuit.

The slow state is a brickwork of stochastic matrices ``M = Q + m`` (``Q`` a
permutation, ``m`` a small zero-column-sum perturbation).  Each time step
back-propagates the backward bit planes, samples fresh boundary feedback,
advances the forward planes synchronously and applies the rank-1 updates of
``m``.  The hot loop lives in :mod:`emqm._kernels`.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from .hamiltonian import HamiltonianSpec, boundary_kernels

PERMS4 = np.array(list(itertools.permutations(range(4))), dtype=np.int64)
N_PERMS = len(PERMS4)
FLAVORS = ("+1", "-1", "+2", "-2")


class CircuitError(RuntimeError):
    """An invariant of the circuit state could not be maintained."""


class ZeroPerturbation(ValueError):
    """The boundary distribution is exactly uniform, so no wavefunction is defined."""


def perm_matrix(k: int) -> np.ndarray:
    q = np.zeros((4, 4))
    q[PERMS4[k], np.arange(4)] = 1.0
    return q


PERM_MATRICES = np.stack([perm_matrix(k) for k in range(N_PERMS)])


def perm_index(q: np.ndarray) -> int:
    """Index into :data:`PERMS4` of a 4x4 permutation matrix."""
    matches = np.flatnonzero(np.all(PERM_MATRICES == np.asarray(q), axis=(1, 2)))
    if matches.size != 1:
        raise ValueError("not a 4x4 permutation matrix")
    return int(matches[0])


def brick_site(l: int, j: int, n: int) -> int:
    """0-based first site of brick ``j`` in layer ``l``."""
    return (2 * j + l % 2) % n


@dataclass(frozen=True)
class ModelParams:
    n: int
    S: int
    delta_t: float
    m0: float
    delta_m: float
    seed: int = 0

    def __post_init__(self):
        if self.n < 2 or self.n % 2:
            raise ValueError(f"n must be even and >= 2, got {self.n}")
        if self.S < 1:
            raise ValueError(f"S must be >= 1, got {self.S}")
        if not self.delta_t >= 0:
            raise ValueError(f"delta_t must be nonnegative, got {self.delta_t}")
        if self.n * self.delta_t > 1:
            raise ValueError(f"need n*delta_t <= 1, got {self.n * self.delta_t}")
        if self.m0 < 0 or self.delta_m < 0:
            raise ValueError("m0 and delta_m must be nonnegative")
        if self.m0 >= 1:
            raise ValueError(f"m0 must be well below 1, got {self.m0}")

    @property
    def N(self) -> int:
        return 1 << self.n

    @property
    def Delta_t(self) -> float:
        """Effective emergent time advanced per raw step."""
        N = self.N
        return (self.delta_m / 4) * (self.S * self.n / (2 * N)) * (3 / (1 - 1 / N)) * self.delta_t

    def replace(self, **kw) -> ModelParams:
        d = self.__dict__ | kw
        return ModelParams(**d)


@dataclass
class StateVector:
    v: np.ndarray
    kind: str

    def check(self, atol: float = 1e-10) -> None:
        v = self.v
        if self.kind == "probability":
            if v.min() < -atol or abs(v.sum() - 1) > atol:
                raise ValueError("not a probability vector")
        elif self.kind == "wavefunction":
            if abs(np.linalg.norm(v) - 1) > atol or abs(v.sum()) > atol:
                raise ValueError("not a normalized zero-sum wavefunction")
        else:
            raise ValueError(f"unknown kind {self.kind!r}")


@dataclass
class CircuitState:
    params: ModelParams
    spec: HamiltonianSpec
    perm_idx: np.ndarray  # (S, n/2) indices into PERMS4
    m: np.ndarray  # (S, n/2, 4, 4)
    a: np.ndarray  # (S+1,) forward planes as N-bit labels
    b: np.ndarray  # (4, S) backward planes, flavor order +1, -1, +2, -2
    rng: np.random.Generator
    tau: int = 0
    updates: np.ndarray = field(default_factory=lambda: np.zeros(1, dtype=np.int64))
    _maps: tuple | None = field(default=None, repr=False)
    _kern: tuple | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.params.n

    @property
    def S(self) -> int:
        return self.params.S

    @property
    def N(self) -> int:
        return self.params.N

    @property
    def q(self) -> np.ndarray:
        """Permutation matrices ``Q[l, j]``."""
        return PERM_MATRICES[self.perm_idx]

    @property
    def M(self) -> np.ndarray:
        return self.q + self.m

    def maps(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-layer forward label maps and inverses (cached; Q never changes)."""
        if self._maps is None:
            self._maps = K.layer_maps(self.n, self.perm_idx, PERMS4)
        return self._maps

    def kernels(self) -> tuple[np.ndarray, np.ndarray]:
        if self._kern is None:
            ks = boundary_kernels(self.spec, self.params.delta_t)
            self._kern = (
                np.ascontiguousarray([k.b_plus for k in ks]),
                np.ascontiguousarray([k.b_minus for k in ks]),
            )
        return self._kern

    def check_stochastic(self, atol: float = 1e-12) -> None:
        M = self.M
        if M.min() < -atol:
            raise CircuitError(f"negative entry {M.min():.3e} in some M")
        err = np.abs(M.sum(axis=-2) - 1).max()
        if err > atol:
            raise CircuitError(f"column sums of M deviate from 1 by {err:.3e}")

    def copy(self) -> CircuitState:
        rng = np.random.Generator(np.random.Philox())
        rng.bit_generator.state = self.rng.bit_generator.state
        return CircuitState(
            self.params, self.spec, self.perm_idx.copy(), self.m.copy(), self.a.copy(),
            self.b.copy(), rng, self.tau, self.updates.copy(), self._maps, self._kern,
        )


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.Philox(seed))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def init_perturbations(rng, perm_idx: np.ndarray, m0: float, max_retries: int = 100) -> np.ndarray:
    """Gaussian perturbations with zero column sums and nonnegative ``Q + m``.

    Off-permutation entries get ``m0 * |g|`` so they can never go negative; the
    permutation entry of each column absorbs minus the column sum.
    """
    shape = perm_idx.shape + (4, 4)
    q = PERM_MATRICES[perm_idx]
    off = q == 0
    m = np.zeros(shape)
    todo = np.ones(perm_idx.shape, dtype=bool)
    for _ in range(max_retries):
        count = int(todo.sum())
        if count == 0:
            return m
        draw = m0 * np.abs(rng.standard_normal((count, 4, 4)))
        draw *= off[todo]
        draw -= q[todo] * draw.sum(axis=-2, keepdims=True)
        m[todo] = draw
        bad = (q[todo] + draw).min(axis=(-2, -1)) < 0
        idx = np.flatnonzero(todo.ravel())
        todo = np.zeros(perm_idx.shape, dtype=bool)
        todo.ravel()[idx[bad]] = True
    raise CircuitError(f"could not draw a stochastic perturbation with m0={m0}")


def init_state(params: ModelParams, spec: HamiltonianSpec, rng=None) -> CircuitState:
    if spec.n != params.n:
        raise ValueError(f"spec has n={spec.n} but params have n={params.n}")
    rng = make_rng(params.seed) if rng is None else rng
    S, n, N = params.S, params.n, params.N
    perm_idx = rng.integers(0, N_PERMS, size=(S, n // 2)).astype(np.int64)
    m = init_perturbations(rng, perm_idx, params.m0)
    a = rng.integers(0, N, size=S + 1).astype(np.int64)
    # matched +/- planes so that the unfilled pipeline issues no spurious updates
    b = np.empty((4, S), dtype=np.int64)
    b[0] = b[1] = rng.integers(0, N, size=S)
    b[2] = b[3] = rng.integers(0, N, size=S)
    state = CircuitState(params, spec, perm_idx, m, a, b, rng)
    state.kernels()  # validates delta_t admissibility up front
    return state


def forward_sample(state: CircuitState) -> None:
    K.forward_phase(state.n, state.perm_idx, PERMS4, state.m, state.a, state.rng)


def sample_boundary_feedback(state: CircuitState) -> None:
    kp, km = state.kernels()
    K.boundary_phase(state.n, state.a[state.S], state.b, kp, km, state.rng)


def backpropagate_bits(state: CircuitState) -> None:
    K.backprop_phase(state.b, state.maps()[1])


def apply_feedback_update(state: CircuitState) -> None:
    status = K.update_phase(
        state.n, state.perm_idx, PERMS4, state.m, state.b, float(state.params.delta_m),
        state.rng, state.updates,
    )
    if status != K.OK:
        raise CircuitError(f"no feasible basis vector for an m update at tau={state.tau}")


def step(state: CircuitState) -> CircuitState:
    """One synchronous time step: back-propagate, sample feedback, sample forward, update."""
    return run_steps(state, 1)


def run_steps(state: CircuitState, nsteps: int) -> CircuitState:
    if nsteps <= 0:
        return state
    kp, km = state.kernels()
    status = K.run_steps(
        int(nsteps), state.n, state.perm_idx, PERMS4, state.m, state.a, state.b,
        state.maps()[1], kp, km, float(state.params.delta_m), state.rng, state.updates,
    )
    if status != K.OK:
        raise CircuitError(f"no feasible basis vector for an m update near tau={state.tau}")
    state.tau += int(nsteps)
    return state


def boundary_deviation(state: CircuitState) -> np.ndarray:
    """``P_S - 1/N`` propagated without forming ``1/N + d`` (keeps tiny deviations exact)."""
    return K.propagate_deviation(state.n, state.perm_idx, PERMS4, state.m)


def boundary_distribution(state: CircuitState) -> StateVector:
    return StateVector(1.0 / state.N + boundary_deviation(state), "probability")


def emergent_wavefunction(source) -> StateVector:
    """``(P - 1/N) / ||P - 1/N||`` from a CircuitState or a probability vector."""
    if isinstance(source, CircuitState):
        d = boundary_deviation(source)
    else:
        p = np.asarray(source.v if isinstance(source, StateVector) else source, dtype=float)
        d = p - 1.0 / p.size
    norm = np.linalg.norm(d)
    if norm == 0:
        raise ZeroPerturbation("P is uniform; the emergent wavefunction is undefined")
    return StateVector(d / norm, "wavefunction")


def layer_matrix(state: CircuitState, l: int, perturbed: bool = True) -> np.ndarray:
    """Dense N x N matrix of layer ``l`` (``M`` if perturbed, else ``Q``)."""
    from .hamiltonian import embed_pair

    out = np.eye(state.N)
    mats = state.M[l] if perturbed else state.q[l]
    for j in range(state.n // 2):
        out = embed_pair(mats[j], brick_site(l, j, state.n), state.n) @ out
    return out


# --- checkpoints ---------------------------------------------------------------------------


def _rng_state_json(rng: np.random.Generator) -> str:
    def conv(o):
        if isinstance(o, np.ndarray):
            return {"__nd__": o.tolist(), "dtype": str(o.dtype)}
        if isinstance(o, np.integer):
            return int(o)
        raise TypeError(type(o))

    return json.dumps(rng.bit_generator.state, default=conv)


def _rng_from_json(text: str) -> np.random.Generator:
    def hook(d):
        if "__nd__" in d:
            return np.array(d["__nd__"], dtype=d["dtype"])
        return d

    st = json.loads(text, object_hook=hook)
    bitgen = getattr(np.random, st["bit_generator"])()
    bitgen.state = st
    return np.random.Generator(bitgen)


def save_checkpoint(state: CircuitState, path) -> None:
    p = state.params
    np.savez(
        Path(path),
        params=np.array([p.n, p.S, p.seed], dtype=np.int64),
        params_f=np.array([p.delta_t, p.m0, p.delta_m]),
        spec=np.array(state.spec.to_text()),
        perm_idx=state.perm_idx,
        m=state.m,
        a=state.a,
        b=state.b,
        tau=np.array(state.tau),
        updates=state.updates,
        rng=np.array(_rng_state_json(state.rng)),
    )


def load_checkpoint(path) -> CircuitState:
    with np.load(Path(path), allow_pickle=False) as z:
        n, S, seed = (int(v) for v in z["params"])
        dt, m0, dm = (float(v) for v in z["params_f"])
        params = ModelParams(n, S, dt, m0, dm, seed)
        spec = HamiltonianSpec.from_text(str(z["spec"]))
        return CircuitState(
            params, spec, z["perm_idx"].copy(), z["m"].copy(), z["a"].copy(), z["b"].copy(),
            _rng_from_json(str(z["rng"])), int(z["tau"]), z["updates"].copy(),
        )
