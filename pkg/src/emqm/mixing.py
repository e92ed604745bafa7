"""The mixing operator W and its nonlinear cousin W~: construction and statistics."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np
from scipy.linalg import null_space

from . import _kernels as K
from .circuit import PERMS4, N_PERMS, CircuitState, brick_site, layer_matrix

_AVG = np.full((2, 2), 0.5)


def projector_Px(x: int, n: int) -> np.ndarray:
    """Identity on sites ``x, x+1`` (1-based, periodic) and bit averaging elsewhere."""
    if not 1 <= x <= n:
        raise ValueError(f"site must be in 1..{n}, got {x}")
    keep = {x - 1, x % n}
    out = np.ones((1, 1))
    for site in range(n):
        out = np.kron(out, np.eye(2) if site in keep else _AVG)
    return out


def layer_projector_sums(n: int) -> np.ndarray:
    """``L[parity] = sum of P_x over the bricks of a layer with that parity``."""
    out = np.zeros((2, 1 << n, 1 << n))
    for off in range(2):
        for j in range(n // 2):
            out[off] += projector_Px(brick_site(off, j, n) + 1, n)
    return out


def perp_basis(N: int) -> np.ndarray:
    """Orthonormal basis (N x N-1) of the subspace orthogonal to the ones vector."""
    return null_space(np.ones((1, N)))


def W0(n: int, S: int) -> np.ndarray:
    N = 1 << n
    p1 = np.full((N, N), 1.0 / N)
    c = S * n / 2
    return c * p1 + c * 3 / (N - 1) * (np.eye(N) - p1)


def accumulate_W(state: CircuitState) -> np.ndarray:
    """``W = sum_s,x Q_{S<-s} P_x Q_{S<-s}^T`` using composed label maps."""
    n, N = state.n, state.N
    fwd, _ = state.maps()
    L = layer_projector_sums(n)
    w = np.zeros((N, N))
    pi = np.arange(N)
    for l in range(state.S - 1, -1, -1):
        w[np.ix_(pi, pi)] += L[l % 2]
        pi = pi[fwd[l]]
    return w


def accumulate_W_tilde(state: CircuitState) -> np.ndarray:
    """``W~ = sum_s,x M_{S<-s} P_x Q_{S<-s}^T`` with dense products of the M layers."""
    n, N = state.n, state.N
    fwd, _ = state.maps()
    L = layer_projector_sums(n)
    w = np.zeros((N, N))
    pi = np.arange(N)
    mprod = np.eye(N)
    for l in range(state.S - 1, -1, -1):
        w[:, pi] += mprod @ L[l % 2]
        mprod = mprod @ layer_matrix(state, l)
        pi = pi[fwd[l]]
    return w


def perp_eigenvalues(w: np.ndarray) -> np.ndarray:
    b = perp_basis(w.shape[0])
    return np.linalg.eigvalsh(b.T @ (0.5 * (w + w.T)) @ b)


@dataclass
class MixingReport:
    n: int
    S: int
    mean_perp_eig: float
    std_perp_eig: float
    predicted_mean: float
    predicted_std: float
    one_design_residual: float
    w0_distance: float
    rank: int

    def rows(self) -> list[tuple[str, float, float, float]]:
        out = [
            ("mean_perp_eig", self.mean_perp_eig, self.predicted_mean),
            ("std_perp_eig", self.std_perp_eig, self.predicted_std),
            ("w0_distance", self.w0_distance, float("nan")),
            ("one_design_residual", self.one_design_residual, float("nan")),
            ("rank", float(self.rank), float(min(2 * self.S * self.n, 1 << self.n))),
        ]
        return [(q, m, p, m / p if p == p and p != 0 else float("nan")) for q, m, p in out]

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["quantity", "measured", "predicted", "ratio"])
        for q, m, p, r in self.rows():
            wr.writerow([q] + [f"{v:.9g}" for v in (m, p, r)])
        return buf.getvalue()

    def to_table(self) -> str:
        lines = [f"{'quantity':<22}{'measured':>14}{'predicted':>14}{'ratio':>10}"]
        for q, m, p, r in self.rows():
            lines.append(f"{q:<22}{m:>14.6g}{p:>14.6g}{r:>10.4g}")
        return "\n".join(lines)

    def as_dict(self) -> dict:
        return asdict(self)


def mixing_report(state: CircuitState, w: np.ndarray | None = None, design_residual: float = float("nan")) -> MixingReport:
    n, S, N = state.n, state.S, state.N
    w = accumulate_W(state) if w is None else w
    ev = perp_eigenvalues(w)
    return MixingReport(
        n=n,
        S=S,
        mean_perp_eig=float(ev.mean()),
        std_perp_eig=float(ev.std()),
        predicted_mean=S * n / 2 * 3 / (N - 1),
        predicted_std=4 * np.sqrt(S * n / (2 * N)),
        one_design_residual=design_residual,
        w0_distance=float(np.linalg.norm(w - W0(n, S), 2)),
        rank=int(np.linalg.matrix_rank(w)),
    )


# --- 1-design residual ---------------------------------------------------------------------


def design_target(N: int) -> np.ndarray:
    """Closed form of ``E_U U_perp (x) U_perp^dagger / (1 - 1/N)`` as an (ij),(lk) matrix."""
    pp = np.eye(N) - np.full((N, N), 1.0 / N)
    # T[i, j, k, l] = P_il P_jk / (N - 1), stored with rows (i, j) and columns (l, k)
    t = np.einsum("il,jk->ijlk", pp, pp) / (N - 1)
    return t.reshape(N * N, N * N)


def design_moment(perms: np.ndarray) -> np.ndarray:
    """Average of ``Q_perp (x) Q_perp^T`` over label maps ``perms`` (rows: ``i -> perm[i]``)."""
    perms = np.atleast_2d(perms)
    T, N = perms.shape
    x = np.zeros((T, N, N))
    x[np.arange(T)[:, None], perms, np.arange(N)[None, :]] = 1.0
    x -= 1.0 / N
    flat = x.reshape(T, N * N)
    return flat.T @ flat / T


def brickwork_permutation(n: int, depth: int, rng) -> np.ndarray:
    """Label map of a random depth-``depth`` permutation brickwork (identity for depth 0)."""
    N = 1 << n
    if depth == 0:
        return np.arange(N)
    perm_idx = rng.integers(0, N_PERMS, size=(depth, n // 2)).astype(np.int64)
    fwd, _ = K.layer_maps(n, perm_idx, PERMS4)
    pi = np.arange(N)
    for l in range(depth):
        pi = fwd[l][pi]
    return pi


def one_design_residual(n: int, S: int, trials: int, rng=None, perms=None) -> float:
    """Frobenius distance of the sampled moment to the 1-design closed form.

    ``perms`` (an array of label maps) overrides sampling, e.g. to average over
    an exact enumeration.
    """
    N = 1 << n
    if perms is None:
        if trials < 1:
            raise ValueError("trials must be >= 1")
        rng = np.random.default_rng() if rng is None else rng
        perms = np.stack([brickwork_permutation(n, S, rng) for _ in range(trials)])
    return float(np.linalg.norm(design_moment(perms) - design_target(N)))


# --- locality of the effective Hamiltonian ------------------------------------------------


def commutator_locality_probe(w: np.ndarray, spec) -> list[tuple[int, int, int, float]]:
    """``||[Wn G_x, Wn G_y]||_op`` for bonds at periodic distance >= 2.

    ``Wn`` is ``W`` divided by its mean eigenvalue orthogonal to the ones vector.
    Rows are ``(x, y, distance, norm)`` with 1-based sites.
    """
    n = spec.n
    wn = w / perp_eigenvalues(w).mean()
    terms = [wn @ spec.term_matrix(x) for x in range(1, n + 1)]
    rows = []
    for x in range(1, n + 1):
        for y in range(x + 1, n + 1):
            dist = min(y - x, n - (y - x))
            if dist < 2:
                continue
            a, b = terms[x - 1], terms[y - 1]
            rows.append((x, y, dist, float(np.linalg.norm(a @ b - b @ a, 2))))
    return rows
