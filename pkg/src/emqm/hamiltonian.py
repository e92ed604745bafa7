"""Local emergent Hamiltonians, their signed split, and boundary stochastic kernels.

A chain of ``n`` qubits (``n`` even, periodic) carries one real 4x4 generator
``G_x = -i H_x`` per bond ``(x, x+1)``.  Bit strings are labelled so that site 1
is the most significant bit, and a bond's pair index is ``2*bit_x + bit_{x+1}``.
Sites are 1-based in the public API and 0-based (``x0``) internally.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ATOL = 1e-12

I2 = np.eye(2)
X = np.array([[0.0, 1.0], [1.0, 0.0]])
Y = np.array([[0.0, -1j], [1j, 0.0]])
Z = np.array([[1.0, 0.0], [0.0, -1.0]])

# i * sigma^2, the real antisymmetric generator of the auxiliary rebit.
_I_SIGMA2 = np.array([[0.0, 1.0], [-1.0, 0.0]])
_MINUS = np.array([1.0, -1.0]) / np.sqrt(2.0)
_MINUS_PROJ = np.outer(_MINUS, _MINUS)


class InadmissibleTimeStep(ValueError):
    """Raised when ``delta_t`` is too large for the boundary kernels to be stochastic."""


@dataclass
class ValidationReport:
    passed: bool
    violations: list[tuple[str, float]] = field(default_factory=list)

    def __bool__(self) -> bool:
        return self.passed


def validate_local_term(g, atol: float = ATOL) -> ValidationReport:
    """Check that ``g`` is real antisymmetric with zero row and column sums.

    Works for any square matrix, so extended (8x8, 16x16) generators can be
    checked with the same routine.
    """
    g = np.asarray(g)
    violations = []
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        return ValidationReport(False, [("square", float("inf"))])
    if np.iscomplexobj(g):
        imag = float(np.max(np.abs(g.imag)))
        if imag > atol:
            violations.append(("real", imag))
        g = g.real
    if not np.all(np.isfinite(g)):
        return ValidationReport(False, violations + [("finite", float("inf"))])
    checks = {
        "antisymmetric": np.max(np.abs(g + g.T)),
        "row_sums": np.max(np.abs(g.sum(axis=1))),
        "column_sums": np.max(np.abs(g.sum(axis=0))),
    }
    for name, residual in checks.items():
        if residual > atol:
            violations.append((name, float(residual)))
    return ValidationReport(not violations, violations)


@dataclass
class LocalTerm:
    site: int
    g: np.ndarray

    def __post_init__(self):
        self.g = np.asarray(self.g, dtype=float)
        if self.g.shape != (4, 4):
            raise ValueError(f"local term must be 4x4, got {self.g.shape}")
        report = validate_local_term(self.g)
        if not report:
            raise ValueError(f"invalid local term at site {self.site}: {report.violations}")


def pair_shifts(x0: int, n: int) -> tuple[int, int]:
    """Bit shifts of sites ``x0`` and ``x0+1`` (periodic) inside an n-bit label."""
    return n - 1 - x0, n - 1 - (x0 + 1) % n


def pair_index(labels, x0: int, n: int):
    """Pair index ``2*bit_x + bit_{x+1}`` of each label for the bond starting at ``x0``."""
    hi, lo = pair_shifts(x0, n)
    labels = np.asarray(labels)
    return (((labels >> hi) & 1) << 1) | ((labels >> lo) & 1)


def embed_pair(op: np.ndarray, x0: int, n: int) -> np.ndarray:
    """Dense N x N matrix of a 4x4 operator acting on the bond starting at ``x0``."""
    N = 1 << n
    hi, lo = pair_shifts(x0, n)
    labels = np.arange(N)
    rest = labels & ~((1 << hi) | (1 << lo))
    pair = pair_index(labels, x0, n)
    same_rest = rest[:, None] == rest[None, :]
    out = np.where(same_rest, np.asarray(op)[pair[:, None], pair[None, :]], 0)
    return out.astype(np.result_type(op, float))


def apply_pair_op(v: np.ndarray, op: np.ndarray, x0: int, n: int) -> np.ndarray:
    """Apply a 4x4 operator to the bond at ``x0`` of a length-2^n vector."""
    N = 1 << n
    v = np.asarray(v)
    if v.shape != (N,):
        raise ValueError(f"expected vector of length {N}, got {v.shape}")
    labels = np.arange(N)
    pair = pair_index(labels, x0, n)
    hi, lo = pair_shifts(x0, n)
    base = labels[pair == 0]
    # columns of idx: the four labels sharing the same bits outside the bond
    offsets = np.array([0, 1 << lo, 1 << hi, (1 << hi) | (1 << lo)])
    idx = base[:, None] | offsets[None, :]
    out = np.empty(N, dtype=np.result_type(v, op))
    out[idx] = v[idx] @ np.asarray(op).T
    return out


@dataclass
class HamiltonianSpec:
    n: int
    terms: list[LocalTerm]

    def __post_init__(self):
        if self.n < 2 or self.n % 2:
            raise ValueError(f"n must be even and >= 2, got {self.n}")
        if len(self.terms) != self.n:
            raise ValueError(f"periodic chain needs {self.n} terms, got {len(self.terms)}")
        self.terms = sorted(self.terms, key=lambda t: t.site)
        if [t.site for t in self.terms] != list(range(1, self.n + 1)):
            raise ValueError("terms must cover sites 1..n exactly once")

    @property
    def N(self) -> int:
        return 1 << self.n

    def term_matrix(self, x: int) -> np.ndarray:
        """Dense N x N generator of the bond at 1-based site ``x``."""
        return embed_pair(self.terms[x - 1].g, x - 1, self.n)

    def generator(self) -> np.ndarray:
        """Assembled real generator ``G = sum_x G_x``."""
        return sum(self.term_matrix(x) for x in range(1, self.n + 1))

    def hamiltonian(self) -> np.ndarray:
        return 1j * self.generator()

    def to_text(self) -> str:
        lines = [f"n {self.n}"]
        for t in self.terms:
            lines.append(f"term {t.site} " + " ".join(repr(float(v)) for v in t.g.ravel()))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> HamiltonianSpec:
        n = None
        terms = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            if tok[0] == "n" and len(tok) == 2:
                n = int(tok[1])
            elif tok[0] == "term" and len(tok) == 18:
                g = np.array([float(v) for v in tok[2:]]).reshape(4, 4)
                terms.append(LocalTerm(int(tok[1]), g))
            else:
                raise ValueError(f"line {lineno}: cannot parse {raw!r}")
        if n is None:
            raise ValueError("missing 'n <int>' header")
        return cls(n, terms)

    @classmethod
    def load(cls, path) -> HamiltonianSpec:
        return cls.from_text(Path(path).read_text())


def yx_y_generator() -> np.ndarray:
    """4x4 generator of ``H_x = Y_x X_{x+1} - Y_x``."""
    h = np.kron(Y, X) - np.kron(Y, I2)
    g = -1j * h
    assert np.allclose(g.imag, 0)
    return g.real.copy()


def builtin_spec(name: str, n: int) -> HamiltonianSpec:
    if name == "yx-y":
        g = yx_y_generator()
        return HamiltonianSpec(n, [LocalTerm(x, g) for x in range(1, n + 1)])
    raise KeyError(f"unknown built-in Hamiltonian {name!r}")


def single_term_spec(g: np.ndarray, n: int = 2) -> HamiltonianSpec:
    """Spec with ``g`` on bond 1 and zero elsewhere (the two-bit warm-up model)."""
    terms = [LocalTerm(1, g)] + [LocalTerm(x, np.zeros((4, 4))) for x in range(2, n + 1)]
    return HamiltonianSpec(n, terms)


def random_local_term(rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    """Random antisymmetric 4x4 generator with zero row/column sums."""
    a = rng.standard_normal((4, 4))
    proj = np.eye(4) - np.full((4, 4), 0.25)
    g = proj @ (a - a.T) @ proj
    g = 0.5 * (g - g.T)
    return scale * g / np.linalg.norm(g, 2)


def split_signed(g) -> tuple[np.ndarray, np.ndarray]:
    g = np.asarray(g, dtype=float)
    return np.maximum(g, 0.0), np.maximum(-g, 0.0)


def column_sum_g(g_plus, g_minus=None) -> np.ndarray:
    """Column sums of the positive part; equal to those of the negative part."""
    g_plus = np.asarray(g_plus, dtype=float)
    col = g_plus.sum(axis=0)
    if g_minus is not None:
        other = np.asarray(g_minus, dtype=float).sum(axis=0)
        if np.max(np.abs(col - other)) > 1e-12:
            raise ValueError("column sums of G+ and G- differ; G is not zero-sum")
    return col


@dataclass
class BoundaryKernel:
    site: int
    delta_t: float
    b_plus: np.ndarray
    b_minus: np.ndarray


def build_boundary_kernel(term: LocalTerm, delta_t: float) -> BoundaryKernel:
    if not delta_t >= 0:
        raise InadmissibleTimeStep(f"delta_t must be nonnegative, got {delta_t}")
    g_plus, g_minus = split_signed(term.g)
    gx = column_sum_g(g_plus, g_minus)
    diag = 1.0 - delta_t * gx
    if np.any(diag < 0) or np.any(delta_t * g_plus > 1) or np.any(delta_t * g_minus > 1):
        raise InadmissibleTimeStep(
            f"delta_t={delta_t} makes a boundary kernel negative at site {term.site}; "
            f"need delta_t <= {1.0 / max(gx.max(), 1e-300):.6g}"
        )
    b_plus = delta_t * g_plus + np.diag(diag)
    b_minus = delta_t * g_minus + np.diag(diag)
    return BoundaryKernel(term.site, delta_t, b_plus, b_minus)


def max_admissible_delta_t(spec: HamiltonianSpec) -> float:
    worst = max(column_sum_g(split_signed(t.g)[0]).max() for t in spec.terms)
    return np.inf if worst <= 0 else 1.0 / worst


def boundary_kernels(spec: HamiltonianSpec, delta_t: float) -> list[BoundaryKernel]:
    return [build_boundary_kernel(t, delta_t) for t in spec.terms]


def _parity_sites(n: int, parity: str) -> list[int]:
    # odd x (1-based) -> x0 even; these form B^(+-1); even x form B^(+-2)
    if parity in ("odd", 1):
        return list(range(0, n, 2))
    if parity in ("even", 2):
        return list(range(1, n, 2))
    raise ValueError(f"parity must be 'odd' or 'even', got {parity!r}")


def apply_boundary_layer(spec: HamiltonianSpec, delta_t: float, parity, sign, v, kernels=None):
    """Apply the depth-1 circuit ``(tensor_{x of parity} B_x^(sign)) . v`` in place of a dense product."""
    v = np.asarray(v, dtype=float)
    if v.shape != (spec.N,):
        raise ValueError(f"expected vector of length {spec.N}, got {v.shape}")
    if kernels is None:
        kernels = boundary_kernels(spec, delta_t)
    plus = sign in ("+", +1)
    if not plus and sign not in ("-", -1):
        raise ValueError(f"sign must be '+' or '-', got {sign!r}")
    out = v
    for x0 in _parity_sites(spec.n, parity):
        k = kernels[x0]
        out = apply_pair_op(out, k.b_plus if plus else k.b_minus, x0, spec.n)
    return out


def boundary_layer_matrix(spec: HamiltonianSpec, delta_t: float, parity, sign, kernels=None) -> np.ndarray:
    """Dense N x N matrix of one boundary layer (columns are images of basis vectors)."""
    eye = np.eye(spec.N)
    return np.column_stack(
        [apply_boundary_layer(spec, delta_t, parity, sign, eye[:, j], kernels) for j in range(spec.N)]
    )


# --- complex -> real -> zero-sum mappings -------------------------------------------------


def realify_operator(h) -> np.ndarray:
    """Real generator ``G~ = -i H~`` of a Hermitian term after adding one auxiliary rebit.

    ``H~ = i Im(H) (x) 1 - Re(H) (x) sigma^2`` so that
    ``G~ = Im(H) (x) 1 + Re(H) (x) (i sigma^2)``; the auxiliary qubit is the least
    significant bit.  The result is antisymmetric but not yet zero-sum.
    """
    h = np.asarray(h, dtype=complex)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ValueError("operator must be square")
    if np.max(np.abs(h - h.conj().T)) > 1e-12:
        raise ValueError("input term is not Hermitian")
    return np.kron(h.imag, I2) + np.kron(h.real, _I_SIGMA2)


def realify_state(psi, n_aux: int = 1) -> np.ndarray:
    """``(psi (x) |-i>^k + psi* (x) |+i>^k) / sqrt(2)``, returned as a real vector."""
    psi = np.asarray(psi, dtype=complex)
    minus_i = np.array([1.0, -1j]) / np.sqrt(2.0)
    aux = np.array([1.0 + 0j])
    for _ in range(n_aux):
        aux = np.kron(aux, minus_i)
    out = (np.kron(psi, aux) + np.kron(psi.conj(), aux.conj())) / np.sqrt(2.0)
    if np.max(np.abs(out.imag)) > 1e-12:
        raise AssertionError("realified state has an imaginary part")
    return out.real.copy()


def zero_sum_extend(x, n_aux: int = 1) -> np.ndarray:
    """Attach ``|->`` rebits: operators map to ``Q (x) |-><-|``, states to ``psi (x) |->^k``."""
    x = np.asarray(x)
    if x.ndim == 1:
        out = x
        for _ in range(n_aux):
            out = np.kron(out, _MINUS)
        return out
    if x.ndim == 2:
        out = x
        for _ in range(n_aux):
            out = np.kron(out, _MINUS_PROJ)
        return out
    raise ValueError("expected a vector or a square matrix")


def map_hamiltonian(h) -> np.ndarray:
    """Complex Hermitian term -> real, zero-sum generator on the doubly enlarged cell."""
    return zero_sum_extend(realify_operator(h))


def map_state(psi) -> np.ndarray:
    return zero_sum_extend(realify_state(psi))
