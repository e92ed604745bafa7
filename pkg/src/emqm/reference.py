"""Reference quantum dynamics for the emergent wavefunction."""

from __future__ import annotations

import numpy as np
from scipy.integrate import solve_ivp
from scipy.linalg import expm

from .hamiltonian import HamiltonianSpec, validate_local_term


def _generator(spec_or_g) -> np.ndarray:
    if isinstance(spec_or_g, HamiltonianSpec):
        return spec_or_g.generator()
    return np.asarray(spec_or_g, dtype=float)


def _vec(psi) -> np.ndarray:
    return np.asarray(getattr(psi, "v", psi), dtype=float)


def check_initial_state(psi, atol: float = 1e-10) -> None:
    if abs(np.linalg.norm(psi) - 1) > atol:
        raise ValueError("initial state is not normalized")
    if abs(psi.sum()) > atol:
        raise ValueError("initial state does not sum to zero")


def evolve_exact(spec_or_g, psi0, t: float, require_zero_sum: bool = True) -> np.ndarray:
    """``exp(t G) psi0`` by dense scaling-and-squaring."""
    g = _generator(spec_or_g)
    psi0 = _vec(psi0)
    if t < 0:
        raise ValueError("t must be nonnegative")
    report = validate_local_term(g, atol=1e-10)
    if require_zero_sum:
        if not report:
            raise ValueError(f"generator violates constraints: {report.violations}")
        check_initial_state(psi0)
    elif np.max(np.abs(g + g.T)) > 1e-10:
        raise ValueError("generator is not antisymmetric")
    if t == 0:
        return psi0.copy()
    return expm(t * g) @ psi0


def evolve_exact_series(spec_or_g, psi0, times) -> np.ndarray:
    """Rows are ``exp(t G) psi0`` for each ``t``; one eigendecomposition for all times."""
    g = _generator(spec_or_g)
    psi0 = _vec(psi0)
    check_initial_state(psi0)
    # iG is Hermitian, so eigh gives an exact unitary diagonalization
    evals, vecs = np.linalg.eigh(1j * g)
    coef = vecs.conj().T @ psi0
    times = np.asarray(times, dtype=float)
    out = (vecs @ (np.exp(-1j * np.outer(evals, times)) * coef[:, None])).T
    return out.real


def effective_eigenvalues(w, spec_or_g) -> np.ndarray:
    """Eigenvalues of ``W . H`` via the similar Hermitian matrix ``W^1/2 H W^1/2``."""
    w = np.asarray(w, dtype=float)
    h = 1j * _generator(spec_or_g)
    lam, u = np.linalg.eigh(0.5 * (w + w.T))
    lam = np.clip(lam, 0.0, None)
    root = (u * np.sqrt(lam)) @ u.T
    return np.linalg.eigvalsh(root @ h @ root)


def evolve_modified(w, spec_or_g, psi0, t, rtol: float = 1e-10, atol: float = 1e-10, check_spectrum: bool = True):
    """Integrate ``dPsi/dt = W G Psi``; ``t`` may be a scalar or an increasing array of output times.

    Outputs are renormalized only at the requested times.
    """
    w = np.asarray(w, dtype=float)
    g = _generator(spec_or_g)
    psi0 = _vec(psi0)
    if np.max(np.abs(w - w.T)) > 1e-10:
        raise ValueError("W must be symmetric")
    if check_spectrum:
        lam = np.linalg.eigvals(w @ (1j * g))
        if np.max(np.abs(lam.imag)) > 1e-8 * max(1.0, np.max(np.abs(lam))):
            raise ValueError("W.H has complex eigenvalues; W is not PSD on the relevant subspace")
    times = np.atleast_1d(np.asarray(t, dtype=float))
    a = w @ g
    if np.all(times == 0):
        out = np.tile(psi0, (times.size, 1))
    else:
        sol = solve_ivp(
            lambda _, y: a @ y, (0.0, float(times.max())), psi0, method="DOP853",
            t_eval=times, rtol=rtol, atol=atol,
        )
        if not sol.success:
            raise RuntimeError(f"integrator failed: {sol.message}")
        out = sol.y.T
    out = out / np.linalg.norm(out, axis=1, keepdims=True)
    return out[0] if np.ndim(t) == 0 else out


def deviation(psi, psi_qm) -> float:
    """Euclidean distance with no sign or phase alignment."""
    return float(np.linalg.norm(_vec(psi) - _vec(psi_qm)))
