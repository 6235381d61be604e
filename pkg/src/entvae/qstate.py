"""Two-qubit state algebra: sampling, partial transpose, PPT labels, Pauli tomography.

Matrices are plain complex128 numpy arrays. Every function accepts a single
4x4 matrix or a stack of shape (..., 4, 4).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "NumericalError",
    "PAULI",
    "MEASUREMENT_LABELS",
    "MEASUREMENT_PAIRS",
    "PPT_TOLERANCE",
    "eigvals_hermitian",
    "random_density_matrix",
    "random_density_matrices",
    "partial_transpose",
    "ppt_label",
    "pauli_expectations",
    "reconstruct_density",
    "is_density_matrix",
    "bell_state",
    "werner_state",
    "product_state",
]

PPT_TOLERANCE = 1e-10
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100


class NumericalError(RuntimeError):
    """An iterative numerical routine failed to converge."""


PAULI = {
    "0": np.eye(2, dtype=complex),
    "x": np.array([[0, 1], [1, 0]], dtype=complex),
    "y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "z": np.array([[1, 0], [0, -1]], dtype=complex),
}

# Locals first, then correlated, each block row-major in (i, j).
MEASUREMENT_PAIRS = (
    ("0", "x"), ("0", "y"), ("0", "z"),
    ("x", "0"), ("y", "0"), ("z", "0"),
    ("x", "x"), ("x", "y"), ("x", "z"),
    ("y", "x"), ("y", "y"), ("y", "z"),
    ("z", "x"), ("z", "y"), ("z", "z"),
)
MEASUREMENT_LABELS = tuple(f"m_{i}{j}" for i, j in MEASUREMENT_PAIRS)

_OPERATORS = np.stack([np.kron(PAULI[i], PAULI[j]) for i, j in MEASUREMENT_PAIRS])


def _offdiag_norm(a: np.ndarray) -> np.ndarray:
    n = a.shape[-1]
    mask = ~np.eye(n, dtype=bool)
    return np.sqrt(np.sum(np.abs(a[..., mask]) ** 2, axis=-1))


def eigvals_hermitian(h, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS,
                      check: bool = True) -> np.ndarray:
    """Eigenvalues of Hermitian matrices by cyclic complex Jacobi rotations.

    Works on a single (n, n) matrix or a stack (..., n, n). Returns real
    eigenvalues sorted ascending along the last axis.
    """
    a = np.array(h, dtype=complex, copy=True)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {a.shape}")
    if check:
        asym = np.max(np.abs(a - np.conj(np.swapaxes(a, -1, -2))), initial=0.0)
        if asym > 1e-10:
            raise ValueError(f"matrix is not Hermitian (max asymmetry {asym:.3g})")
    single = a.ndim == 2
    n = a.shape[-1]
    a = a.reshape(-1, n, n)
    scale = np.maximum(1.0, np.linalg.norm(a, axis=(-2, -1)))

    for _ in range(max_sweeps):
        if np.all(_offdiag_norm(a) <= tol * scale):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[:, p, q]
                mag = np.abs(apq)
                active = mag > 1e-300
                if not np.any(active):
                    continue
                safe = np.where(active, mag, 1.0)
                phase = np.where(active, apq / safe, 1.0)
                tau = (a[:, q, q].real - a[:, p, p].real) / (2.0 * safe)
                t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau))
                t = np.where(active, t, 0.0)
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                # J = D R with D = diag(1, .., e^{-i phi}_q, ..); A <- J^H A J
                jp = np.empty((a.shape[0], 2, 2), dtype=complex)
                jp[:, 0, 0] = c
                jp[:, 1, 0] = -s * np.conj(phase)
                jp[:, 0, 1] = s
                jp[:, 1, 1] = c * np.conj(phase)
                cols = a[:, :, [p, q]] @ jp
                a[:, :, p] = cols[:, :, 0]
                a[:, :, q] = cols[:, :, 1]
                rows = np.conj(np.swapaxes(jp, -1, -2)) @ a[:, [p, q], :]
                a[:, p, :] = rows[:, 0, :]
                a[:, q, :] = rows[:, 1, :]
                a[:, p, q] = 0.0
                a[:, q, p] = 0.0
    else:
        if not np.all(_offdiag_norm(a) <= tol * scale):
            raise NumericalError(f"Jacobi did not converge in {max_sweeps} sweeps")

    vals = np.sort(np.diagonal(a, axis1=-2, axis2=-1).real, axis=-1)
    return vals[0] if single else vals.reshape(np.shape(h)[:-2] + (n,))


def random_density_matrices(n: int, rng: np.random.Generator) -> np.ndarray:
    """Stack of n Hilbert-Schmidt (Ginibre) two-qubit states."""
    g = rng.standard_normal((n, 4, 4)) + 1j * rng.standard_normal((n, 4, 4))
    rho = g @ np.conj(np.swapaxes(g, -1, -2))
    tr = np.trace(rho, axis1=-2, axis2=-1).real
    rho = rho / tr[:, None, None]
    # exact Hermiticity after the division
    return 0.5 * (rho + np.conj(np.swapaxes(rho, -1, -2)))


def random_density_matrix(rng: np.random.Generator) -> np.ndarray:
    return random_density_matrices(1, rng)[0]


def partial_transpose(rho: np.ndarray) -> np.ndarray:
    """Apply (I (x) T): transpose every 2x2 block of the 4x4 block view in place."""
    rho = np.asarray(rho)
    lead = rho.shape[:-2]
    r = rho.reshape(lead + (2, 2, 2, 2))
    return np.swapaxes(r, -3, -1).reshape(lead + (4, 4))


def ppt_label(rho: np.ndarray, tol: float = PPT_TOLERANCE):
    """1 if the partial transpose has an eigenvalue below -tol (entangled), else 0."""
    lam_min = eigvals_hermitian(partial_transpose(rho))[..., 0]
    labels = (lam_min < -tol).astype(np.int64)
    return int(labels) if labels.ndim == 0 else labels


def pauli_expectations(rho: np.ndarray) -> np.ndarray:
    """The 15 values Tr[rho (s_i (x) s_j)] in canonical order."""
    rho = np.asarray(rho)
    vals = np.einsum("kab,...ba->...k", _OPERATORS, rho)
    imag = np.max(np.abs(vals.imag), initial=0.0)
    if imag > 1e-10:
        raise ValueError(f"Pauli expectation has imaginary part {imag:.3g}; input not Hermitian")
    return np.ascontiguousarray(vals.real)


def reconstruct_density(m) -> np.ndarray:
    """Invert the Pauli map: rho = (I + sum_k m_k P_k) / 4. Positivity is not enforced."""
    m = np.asarray(m, dtype=float)
    if m.shape[-1] != 15:
        raise ValueError(f"expected 15 measurements, got {m.shape[-1]}")
    if not np.all(np.isfinite(m)):
        raise ValueError("measurements must be finite")
    rho = np.eye(4, dtype=complex) + np.einsum("...k,kab->...ab", m, _OPERATORS)
    return rho / 4.0


def is_density_matrix(rho: np.ndarray, atol: float = 1e-12, eig_tol: float = 1e-10) -> bool:
    rho = np.asarray(rho)
    if rho.shape != (4, 4) or not np.all(np.isfinite(rho)):
        return False
    if np.max(np.abs(rho - rho.conj().T)) > atol:
        return False
    tr = np.trace(rho)
    if abs(tr.real - 1.0) > atol or abs(tr.imag) > atol:
        return False
    return bool(eigvals_hermitian(rho)[0] >= -eig_tol)


def bell_state(kind: str = "phi+") -> np.ndarray:
    s = 1 / np.sqrt(2)
    vecs = {
        "phi+": [s, 0, 0, s],
        "phi-": [s, 0, 0, -s],
        "psi+": [0, s, s, 0],
        "psi-": [0, s, -s, 0],
    }
    v = np.array(vecs[kind], dtype=complex)
    return np.outer(v, v.conj())


def werner_state(p: float) -> np.ndarray:
    return p * bell_state("phi+") + (1 - p) * np.eye(4, dtype=complex) / 4


def product_state(rho_a: np.ndarray, rho_b: np.ndarray) -> np.ndarray:
    return np.kron(rho_a, rho_b)
