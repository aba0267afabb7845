"""Dense complex linear algebra for small quantum systems (d <= ~16).

Thin validation layer over numpy: states are 1-d complex128 arrays,
operators are square complex128 arrays.  Everything is value-semantic
and re-entrant, so these helpers are safe inside parallel trajectory
workers.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DimensionError",
    "adjoint",
    "basis_state",
    "cmatrix",
    "cvector",
    "expectation",
    "frobenius_norm",
    "identity",
    "ketbra",
    "matmul",
    "matvec",
    "norm",
    "outer",
    "trace",
]


class DimensionError(ValueError):
    """Operands have incompatible dimensions."""


def cvector(amplitudes) -> np.ndarray:
    """Validate and return a complex state vector."""
    v = np.asarray(amplitudes, dtype=np.complex128)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError(f"state vector must be 1-d and non-empty, got shape {v.shape}")
    if not np.all(np.isfinite(v.view(np.float64))):
        raise ValueError("state vector has non-finite entries")
    return v


def cmatrix(entries) -> np.ndarray:
    """Validate and return a square complex matrix."""
    m = np.asarray(entries, dtype=np.complex128)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] == 0:
        raise DimensionError(f"operator must be square, got shape {m.shape}")
    if not np.all(np.isfinite(m.view(np.float64))):
        raise ValueError("operator has non-finite entries")
    return m


def identity(dim: int) -> np.ndarray:
    return np.eye(dim, dtype=np.complex128)


def basis_state(dim: int, i: int) -> np.ndarray:
    """Computational basis vector |i> (0-indexed)."""
    v = np.zeros(dim, dtype=np.complex128)
    v[i] = 1.0
    return v


def ketbra(dim: int, i: int, j: int) -> np.ndarray:
    """Dyadic |i><j| (0-indexed)."""
    m = np.zeros((dim, dim), dtype=np.complex128)
    m[i, j] = 1.0
    return m


def _check_square_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"dimension mismatch: {a.shape} vs {b.shape}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_square_pair(a, b)
    return a @ b


def matvec(a: np.ndarray, v: np.ndarray) -> np.ndarray:
    if a.shape[1] != v.shape[0]:
        raise DimensionError(f"dimension mismatch: {a.shape} vs {v.shape}")
    return a @ v


def adjoint(a: np.ndarray) -> np.ndarray:
    """Conjugate transpose."""
    return a.conj().T.copy()


def trace(a: np.ndarray) -> complex:
    return complex(np.trace(a))


def frobenius_norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(a))


def norm(psi: np.ndarray) -> float:
    return float(np.linalg.norm(psi))


def outer(psi: np.ndarray, phi: np.ndarray | None = None) -> np.ndarray:
    """Dyadic |psi><phi| (phi defaults to psi)."""
    if phi is None:
        phi = psi
    return np.outer(psi, phi.conj())


def expectation(psi: np.ndarray, a: np.ndarray) -> complex:
    """Normalized expectation <psi|A|psi> / <psi|psi>.

    Raises on a (numerically) zero vector; normalizing here keeps the
    nonlinear trajectory equations bounded when the integrated state
    norm drifts off unity.
    """
    if a.shape[1] != psi.shape[0]:
        raise DimensionError(f"dimension mismatch: {a.shape} vs {psi.shape}")
    n2 = float(np.vdot(psi, psi).real)
    if n2 <= 0.0 or not np.isfinite(n2):
        raise ValueError("expectation of a zero or non-finite state")
    return complex(np.vdot(psi, a @ psi) / n2)
