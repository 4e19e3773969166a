"""Small dense linear algebra helpers.

Everything here works on plain numpy arrays. Hilbert-space dimensions are
small (two-level systems and truncated oscillators), so dense O(n^3) routines
are used throughout.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

MAX_EXPM_ENTRIES = 4096

# Relative jitter levels tried in order by cholesky_psd (scaled by max diagonal).
JITTER_LEVELS = (0.0, 1e-12, 1e-10)


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class CholeskyFailure:
    """Returned (not raised) when a covariance is not PSD at any jitter level."""

    min_eigenvalue: float
    jitter_tried: tuple

    def __bool__(self):
        return False

    def describe(self):
        return (f"covariance not positive semidefinite: most negative eigenvalue "
                f"{self.min_eigenvalue:.6g} (jitter levels {self.jitter_tried})")


def _as_square(m, name="matrix"):
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {m.shape}")
    return m


def is_hermitian(m, atol=1e-12):
    m = np.asarray(m)
    return m.ndim == 2 and m.shape[0] == m.shape[1] and np.allclose(m, m.conj().T, rtol=0, atol=atol)


def matexp(m, t=1.0):
    """Return exp(t*M) for a square (possibly non-normal) complex matrix."""
    m = _as_square(m)
    if m.size > MAX_EXPM_ENTRIES:
        raise DimensionError(f"matexp limited to {MAX_EXPM_ENTRIES} entries, got {m.size}")
    return scipy.linalg.expm(t * m.astype(complex))


def cholesky_psd(c):
    """Lower-triangular factor of a symmetric PSD matrix with fixed jitter escalation.

    Tries ``C + eps*I`` with ``eps`` in ``JITTER_LEVELS * max(diag(C))``.
    Rank-deficient PSD input is accepted at the first jitter level that
    factorizes. On failure a :class:`CholeskyFailure` is returned.
    """
    c = np.asarray(_as_square(c), dtype=float)
    c = 0.5 * (c + c.T)
    n = c.shape[0]
    scale = float(np.max(np.diag(c))) if n else 0.0
    if scale <= 0.0:
        if np.all(c == 0.0):
            return np.zeros_like(c)
        scale = float(np.max(np.abs(c)))
    tried = []
    for level in JITTER_LEVELS:
        eps = level * scale
        tried.append(eps)
        try:
            return np.linalg.cholesky(c + eps * np.eye(n))
        except np.linalg.LinAlgError:
            continue
    lam = float(np.linalg.eigvalsh(c)[0])
    return CholeskyFailure(min_eigenvalue=lam, jitter_tried=tuple(tried))


def trace_distance(rho1, rho2):
    """Half the trace norm of the difference of two Hermitian matrices."""
    a = _as_square(rho1, "rho1")
    b = _as_square(rho2, "rho2")
    if a.shape != b.shape:
        raise DimensionError(f"dimension mismatch {a.shape} vs {b.shape}")
    d = a - b
    d = 0.5 * (d + d.conj().T)
    return 0.5 * float(np.sum(np.abs(np.linalg.eigvalsh(d))))


def dagger(m):
    return np.conj(np.swapaxes(m, -1, -2))
