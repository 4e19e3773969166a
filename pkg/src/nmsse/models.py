"""Model presets: system Hamiltonian, coupling operator and initial state (hbar = 1)."""

from dataclasses import dataclass, field
import math

import numpy as np

from .linalg import is_hermitian

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
SIGMA_MINUS = np.array([[0, 0], [1, 0]], dtype=complex)

KET_0 = np.array([1, 0], dtype=complex)
KET_PLUS = np.array([1, 1], dtype=complex) / math.sqrt(2)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    H: np.ndarray
    L: np.ndarray
    psi0: np.ndarray
    tag: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        H = np.asarray(self.H, dtype=complex)
        L = np.asarray(self.L, dtype=complex)
        psi0 = np.asarray(self.psi0, dtype=complex)
        d = psi0.shape[0]
        if H.shape != (d, d) or L.shape != (d, d):
            raise ModelError(f"H {H.shape}, L {L.shape} and psi0 ({d},) dimensions disagree")
        if not is_hermitian(H):
            raise ModelError("H must be Hermitian to 1e-12")
        if abs(np.linalg.norm(psi0) - 1.0) > 1e-12:
            raise ModelError("psi0 must have unit norm to 1e-12")
        for name, v in (("H", H), ("L", L), ("psi0", psi0)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def dim(self):
        return self.psi0.shape[0]

    @property
    def hermitian_coupling(self):
        return is_hermitian(self.L)

    @property
    def is_diagonal(self):
        off = lambda m: m - np.diag(np.diag(m))
        return not np.any(off(self.H)) and not np.any(off(self.L))

    @property
    def coupling_strength(self):
        """g for the two-level presets (L = g*sigma)."""
        return self.params.get("g")

    def shifted(self, mu):
        """Same model with H -> H + mu*I."""
        return ModelSpec(self.H + mu * np.eye(self.dim), self.L, self.psi0, self.tag, dict(self.params))

    def to_json(self):
        if self.tag != "custom":
            return {"type": self.tag, **self.params}
        c = lambda m: {"re": m.real.tolist(), "im": m.imag.tolist()}
        return {"type": "custom", "H": c(self.H), "L": c(self.L), "psi0": c(self.psi0)}


def _state(psi0, default):
    if psi0 is None:
        return default
    if isinstance(psi0, str):
        return {"0": KET_0, "1": np.array([0, 1], dtype=complex), "+": KET_PLUS}[psi0]
    return np.asarray(psi0, dtype=complex)


def spin_boson(omega=1.0, g=1.0, psi0=None):
    """H = (omega/2) sigma_z, L = g sigma_x."""
    return ModelSpec(0.5 * omega * SIGMA_Z, g * SIGMA_X, _state(psi0, KET_0), "spin_boson",
                     {"omega": omega, "g": g})


def dephasing(omega=1.0, g=1.0, psi0=None):
    """H = (omega/2) sigma_z, L = g sigma_z, default initial state |+>."""
    return ModelSpec(0.5 * omega * SIGMA_Z, g * SIGMA_Z, _state(psi0, KET_PLUS), "dephasing",
                     {"omega": omega, "g": g})


def amplitude_coupling(omega=1.0, g=1.0, psi0=None):
    """Two-level system with the non-Hermitian coupling L = g sigma_minus."""
    return ModelSpec(0.5 * omega * SIGMA_Z, g * SIGMA_MINUS, _state(psi0, np.array([0, 1], complex)),
                     "sigma_minus", {"omega": omega, "g": g})


def ladder(dim):
    return np.diag(np.sqrt(np.arange(1, dim)), 1).astype(complex)


def qbm(omega=1.0, dim=10, psi0=None):
    """Truncated oscillator H = p^2/2 + omega^2 q^2/2, L = q, started in the ground state."""
    a = ladder(dim)
    q = (a + a.conj().T) / math.sqrt(2 * omega)
    p = 1j * math.sqrt(omega / 2) * (a.conj().T - a)
    H = 0.5 * p @ p + 0.5 * omega**2 * q @ q
    H = 0.5 * (H + H.conj().T)
    if psi0 is None:
        psi0 = np.zeros(dim, dtype=complex)
        psi0[0] = 1.0
    return ModelSpec(H, q, np.asarray(psi0, dtype=complex), "qbm", {"omega": omega, "dim": dim})


def truncation_weight(psi):
    """Fraction of the squared norm in the top Fock level (per trajectory)."""
    psi = np.asarray(psi)
    n2 = np.sum(np.abs(psi) ** 2, axis=-1)
    return np.abs(psi[..., -1]) ** 2 / np.where(n2 > 0, n2, 1.0)


PRESETS = {"spin_boson": spin_boson, "dephasing": dephasing, "qbm": qbm,
           "sigma_minus": amplitude_coupling}


def _complex_array(v):
    """Plain (real) nested lists, or {"re": ..., "im": ...}."""
    if isinstance(v, dict):
        re = np.asarray(v.get("re", 0.0), dtype=float)
        im = np.asarray(v.get("im", np.zeros_like(re)), dtype=float)
        return re + 1j * im
    return np.asarray(v, dtype=float).astype(complex)


def model_from_json(d):
    d = dict(d)
    kind = d.pop("type", None)
    if kind == "custom":
        return ModelSpec(_complex_array(d["H"]), _complex_array(d["L"]), _complex_array(d["psi0"]))
    if kind not in PRESETS:
        raise ModelError(f"unknown model type {kind!r}")
    if "psi0" in d and not isinstance(d["psi0"], str):
        d["psi0"] = _complex_array(d["psi0"])
    return PRESETS[kind](**d)
