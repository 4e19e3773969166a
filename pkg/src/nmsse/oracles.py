"""Closed-form and semi-analytic references for validating the Monte Carlo.

All kernel integrals are done in closed form from the kernel parameters, so
none of these depend on the simulation grid.
"""

from dataclasses import dataclass
import math

import numpy as np
from scipy.special import erfcinv

from .linalg import dagger, matexp

ROUNDOFF = 1e-12


@dataclass(frozen=True)
class GKSLSpec:
    H: np.ndarray
    L: np.ndarray
    rate: float

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError("GKSL rate must be nonnegative")
        if np.shape(self.H) != np.shape(self.L):
            raise ValueError("H and L dimensions differ")


def vec(rho):
    """Column-stacking vectorization."""
    return np.asarray(rho).reshape(-1, order="F")


def unvec(v, d):
    return np.asarray(v).reshape((d, d), order="F")


def liouvillian(spec):
    """Matrix of rho -> -i[H,rho] + rate (L rho L^dag - {L^dag L, rho}/2) on vec(rho)."""
    H = np.asarray(spec.H, dtype=complex)
    L = np.asarray(spec.L, dtype=complex)
    d = H.shape[0]
    I = np.eye(d)
    LdL = dagger(L) @ L
    # vec(A X B) = (B^T kron A) vec(X)
    unitary = -1j * (np.kron(I, H) - np.kron(H.T, I))
    diss = np.kron(L.conj(), L) - 0.5 * np.kron(I, LdL) - 0.5 * np.kron(LdL.T, I)
    return unitary + spec.rate * diss


def gksl_solve(spec, rho0, times):
    """rho(t) for each t in ``times`` (array of shape (len(times), d, d))."""
    if np.shape(spec.H)[0] > 16:
        raise ValueError("gksl_solve limited to dim <= 16")
    Lv = liouvillian(spec)
    d = np.shape(spec.H)[0]
    v0 = vec(rho0)
    return np.array([unvec(matexp(Lv, t) @ v0, d) for t in np.atleast_1d(times)])


def dephasing_decoherence_factor(pair, g, t):
    """exp(-4 g^2 Re int_0^t du int_0^u alpha(u, s) ds)."""
    return np.exp(-4.0 * g * g * pair.double_integral("alpha", t))


def conditional_integral_moments(kernel, r_s, tau):
    """Mean and variance of int_s^{s+tau} r dt for an O-U component given r_s."""
    a, c = kernel.a, kernel.c
    e1 = -math.expm1(-a * tau)
    mean = r_s * e1 / a
    var = (2 * c / a) * (tau - 2 * e1 / a + (-math.expm1(-2 * a * tau)) / (2 * a))
    return mean, var


class UnsupportedPair(ValueError):
    pass


def dephasing_conditional_norm_oracle(pair, lam, x_s, psi_s, s, t):
    """E[|psi_t|^2 | noise history up to s] for the diagonal (dephasing) model.

    ``lam`` are the eigenvalues of L (real), ``x_s`` the values at time s of
    the exponential terms of the x component (in ``pair.exp_x`` order) and
    ``psi_s`` the state at s in the eigenbasis. With dX = int_s^t x, Gaussian
    given the past with mean m and variance v,

        E|psi_l(t)|^2 = |psi_l(s)|^2 exp(2 l m + 2 l^2 v - 2 l^2 (A(t) - A(s))),

    A(t) = int_0^t du int_0^u (alpha + eta)(u, s') ds'. The y component only
    contributes a phase.
    """
    lam = np.asarray(lam)
    if np.any(np.abs(lam.imag) > 0):
        raise UnsupportedPair("conditional oracle needs a Hermitian diagonal coupling")
    lam = lam.real
    if not pair.stationary and pair.exp_x:
        raise UnsupportedPair("conditional oracle assumes stationary O-U components")
    x_s = np.atleast_1d(np.asarray(x_s, dtype=float))
    if len(x_s) != len(pair.exp_x):
        raise UnsupportedPair("need one prefix value per exponential x term")
    tau = t - s
    m = 0.0
    v = pair.white_x * tau
    for k, r in zip(pair.exp_x, x_s):
        mk, vk = conditional_integral_moments(k, r, tau)
        m += mk
        v += vk
    dA = float(pair.memory_decay(t) - pair.memory_decay(s))
    w = np.abs(np.asarray(psi_s)) ** 2
    return float(np.sum(w * np.exp(2 * lam * m + 2 * lam**2 * (v - dA))))


def stationary_prefix_moments(kernel, s):
    """Joint covariance of (int_0^s r, r_s) for a stationary O-U component."""
    a, c = kernel.a, kernel.c
    var_int = 2.0 * float(kernel.double_integral(s))
    cov = (c / a) * -math.expm1(-a * s)
    return np.array([[var_int, cov], [cov, c]])


def memory_coefficient(pair, t):
    """int_0^t alpha(t, s) ds, the scalar in O-bar = (int alpha) L for dephasing."""
    return pair.memory("alpha", t)


def dephasing_me_rhs(rho, H, L, f_alpha):
    """-i[H, rho] + f (L rho L - L L rho) + h.c., with f = int_0^t alpha(t, s) ds.

    This is the reduced equation with O-bar = f L, valid for the dephasing
    model (Hermitian L commuting with H).
    """
    comm = -1j * (H @ rho - rho @ H)
    term = f_alpha * (L @ rho @ L - L @ L @ rho)
    return comm + term + dagger(term)


@dataclass
class ResidualReport:
    times: np.ndarray
    residual: np.ndarray
    sigma: np.ndarray
    mc_se: np.ndarray
    fd_error: np.ndarray
    memory: np.ndarray
    passed: bool
    n_sigma: float = 3.0
    threshold: float = 3.0
    n_tests: int = 1

    def to_rows(self):
        return [dict(t=t, residual=r, sigma=s, mc_se=m, fd_error=f, memory=q)
                for t, r, s, m, f, q in zip(self.times, self.residual, self.sigma, self.mc_se,
                                            self.fd_error, self.memory)]


def me_residual_check(samples, times, model, pair, n_sigma=3.0):
    """Consistency of sampled trajectories with the non-closed reduced equation.

    ``samples`` are unnormalized states of shape (N, n_times, d) at uniformly
    spaced ``times``. Because the right side is linear in rho, the residual
    of the central difference is averaged per trajectory, which gives its
    Monte Carlo error directly. Finite-difference truncation error is
    estimated from the difference between spacings h and 2h.

    ``n_sigma`` is a family-wise level: with n entries tested over all times,
    each |residual|/sigma must stay below the Sidak threshold whose false
    alarm rate over the family equals that of one n_sigma test. A plain
    per-point 3 sigma cut over ~100 points would fire by chance about a
    quarter of the time.
    """
    samples = np.asarray(samples)
    times = np.asarray(times, dtype=float)
    h = np.diff(times)
    if not np.allclose(h, h[0], rtol=1e-9):
        raise ValueError("residual check needs uniformly spaced snapshots")
    h = float(h[0])
    if 1.0 / h < 20:
        raise ValueError("snapshot stride too coarse: need >= 20 points per unit time")
    N = samples.shape[0]
    P = samples[..., :, None] * samples[..., None, :].conj()
    H, L = model.H, model.L
    f = np.asarray(memory_coefficient(pair, times)) * np.ones_like(times)
    out_t, res, sig, mcs, fde, mem, zmax = [], [], [], [], [], [], []
    n_tests = 0
    iu = np.triu_indices(P.shape[-1])
    for j in range(2, len(times) - 2):
        fd1 = (P[:, j + 1] - P[:, j - 1]) / (2 * h)
        fd2 = (P[:, j + 2] - P[:, j - 2]) / (4 * h)
        rhs = np.einsum("ab,nbc->nac", H, P[:, j])
        rhs = -1j * (rhs - np.einsum("nab,bc->nac", P[:, j], H))
        LP = np.einsum("ab,nbc->nac", L, P[:, j])
        term = f[j] * (np.einsum("nab,bc->nac", LP, L) - np.einsum("ab,nbc->nac", L @ L, P[:, j]))
        rhs = rhs + term + np.conj(np.swapaxes(term, -1, -2))
        r = fd1 - rhs
        rmean = r.mean(axis=0)
        se = np.sqrt((r.real.var(axis=0, ddof=1) + r.imag.var(axis=0, ddof=1)) / N)
        fd_err = np.abs((fd2 - fd1).mean(axis=0)) / 3.0
        # roundoff floor so that noise-free entries do not give 0/0
        floor = ROUNDOFF * (1.0 + np.abs(rhs).mean(axis=0).max() + np.abs(fd1).mean(axis=0).max())
        sigma = np.sqrt(se**2 + fd_err**2 + floor**2)
        z = np.abs(rmean) / sigma
        k = np.unravel_index(np.argmax(z), z.shape)
        # rho is Hermitian: count the upper triangle, skip entries pinned at roundoff
        n_tests += int(np.count_nonzero(se[iu] > floor))
        zmax.append(float(z[k]))
        out_t.append(times[j])
        res.append(float(np.abs(rmean[k])))
        sig.append(float(sigma[k]))
        mcs.append(float(se[k]))
        fde.append(float(fd_err[k]))
        mem.append(float(f[j]))
    n_tests = max(n_tests, 1)
    p_family = math.erfc(n_sigma / math.sqrt(2))
    p_each = -math.expm1(math.log1p(-p_family) / n_tests)
    threshold = float(np.sqrt(2) * erfcinv(p_each))
    ok = bool(max(zmax, default=0.0) <= threshold)
    return ResidualReport(np.array(out_t), np.array(res), np.array(sig), np.array(mcs),
                          np.array(fde), np.array(mem), ok, n_sigma, threshold, n_tests)
