"""Propagation of unnormalized trajectories of the linear Gaussian SSE.

Three integrators share one driver, :func:`propagate`:

``em_ito``
    Euler-Maruyama for the time-convolutionless equation obtained when
    alpha + eta = kappa*delta. The white term z*_t L psi is read in the
    Stratonovich sense, so the simulated Ito equation is

        d psi = [-iH - (kappa/4) L^2 - (w_y/2) L^2] psi dt - i y_t L psi dt
                + sqrt(kappa/2) L psi dW_x - i sqrt(w_y) L psi dW_y,

    with w_y the white weight of the y component (usually 0). The Ito
    correction +(1/2)B^2 of each noise term B turns the -(kappa/2) L^2 of the
    time-convolutionless form into -(kappa/4) L^2. For Hermitian L the Ito
    drift of |psi|^2 is then psi^H[(A + A^H) + B_x^H B_x + B_y^H B_y]psi
    = -(kappa/2)<L^2> - w_y<L^2> + (kappa/2)<L^2> + w_y<L^2> = 0, so the
    squared norm is a martingale. Reading the same term in the Ito sense
    would leave a drift of +(kappa/2)<L^2>.

``heun_strat``
    Heun predictor-corrector treating z*_t as an ordinary function of time
    (colored samples at both step ends; white parts enter as piecewise
    constant dW/dt on each step, which converges to the Stratonovich
    solution). The memory integral uses O(t, s, z*) = L,

        -int_0^t [alpha(t,s) L^dag + eta(t,s) L] L ds psi,

    exact for the dephasing model and on the time-convolutionless branch.

``dephasing_exact``
    Closed-form solution for diagonal H and L, where O(t, s, z*) = L holds
    exactly: psi_l(t) = psi_l(0) exp(-i E_l t + l Z*_t - |l|^2 A_alpha(t)
    - l^2 A_eta(t)), A_c(t) = int_0^t du int_0^u c(u, s) ds.
"""

from dataclasses import dataclass
import math
import warnings

import numpy as np

from .linalg import dagger

OVERFLOW = 1e100
METHODS = ("em_ito", "heun_strat", "dephasing_exact")


class IntegratorError(ValueError):
    pass


class TruncationWarning(UserWarning):
    pass


@dataclass
class TrajectoryResult:
    """Output of :func:`propagate` for a batch of trajectories.

    ``states`` has shape (batch, n_snapshots, dim) at grid indices
    ``indices``; ``norms_sq`` has shape (batch, k_end - k_start + 1) and
    holds |psi|^2 at every step from ``k_start``.
    """

    grid: object
    indices: np.ndarray
    states: np.ndarray
    norms_sq: np.ndarray
    k_start: int
    aborted: np.ndarray
    abort_step: np.ndarray

    @property
    def times(self):
        return self.grid.dt * self.indices

    def norm_at(self, k):
        return self.norms_sq[..., k - self.k_start]

    def state_at(self, k):
        j = np.searchsorted(self.indices, k)
        if j >= len(self.indices) or self.indices[j] != k:
            raise KeyError(f"grid index {k} was not recorded")
        return self.states[:, j]


def snapshot_indices(grid, n_snapshots=100, extra=()):
    stride = max(1, grid.n_steps // max(1, n_snapshots))
    idx = set(range(0, grid.n_steps + 1, stride)) | {grid.n_steps} | {int(k) for k in extra}
    return np.array(sorted(idx))


def check_compatible(model, pair, method):
    if method not in METHODS:
        raise IntegratorError(f"unknown integrator {method!r}; choose from {METHODS}")
    if method == "em_ito" and pair.exp_x:
        raise IntegratorError("em_ito needs a purely white x component (zero delta-constraint residual)")
    if method == "dephasing_exact" and not model.is_diagonal:
        raise IntegratorError("dephasing_exact needs diagonal H and L (dephasing model)")


def step_em_ito(model, psi, dw, y, kappa, dt, dw_y=0.0, white_y=0.0):
    """One Ito Euler-Maruyama step of the time-convolutionless SSE.

    ``dw`` is the standard Brownian increment of x (variance dt), ``y`` the
    colored y value at the left end of the step.
    """
    L = model.L
    A = -1j * model.H - (0.25 * kappa + 0.5 * white_y) * (L @ L)
    psi = np.asarray(psi, dtype=complex)
    Lpsi = psi @ L.T
    dw = np.asarray(dw)[..., None]
    y = np.asarray(y)[..., None]
    dw_y = np.asarray(dw_y)[..., None]
    noise = math.sqrt(0.5 * kappa) * dw - 1j * math.sqrt(white_y) * dw_y
    return psi + dt * (psi @ A.T) - 1j * dt * y * Lpsi + noise * Lpsi


def _drift_matrix(model, mem_alpha, mem_eta):
    L = model.L
    return -1j * model.H - mem_alpha * (dagger(L) @ L) - mem_eta * (L @ L)


def step_heun_strat(model, psi, z0, z1, dt, mem0=(0.0, 0.0), mem1=(0.0, 0.0)):
    """One Heun step with noise values z0, z1 (complex z*) at the step ends.

    ``mem0``/``mem1`` are the memory coefficients (int_0^t alpha, int_0^t eta)
    at the two ends.
    """
    psi = np.asarray(psi, dtype=complex)
    L = model.L
    A0 = _drift_matrix(model, *mem0)
    A1 = _drift_matrix(model, *mem1)
    z0 = np.asarray(z0)[..., None]
    z1 = np.asarray(z1)[..., None]
    f0 = psi @ A0.T + z0 * (psi @ L.T)
    pred = psi + dt * f0
    f1 = pred @ A1.T + z1 * (pred @ L.T)
    return psi + 0.5 * dt * (f0 + f1)


def _norm_sq(psi):
    return np.sum(psi.real ** 2 + psi.imag ** 2, axis=-1)


def _prepare(model, noise, psi_start, k_start, k_end, record):
    grid = noise.grid
    batch = noise.batch_shape
    if len(batch) > 1:
        raise IntegratorError("noise batch must be one-dimensional")
    squeeze = batch == ()
    if k_end is None:
        k_end = grid.n_steps
    if not 0 <= k_start <= k_end <= grid.n_steps:
        raise IntegratorError(f"bad step range [{k_start}, {k_end}]")
    if psi_start is None:
        psi_start = model.psi0
    psi = np.array(psi_start, dtype=complex)
    if record is None:
        record = snapshot_indices(grid)
    record = np.array(sorted({int(k) for k in record if k_start <= k <= k_end} | {k_start, k_end}))
    return grid, squeeze, k_end, psi, record


def propagate(model, pair, noise, method="em_ito", psi_start=None, k_start=0, k_end=None,
              record=None):
    """Propagate psi over grid steps k_start..k_end driven by ``noise``.

    ``noise`` may be a single path or a batch; ``psi_start`` may be one state
    (broadcast) or one state per batch entry. Trajectories whose squared norm
    exceeds 1e100 (or becomes non-finite) are aborted and flagged.
    """
    check_compatible(model, pair, method)
    grid, squeeze, k_end, psi, record = _prepare(model, noise, psi_start, k_start, k_end, record)
    if squeeze:
        noise = _batched(noise)
    B = noise.batch_shape[0]
    psi = np.broadcast_to(psi, (B, model.dim)).copy()
    if method == "dephasing_exact":
        res = _propagate_exact(model, pair, noise, psi, k_start, k_end, record)
    else:
        res = _propagate_steps(model, pair, noise, method, psi, k_start, k_end, record)
    if model.tag == "qbm":
        top = _top_level_weight(res.states)
        if np.any(top > 1e-3):
            warnings.warn(f"oscillator truncation: top Fock level carries up to {top.max():.3g} of the norm",
                          TruncationWarning, stacklevel=2)
    if squeeze:
        res.states = res.states[0]
        res.norms_sq = res.norms_sq[0]
        res.aborted = res.aborted[0]
        res.abort_step = res.abort_step[0]
    return res


def _top_level_weight(states):
    n2 = _norm_sq(states)
    return np.abs(states[..., -1]) ** 2 / np.where(n2 > 0, n2, 1.0)


def _batched(noise):
    from .noise import NoiseRealization
    return NoiseRealization(noise.grid, noise.white_x, noise.white_y, noise.dw_x[None],
                            noise.dw_y[None], noise.x_exp[None], noise.y_exp[None])


def _propagate_steps(model, pair, noise, method, psi, k_start, k_end, record):
    grid = noise.grid
    dt = grid.dt
    B, d = psi.shape
    n_out = k_end - k_start + 1
    norms = np.empty((B, n_out))
    states = np.empty((B, len(record), d), dtype=complex)
    aborted = np.zeros(B, dtype=bool)
    abort_step = np.full(B, -1)
    LT = np.ascontiguousarray(model.L.T)
    zc = noise.colored_z
    dzw = noise.white_increments()
    rec_pos = {int(k): j for j, k in enumerate(record)}

    if method == "em_ito":
        kappa = pair.kappa
        wy = pair.white_y
        AT = np.ascontiguousarray(
            (-1j * model.H - (0.25 * kappa + 0.5 * wy) * (model.L @ model.L)).T)
        yc = noise.colored_y
    else:
        t = grid.times
        ma = pair.memory("alpha", t) * np.ones_like(t)
        me = pair.memory("eta", t) * np.ones_like(t)
        LdL = dagger(model.L) @ model.L
        LL = model.L @ model.L
        base = -1j * model.H
        zw = dzw / dt

    def record_state(k, psi):
        n2 = _norm_sq(psi)
        bad = ~np.isfinite(n2) | (n2 > OVERFLOW)
        if np.any(bad & ~aborted):
            new = bad & ~aborted
            aborted[new] = True
            abort_step[new] = k
        if np.any(aborted):
            psi[aborted] = 0.0
            n2 = np.where(aborted, np.nan, n2)
        norms[:, k - k_start] = n2
        if k in rec_pos:
            states[:, rec_pos[k]] = psi

    record_state(k_start, psi)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(k_start, k_end):
            if method == "em_ito":
                Lpsi = psi @ LT
                incr = dzw[:, k] - 1j * dt * yc[:, k]
                psi = psi + dt * (psi @ AT) + incr[:, None] * Lpsi
            else:
                A0T = (base - ma[k] * LdL - me[k] * LL).T
                A1T = (base - ma[k + 1] * LdL - me[k + 1] * LL).T
                z0 = (zc[:, k] + zw[:, k])[:, None]
                z1 = (zc[:, k + 1] + zw[:, k])[:, None]
                f0 = psi @ A0T + z0 * (psi @ LT)
                pred = psi + dt * f0
                f1 = pred @ A1T + z1 * (pred @ LT)
                psi = psi + 0.5 * dt * (f0 + f1)
            record_state(k + 1, psi)
    return TrajectoryResult(grid, record, states, norms, k_start, aborted, abort_step)


def _propagate_exact(model, pair, noise, psi, k_start, k_end, record):
    grid = noise.grid
    lam = np.diag(model.L)
    E = np.diag(model.H).real
    t = grid.times[k_start:k_end + 1] - 0.0
    Z = noise.integrated()[:, k_start:k_end + 1]
    Z = Z - Z[:, :1]
    da = pair.double_integral("alpha", grid.times[k_start:k_end + 1]) - pair.double_integral("alpha", grid.times[k_start])
    de = pair.double_integral("eta", grid.times[k_start:k_end + 1]) - pair.double_integral("eta", grid.times[k_start])
    da = da * np.ones_like(t)
    de = de * np.ones_like(t)
    tau = t - t[0]
    expo = (-1j * E[None, None, :] * tau[None, :, None]
            + lam[None, None, :] * Z[:, :, None]
            - (np.abs(lam) ** 2)[None, None, :] * da[None, :, None]
            - (lam ** 2)[None, None, :] * de[None, :, None])
    with np.errstate(over="ignore", invalid="ignore"):
        traj = psi[:, None, :] * np.exp(expo)
        norms = _norm_sq(traj)
    bad = ~np.isfinite(norms) | (norms > OVERFLOW)
    aborted = bad.any(axis=1)
    abort_step = np.where(aborted, np.argmax(bad, axis=1) + k_start, -1)
    if np.any(aborted):
        norms[aborted] = np.nan
        traj[aborted] = 0.0
    states = traj[:, record - k_start]
    return TrajectoryResult(grid, record, states, norms, k_start, aborted, abort_step)


def propagate_dephasing_exact(model, pair, noise, **kw):
    if model.tag not in ("dephasing", "custom") or not model.is_diagonal:
        raise IntegratorError("propagate_dephasing_exact needs the dephasing model")
    return propagate(model, pair, noise, "dephasing_exact", **kw)


@dataclass
class PropagatorSeries:
    """G_t at the recorded grid indices, with G at index k_start equal to the identity."""

    indices: np.ndarray
    G: np.ndarray
    grid: object

    def at(self, k):
        j = np.searchsorted(self.indices, k)
        if j >= len(self.indices) or self.indices[j] != k:
            raise KeyError(f"grid index {k} was not recorded")
        return self.G[j]

    def two_time(self, k_s, k_t, max_cond=1e12):
        """A_s^t = G_t G_s^{-1}."""
        Gs = self.at(k_s)
        cond = np.linalg.cond(Gs)
        if not np.isfinite(cond) or cond > max_cond:
            raise IntegratorError(f"G_s is numerically singular (condition number {cond:.3g})")
        return np.linalg.solve(Gs.T, self.at(k_t).T).T


def propagate_propagator(model, pair, noise, method="em_ito", record=None, max_dim=16):
    """Evolve every column of G (G_0 = identity) under one noise path."""
    if model.dim > max_dim:
        raise IntegratorError(f"propagator evolution limited to dim <= {max_dim}")
    if noise.batch_shape != ():
        raise IntegratorError("propagator evolution takes a single noise path")
    d = model.dim
    from .noise import NoiseRealization
    bn = NoiseRealization(noise.grid, noise.white_x, noise.white_y,
                          np.broadcast_to(noise.dw_x, (d,) + noise.dw_x.shape),
                          np.broadcast_to(noise.dw_y, (d,) + noise.dw_y.shape),
                          np.broadcast_to(noise.x_exp, (d,) + noise.x_exp.shape),
                          np.broadcast_to(noise.y_exp, (d,) + noise.y_exp.shape))
    res = propagate(model, pair, bn, method, psi_start=np.eye(d, dtype=complex), record=record)
    if np.any(res.aborted):
        raise IntegratorError("propagator columns overflowed")
    G = np.transpose(res.states, (1, 2, 0))
    return PropagatorSeries(res.indices, G, noise.grid)
