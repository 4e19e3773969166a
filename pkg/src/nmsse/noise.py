"""Complex Gaussian noise z*_t = x_t - i*y_t built from independent real parts.

Each real component is a sum of kernels. A ``White(w)`` kernel is the
autocovariance ``w*delta(t-s)`` and is carried as Brownian increments; an
``ExpDecay(c, a)`` kernel is ``c*exp(-a|t-s|)``, i.e. a stationary
Ornstein-Uhlenbeck process sampled at grid points. The Hermitian and
non-Hermitian correlations follow as

    alpha = <xx> + <yy>,    eta = <xx> - <yy>.

Integrals of a delta kernel over a half-line ending at the delta pick up half
of its weight: int_0^t w*delta(t-s) ds = w/2.
"""

from dataclasses import dataclass, field
import math

import numpy as np
import scipy.linalg
import scipy.signal

from .linalg import CholeskyFailure, cholesky_psd

MAX_DENSE_POINTS = 4096


@dataclass(frozen=True)
class White:
    weight: float

    def smooth(self, tau):
        return np.zeros_like(np.asarray(tau, dtype=float))

    def delta_weight(self):
        return self.weight

    def memory(self, t):
        """int_0^t k(t-s) ds."""
        return 0.5 * self.weight * np.ones_like(np.asarray(t, dtype=float))

    def double_integral(self, t):
        """int_0^t du int_0^u k(u-s) ds."""
        return 0.5 * self.weight * np.asarray(t, dtype=float)

    def total_integral(self):
        return self.weight

    def to_json(self):
        return {"type": "white", "weight": self.weight}


@dataclass(frozen=True)
class ExpDecay:
    c: float
    a: float

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"ExpDecay rate must be positive, got a={self.a}")

    def smooth(self, tau):
        return self.c * np.exp(-self.a * np.abs(np.asarray(tau, dtype=float)))

    def delta_weight(self):
        return 0.0

    def memory(self, t):
        t = np.asarray(t, dtype=float)
        return (self.c / self.a) * -np.expm1(-self.a * t)

    def double_integral(self, t):
        t = np.asarray(t, dtype=float)
        a = self.a
        return (self.c / a) * (t + np.expm1(-a * t) / a)

    def total_integral(self):
        return 2.0 * self.c / self.a

    def to_json(self):
        return {"type": "exp", "c": self.c, "a": self.a}


def kernel_from_json(d):
    kind = d.get("type")
    if kind == "white":
        return White(float(d["weight"]))
    if kind == "exp":
        return ExpDecay(float(d["c"]), float(d["a"]))
    raise ValueError(f"unknown kernel type {kind!r}")


def _as_kernels(k):
    if k is None:
        return ()
    if isinstance(k, (White, ExpDecay)):
        return (k,)
    return tuple(k)


@dataclass(frozen=True)
class CorrelationPair:
    """Noise specification by the kernels of its independent real parts x and y."""

    x: tuple = ()
    y: tuple = ()
    stationary: bool = True

    def __post_init__(self):
        object.__setattr__(self, "x", _as_kernels(self.x))
        object.__setattr__(self, "y", _as_kernels(self.y))

    @classmethod
    def from_json(cls, d):
        return cls(x=tuple(kernel_from_json(k) for k in _listify(d.get("x"))),
                   y=tuple(kernel_from_json(k) for k in _listify(d.get("y"))),
                   stationary=bool(d.get("stationary", True)))

    def to_json(self):
        return {"x": [k.to_json() for k in self.x], "y": [k.to_json() for k in self.y],
                "stationary": self.stationary}

    @property
    def white_x(self):
        return sum(k.weight for k in self.x if isinstance(k, White))

    @property
    def white_y(self):
        return sum(k.weight for k in self.y if isinstance(k, White))

    @property
    def exp_x(self):
        return tuple(k for k in self.x if isinstance(k, ExpDecay))

    @property
    def exp_y(self):
        return tuple(k for k in self.y if isinstance(k, ExpDecay))

    @property
    def kappa(self):
        """Weight of the delta in alpha + eta."""
        return 2.0 * self.white_x

    @property
    def is_white(self):
        return not self.exp_x and not self.exp_y

    def _component(self, which):
        if which == "alpha":
            return [(k, 1.0) for k in self.x] + [(k, 1.0) for k in self.y]
        if which == "eta":
            return [(k, 1.0) for k in self.x] + [(k, -1.0) for k in self.y]
        if which == "alpha+eta":
            return [(k, 2.0) for k in self.x]
        raise ValueError(f"unknown correlation {which!r}")

    def kernel_eval(self, which, tau):
        """(smooth part, delta coefficient) of alpha or eta at lag tau."""
        parts = self._component(which)
        smooth = sum(s * k.smooth(tau) for k, s in parts) if parts else 0.0 * np.asarray(tau, float)
        delta = sum(s * k.delta_weight() for k, s in parts)
        return smooth, float(delta)

    def memory(self, which, t):
        """int_0^t corr(t, s) ds (delta parts counted with half weight)."""
        parts = self._component(which)
        return sum((s * k.memory(t) for k, s in parts), 0.0 * np.asarray(t, dtype=float))

    def double_integral(self, which, t):
        parts = self._component(which)
        return sum((s * k.double_integral(t) for k, s in parts), 0.0 * np.asarray(t, dtype=float))

    def memory_decay(self, t):
        """A(t) = int_0^t du int_0^u (alpha+eta)(u, s) ds."""
        return self.double_integral("alpha+eta", t)


def _listify(v):
    if v is None:
        return []
    if isinstance(v, dict):
        return [v]
    return list(v)


def delta_constraint_residual(pair):
    """int |smooth part of (alpha+eta)(tau)| dtau, closed form.

    Returns (residual, kappa). The residual vanishes exactly when the x
    component has no exponential part, i.e. alpha + eta = kappa*delta.
    """
    residual = sum(2.0 * abs(k.total_integral()) for k in pair.exp_x)
    return float(residual), pair.kappa


@dataclass(frozen=True)
class TimeGrid:
    t_max: float
    dt: float

    def __post_init__(self):
        if not (self.t_max > 0 and self.dt > 0):
            raise ValueError("t_max and dt must be positive")
        n = round(self.t_max / self.dt)
        if n < 1:
            raise ValueError("grid needs at least one step")
        if abs(n * self.dt - self.t_max) > 1e-12 * self.t_max:
            raise ValueError(f"t_max={self.t_max} is not an integer multiple of dt={self.dt}")

    @property
    def n_steps(self):
        return int(round(self.t_max / self.dt))

    @property
    def times(self):
        return self.dt * np.arange(self.n_steps + 1)

    def index(self, t):
        k = t / self.dt
        ik = int(round(k))
        if abs(ik - k) > 1e-9 * max(1.0, abs(k)) or not 0 <= ik <= self.n_steps:
            raise ValueError(f"time {t} is not on the grid")
        return ik

    def refined(self, factor):
        return TimeGrid(self.t_max, self.dt / factor)


@dataclass
class NoiseRealization:
    """Sampled noise on a grid, possibly with leading batch dimensions.

    ``dw_x``/``dw_y`` are standard Brownian increments (variance dt) for the
    white parts; the physical contribution of step k to int z* dt is
    ``sqrt(white_x)*dw_x[k] - 1j*sqrt(white_y)*dw_y[k]``. ``x_exp``/``y_exp``
    hold one row per exponential kernel, sampled at the n+1 grid points.
    """

    grid: TimeGrid
    white_x: float
    white_y: float
    dw_x: np.ndarray
    dw_y: np.ndarray
    x_exp: np.ndarray
    y_exp: np.ndarray

    @property
    def batch_shape(self):
        return self.dw_x.shape[:-1]

    @property
    def colored_x(self):
        return self.x_exp.sum(axis=-2)

    @property
    def colored_y(self):
        return self.y_exp.sum(axis=-2)

    @property
    def colored_z(self):
        """Colored part of z*_t at the grid points."""
        return self.colored_x - 1j * self.colored_y

    def white_increments(self):
        """White part of int z* dt over each step."""
        return math.sqrt(self.white_x) * self.dw_x - 1j * math.sqrt(self.white_y) * self.dw_y

    def integrated(self):
        """Z*_t = int_0^t z*_s ds at the grid points; colored parts by trapezoid."""
        zc = self.colored_z
        step = 0.5 * self.grid.dt * (zc[..., 1:] + zc[..., :-1]) + self.white_increments()
        out = np.zeros(zc.shape, dtype=complex)
        np.cumsum(step, axis=-1, out=out[..., 1:])
        return out

    def take(self, i):
        return NoiseRealization(self.grid, self.white_x, self.white_y, self.dw_x[i],
                                self.dw_y[i], self.x_exp[i], self.y_exp[i])

    def coarsen(self, factor):
        """Same path on a grid with steps ``factor`` times longer."""
        factor = int(factor)
        g = TimeGrid(self.grid.t_max, self.grid.dt * factor)
        n = g.n_steps
        shp = self.dw_x.shape[:-1] + (n, factor)
        return NoiseRealization(g, self.white_x, self.white_y,
                                self.dw_x.reshape(shp).sum(-1), self.dw_y.reshape(shp).sum(-1),
                                self.x_exp[..., ::factor], self.y_exp[..., ::factor])


def stack(realizations):
    r0 = realizations[0]
    return NoiseRealization(r0.grid, r0.white_x, r0.white_y,
                            np.stack([r.dw_x for r in realizations]),
                            np.stack([r.dw_y for r in realizations]),
                            np.stack([r.x_exp for r in realizations]),
                            np.stack([r.y_exp for r in realizations]))


def ou_coefficients(kernel, dt):
    phi = math.exp(-kernel.a * dt)
    sigma = math.sqrt(max(kernel.c, 0.0) * -math.expm1(-2.0 * kernel.a * dt))
    return phi, sigma


def _ar1(start, innovations, phi):
    """r_0 = start, r_{k+1} = phi*r_k + innovations[k]; returns n+1 values."""
    x = np.empty(innovations.shape[:-1] + (innovations.shape[-1] + 1,))
    x[..., 0] = start
    x[..., 1:] = innovations
    return scipy.signal.lfilter([1.0], [1.0, -phi], x, axis=-1)


def sample_ou_exact(kernel, grid, rng, stationary=True, start=None):
    """Exact AR(1) samples of the O-U process with autocovariance c*exp(-a|tau|)."""
    n = grid.n_steps
    if kernel.c == 0.0:
        return np.zeros(n + 1)
    phi, sigma = ou_coefficients(kernel, grid.dt)
    if start is None:
        xi0 = rng.standard_normal()
        start = math.sqrt(kernel.c) * xi0 if stationary else 0.0
    innov = sigma * rng.standard_normal(n)
    return _ar1(start, innov, phi)


def sample_white_increments(weight, grid, rng):
    """Standard Brownian increments ~ N(0, dt); zeros (and no draws) when weight is 0."""
    if weight == 0.0:
        return np.zeros(grid.n_steps)
    return math.sqrt(grid.dt) * rng.standard_normal(grid.n_steps)


def covariance_matrix(kernels, times):
    """Dense covariance of the smooth parts of a kernel sum at the given times."""
    tau = np.subtract.outer(times, times)
    c = np.zeros_like(tau)
    for k in _as_kernels(kernels):
        c += k.smooth(tau)
    return c


class NoisePSDError(ValueError):
    def __init__(self, failure):
        super().__init__(failure.describe())
        self.failure = failure


def sample_general_cholesky(kernels, grid, rng, size=None):
    """Sample the smooth part of a kernel sum on the grid through a dense Cholesky factor."""
    n = grid.n_steps + 1
    if n > MAX_DENSE_POINTS:
        raise ValueError(f"dense sampler limited to {MAX_DENSE_POINTS} points")
    c = covariance_matrix(kernels, grid.times)
    if not np.any(c):
        return np.zeros((n,) if size is None else (size, n))
    chol = cholesky_psd(c)
    if isinstance(chol, CholeskyFailure):
        raise NoisePSDError(chol)
    xi = rng.standard_normal(n if size is None else (size, n))
    return xi @ chol.T


def sample_realization(pair, grid, rng, method="exact"):
    """One noise path. Draw order: x white, x exp terms, y white, y exp terms."""
    n = grid.n_steps

    def component(white, exps):
        dw = sample_white_increments(white, grid, rng)
        rows = []
        for k in exps:
            if method == "exact":
                rows.append(sample_ou_exact(k, grid, rng, stationary=pair.stationary))
            elif method == "cholesky":
                rows.append(sample_general_cholesky(k, grid, rng))
            else:
                raise ValueError(f"unknown sampling method {method!r}")
        return dw, (np.array(rows) if rows else np.zeros((0, n + 1)))

    dwx, xe = component(pair.white_x, pair.exp_x)
    dwy, ye = component(pair.white_y, pair.exp_y)
    return NoiseRealization(grid, pair.white_x, pair.white_y, dwx, dwy, xe, ye)


def sample_batch(pair, grid, rngs, method="exact"):
    return stack([sample_realization(pair, grid, r, method) for r in rngs])


def gaussian_condition(cov, observed_idx, new_idx, observed_values):
    """Conditional mean and covariance of a zero-mean Gaussian vector (Schur complement)."""
    c11 = cov[np.ix_(observed_idx, observed_idx)]
    c21 = cov[np.ix_(new_idx, observed_idx)]
    c22 = cov[np.ix_(new_idx, new_idx)]
    gain = scipy.linalg.solve(c11, c21.T, assume_a="pos").T
    mean = gain @ observed_values
    ccov = c22 - gain @ c21.T
    return mean, 0.5 * (ccov + ccov.T)


def _continue_one(prefix, k_s, pair, rng, method):
    grid = prefix.grid
    n = grid.n_steps
    m = n - k_s

    def white(w, dw_prefix):
        out = dw_prefix.copy()
        if w != 0.0:
            out[k_s:] = math.sqrt(grid.dt) * rng.standard_normal(m)
        else:
            out[k_s:] = 0.0
        return out

    def colored(kernels, rows_prefix):
        out = rows_prefix.copy()
        for j, k in enumerate(kernels):
            if k.c == 0.0:
                out[j, k_s + 1:] = 0.0
                continue
            if m == 0:
                continue
            if method == "markov":
                phi, sigma = ou_coefficients(k, grid.dt)
                out[j, k_s:] = _ar1(out[j, k_s], sigma * rng.standard_normal(m), phi)
            elif method == "schur":
                t = grid.times
                cov = covariance_matrix(k, t)
                obs = np.arange(k_s + 1)
                new = np.arange(k_s + 1, n + 1)
                mean, ccov = gaussian_condition(cov, obs, new, out[j, :k_s + 1])
                chol = cholesky_psd(ccov)
                if isinstance(chol, CholeskyFailure):
                    raise NoisePSDError(chol)
                out[j, k_s + 1:] = mean + chol @ rng.standard_normal(m)
            else:
                raise ValueError(f"unknown continuation method {method!r}")
        return out

    dwx = white(pair.white_x, prefix.dw_x)
    xe = colored(pair.exp_x, prefix.x_exp)
    dwy = white(pair.white_y, prefix.dw_y)
    ye = colored(pair.exp_y, prefix.y_exp)
    return NoiseRealization(grid, prefix.white_x, prefix.white_y, dwx, dwy, xe, ye)


def condition_continue(prefix, k_s, pair, rng, method="markov"):
    """Resample the noise after grid index ``k_s`` from its law given the path up to ``k_s``.

    Values at indices <= k_s (and white increments of steps < k_s) are kept.
    ``rng`` may be a single generator or a sequence of generators, one per
    continuation, in which case a batch is returned.
    """
    if prefix.batch_shape != ():
        raise ValueError("prefix must be a single path")
    if not 0 <= k_s <= prefix.grid.n_steps:
        raise IndexError(f"branch index {k_s} outside grid")
    if not pair.stationary and method == "schur":
        raise ValueError("dense conditioning assumes the stationary law")
    if isinstance(rng, np.random.Generator):
        return _continue_one(prefix, k_s, pair, rng, method)
    return stack([_continue_one(prefix, k_s, pair, r, method) for r in rng])


@dataclass
class ValidationReport:
    accepted: bool
    kappa: float
    residual: float
    reasons: list = field(default_factory=list)
    min_eigenvalue: float = 0.0

    def to_json(self):
        return {"accepted": self.accepted, "kappa": self.kappa, "residual": self.residual,
                "reasons": list(self.reasons), "min_eigenvalue": self.min_eigenvalue}


def validate_pair(pair, probe_points=64):
    """Check that both real components carry valid autocovariances.

    The structural check (nonnegative weights and amplitudes) decides; the
    joint covariance of (x, y) on a probe grid, with delta parts binned as
    w/dt on the diagonal, is also assembled and tested for PSD.
    """
    reasons = []
    for name, comp in (("x", pair.x), ("y", pair.y)):
        for k in comp:
            if isinstance(k, White) and k.weight < 0:
                reasons.append(f"{name}: white weight {k.weight} < 0 (negative variance kernel)")
            if isinstance(k, ExpDecay) and k.c < 0:
                reasons.append(f"{name}: exponential amplitude c={k.c} < 0 (negative variance kernel)")
    rates = [k.a for k in pair.exp_x + pair.exp_y]
    dt = min([0.1] + [0.25 / a for a in rates])
    n = min(int(probe_points), 128)
    t = dt * np.arange(n)
    blocks = []
    for comp in (pair.x, pair.y):
        c = covariance_matrix(tuple(k for k in comp if isinstance(k, ExpDecay)), t)
        c += np.eye(n) * sum(k.weight for k in comp if isinstance(k, White)) / dt
        blocks.append(c)
    joint = scipy.linalg.block_diag(*blocks)
    scale = max(1.0, float(np.max(np.abs(joint))))
    lam = float(np.linalg.eigvalsh(joint)[0])
    if lam < -1e-10 * scale:
        reasons.append(f"discretized joint covariance not PSD (min eigenvalue {lam:.6g})")
    residual, kappa = delta_constraint_residual(pair)
    return ValidationReport(accepted=not reasons, kappa=kappa, residual=residual,
                            reasons=reasons, min_eigenvalue=lam)


@dataclass
class NoiseStatistics:
    lags: np.ndarray
    alpha_pred: np.ndarray
    alpha_est: np.ndarray
    alpha_se: np.ndarray
    eta_pred: np.ndarray
    eta_est: np.ndarray
    eta_se: np.ndarray
    imag_alpha_est: np.ndarray
    imag_alpha_se: np.ndarray
    mean_max_z: float
    white_alpha: tuple
    white_eta: tuple

    def z_scores(self):
        """All z-scores that should be standard-normal-ish under the kernel prediction."""
        with np.errstate(divide="ignore", invalid="ignore"):
            za = (self.alpha_est - self.alpha_pred) / self.alpha_se
            ze = (self.eta_est - self.eta_pred) / self.eta_se
            zi = self.imag_alpha_est / self.imag_alpha_se
        zw = []
        for est, se, pred in (self.white_alpha, self.white_eta):
            if se > 0:
                zw.append((est - pred) / se)
            elif abs(est - pred) > 1e-12:
                zw.append(np.inf)
        return np.concatenate([_finite_z(za, self.alpha_se), _finite_z(ze, self.eta_se),
                               _finite_z(zi, self.imag_alpha_se), np.array(zw, dtype=float)])

    def passed(self, n_se=5.0):
        return bool(np.all(np.abs(self.z_scores()) <= n_se) and abs(self.mean_max_z) <= n_se)


def _finite_z(z, se):
    return np.where(se > 0, np.nan_to_num(z, nan=0.0, posinf=np.inf, neginf=-np.inf), 0.0)


def noise_statistics(pair, grid, rngs, lags):
    """Empirical correlations of z from independent realizations.

    Colored parts are compared at the given lags (grid multiples), averaging
    products over all admissible reference times inside each realization and
    taking standard errors across realizations. White parts are compared
    through the integral of z over the whole grid.
    """
    lag_idx = [grid.index(l) for l in lags]
    real = sample_batch(pair, grid, rngs)
    x = real.colored_x
    y = real.colored_y
    n_real = x.shape[0]

    def per_real(prod_fn, k):
        n = x.shape[-1]
        return prod_fn(slice(k, n), slice(0, n - k)).mean(axis=-1)

    a_est, a_se, e_est, e_se, ia_est, ia_se = ([] for _ in range(6))
    for k in lag_idx:
        # z_t z*_s with z = x + i y
        za = per_real(lambda a, b: (x[:, a] + 1j * y[:, a]) * (x[:, b] - 1j * y[:, b]), k)
        ze = per_real(lambda a, b: (x[:, a] - 1j * y[:, a]) * (x[:, b] - 1j * y[:, b]), k)
        for arr, est, se in ((za.real, a_est, a_se), (ze.real, e_est, e_se), (za.imag, ia_est, ia_se)):
            est.append(arr.mean())
            se.append(arr.std(ddof=1) / math.sqrt(n_real))
    lags = np.asarray(lags, dtype=float)
    a_pred = pair.kernel_eval("alpha", lags)[0] * np.ones_like(lags)
    e_pred = pair.kernel_eval("eta", lags)[0] * np.ones_like(lags)
    # mean of z* at the first grid point
    zbar = real.colored_z[:, 0]
    zr = zbar.real
    mean_z = zr.mean() / (zr.std(ddof=1) / math.sqrt(n_real)) if zr.std() > 0 else 0.0
    wz = real.white_increments().sum(axis=-1)
    t = grid.t_max
    wa = (wz * wz.conj()).real
    we = (wz * wz).real
    white_alpha = (wa.mean(), wa.std(ddof=1) / math.sqrt(n_real), (pair.white_x + pair.white_y) * t)
    white_eta = (we.mean(), we.std(ddof=1) / math.sqrt(n_real), (pair.white_x - pair.white_y) * t)
    return NoiseStatistics(lags, a_pred, np.array(a_est), np.array(a_se), e_pred,
                           np.array(e_est), np.array(e_se), np.array(ia_est), np.array(ia_se),
                           float(mean_z), white_alpha, white_eta)


__all__ = [
    "White", "ExpDecay", "CorrelationPair", "TimeGrid", "NoiseRealization",
    "delta_constraint_residual", "sample_ou_exact", "sample_white_increments",
    "sample_general_cholesky", "sample_realization", "sample_batch", "condition_continue",
    "validate_pair", "noise_statistics",
]
