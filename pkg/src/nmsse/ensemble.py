"""Reproducible Monte Carlo over trajectories.

Work is split into fixed batches of trajectory indices. Every trajectory
draws its noise from its own counter-based stream keyed by
(master_seed, purpose, index), each batch is propagated the same way no matter
which worker runs it, and partial sums are merged along a binary tree fixed
by batch index. Results are therefore bit-identical for any worker count.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
import math
import os

import numpy as np
from scipy import optimize, stats

from . import rng as rngmod
from .integrators import check_compatible, propagate, snapshot_indices
from .linalg import trace_distance
from .noise import (CorrelationPair, TimeGrid, condition_continue, sample_batch,
                    sample_realization, validate_pair)
from .oracles import UnsupportedPair, dephasing_conditional_norm_oracle

WORKERS_ENV = "NMSSE_WORKERS"
BATCH_SIZE = 64
CONTINUATION_CHUNK = 250
MAX_ABORT_FRACTION = 0.01
Z_THRESHOLD = 3.0
Z_FRACTION = 0.01
BINOMIAL_LEVEL = 0.01
P_EXCEED = 2.0 * stats.norm.sf(Z_THRESHOLD)


class ConfigError(ValueError):
    pass


class AbortError(RuntimeError):
    def __init__(self, n_aborted, n_total):
        super().__init__(f"{n_aborted} of {n_total} trajectories aborted on norm overflow "
                         f"(limit {MAX_ABORT_FRACTION:.0%})")
        self.n_aborted = n_aborted
        self.n_total = n_total


def default_workers():
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


@dataclass(frozen=True)
class BranchParams:
    s: float
    m: int = 1000
    n_prefixes: int = 64
    offsets: tuple = (0.1, 0.5, 1.0)
    method: str = "markov"


@dataclass(frozen=True)
class ExperimentConfig:
    model: object
    pair: CorrelationPair
    grid: TimeGrid
    n_trajectories: int = 1000
    master_seed: int = 0
    integrator: str = "em_ito"
    n_snapshots: int = 100
    record_times: tuple = ()
    branch: BranchParams = None

    def record_indices(self):
        extra = [self.grid.index(t) for t in self.record_times]
        return snapshot_indices(self.grid, self.n_snapshots, extra)

    def branch_indices(self):
        b = self.branch
        k_s = self.grid.index(b.s)
        return k_s, [self.grid.index(b.s + o) for o in b.offsets]


def validate_config(cfg, need_branch=False):
    rep = validate_pair(cfg.pair)
    if not rep.accepted:
        raise ConfigError("noise pair rejected: " + "; ".join(rep.reasons))
    try:
        check_compatible(cfg.model, cfg.pair, cfg.integrator)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.n_trajectories < 1:
        raise ConfigError("n_trajectories must be positive")
    for t in cfg.record_times:
        try:
            cfg.grid.index(t)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if need_branch:
        b = cfg.branch
        if b is None:
            raise ConfigError("branching parameters missing")
        if not 0 < b.s < cfg.grid.t_max:
            raise ConfigError(f"branch time s={b.s} must lie strictly inside (0, t_max)")
        if b.m < 100:
            raise ConfigError(f"need at least 100 continuations per prefix, got {b.m}")
        if b.n_prefixes < 1:
            raise ConfigError("n_prefixes must be positive")
        try:
            cfg.branch_indices()
        except ValueError as exc:
            raise ConfigError(f"branch checkpoints must lie on the grid within t_max: {exc}") from None
        if any(o <= 0 for o in b.offsets):
            raise ConfigError("checkpoint offsets must be positive")
    return rep


def parallel_map(fn, items, workers=None):
    """Ordered map, in-process for one worker, otherwise over a process pool."""
    items = list(items)
    workers = default_workers() if workers is None else int(workers)
    if workers <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as ex:
        return list(ex.map(fn, items))


def tree_reduce(parts, merge):
    """Pairwise reduction whose shape depends only on len(parts)."""
    parts = list(parts)
    if not parts:
        raise ValueError("nothing to reduce")
    while len(parts) > 1:
        nxt = [merge(parts[i], parts[i + 1]) for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


@dataclass
class Accumulator:
    """Sums over trajectories at each snapshot (aborted trajectories excluded)."""

    count: int
    n_aborted: int
    s_n: np.ndarray
    s_n2: np.ndarray
    s_P: np.ndarray
    s_Pr2: np.ndarray
    s_Pi2: np.ndarray
    s_Prn: np.ndarray
    s_Pin: np.ndarray
    samples: list = field(default_factory=list)

    @classmethod
    def from_states(cls, states, aborted, keep_samples=False):
        ok = ~aborted
        psi = states[ok]
        n = np.sum(psi.real**2 + psi.imag**2, axis=-1)
        P = psi[..., :, None] * psi[..., None, :].conj()
        nn = n[..., None, None]
        return cls(count=int(ok.sum()), n_aborted=int(aborted.sum()),
                   s_n=n.sum(axis=0), s_n2=(n * n).sum(axis=0), s_P=P.sum(axis=0),
                   s_Pr2=(P.real**2).sum(axis=0), s_Pi2=(P.imag**2).sum(axis=0),
                   s_Prn=(P.real * nn).sum(axis=0), s_Pin=(P.imag * nn).sum(axis=0),
                   samples=[psi] if keep_samples else [])

    def merge(self, other):
        return Accumulator(self.count + other.count, self.n_aborted + other.n_aborted,
                           self.s_n + other.s_n, self.s_n2 + other.s_n2, self.s_P + other.s_P,
                           self.s_Pr2 + other.s_Pr2, self.s_Pi2 + other.s_Pi2,
                           self.s_Prn + other.s_Prn, self.s_Pin + other.s_Pin,
                           self.samples + other.samples)


@dataclass
class EnsembleStats:
    times: np.ndarray
    mean_norm_sq: np.ndarray
    se_norm_sq: np.ndarray
    rho: np.ndarray
    rho_se_re: np.ndarray
    rho_se_im: np.ndarray
    raw_rho: np.ndarray
    raw_trace: np.ndarray
    ess: np.ndarray
    n_used: int
    n_aborted: int
    samples: np.ndarray = None

    @property
    def dim(self):
        return self.rho.shape[-1]

    def trace_distance_se(self, other=None):
        """RMS scale of the trace distance error at each time.

        For Hermitian D, (1/2)||D||_1 <= (1/2) sqrt(d) ||D||_F, and the
        expected squared Frobenius error is the sum of entry variances.
        """
        v = self.rho_se_re**2 + self.rho_se_im**2
        if other is not None:
            v = v + other.rho_se_re**2 + other.rho_se_im**2
        return 0.5 * np.sqrt(self.dim * v.sum(axis=(-1, -2)))


def finalize(acc, times):
    N = acc.count
    if N == 0:
        raise AbortError(acc.n_aborted, acc.n_aborted)
    mean_n = acc.s_n / N
    var_n = (acc.s_n2 / N - mean_n**2) * (N / max(N - 1, 1))
    se_n = np.sqrt(np.maximum(var_n, 0.0) / N)
    rho = acc.s_P / acc.s_n[:, None, None]
    En2 = (acc.s_n2 / N)[:, None, None]
    corr = N / max(N - 1, 1)

    def ratio_se(sq, cross, part):
        var = (sq / N - 2 * part * cross / N + part**2 * En2) * corr
        return np.sqrt(np.maximum(var, 0.0) / N) / mean_n[:, None, None]

    se_re = ratio_se(acc.s_Pr2, acc.s_Prn, rho.real)
    se_im = ratio_se(acc.s_Pi2, acc.s_Pin, rho.imag)
    rho = 0.5 * (rho + np.conj(np.swapaxes(rho, -1, -2)))
    ess = acc.s_n**2 / np.where(acc.s_n2 > 0, acc.s_n2, 1.0)
    samples = np.concatenate(acc.samples, axis=0) if acc.samples else None
    return EnsembleStats(times, mean_n, se_n, rho, se_re, se_im, acc.s_P / N, mean_n, ess,
                         N, acc.n_aborted, samples)


def _batches(n, size=BATCH_SIZE):
    return [(lo, min(n, lo + size)) for lo in range(0, n, size)]


class _EnsembleBatch:
    def __init__(self, cfg, keep_samples):
        self.cfg = cfg
        self.keep = keep_samples
        self.record = cfg.record_indices()

    def __call__(self, span):
        cfg = self.cfg
        lo, hi = span
        rngs = rngmod.streams(cfg.master_seed, "trajectory", range(lo, hi))
        noise = sample_batch(cfg.pair, cfg.grid, rngs)
        res = propagate(cfg.model, cfg.pair, noise, cfg.integrator, record=self.record)
        return Accumulator.from_states(res.states, res.aborted, self.keep)


def run_ensemble(cfg, workers=None, keep_samples=False):
    """Monte Carlo estimate of the reduced state and squared-norm statistics."""
    validate_config(cfg)
    job = _EnsembleBatch(cfg, keep_samples)
    parts = parallel_map(job, _batches(cfg.n_trajectories), workers)
    acc = tree_reduce(parts, Accumulator.merge)
    total = acc.count + acc.n_aborted
    if acc.n_aborted > MAX_ABORT_FRACTION * total:
        raise AbortError(acc.n_aborted, total)
    return finalize(acc, cfg.grid.dt * job.record)


@dataclass
class ReferenceComparison:
    times: np.ndarray
    distance: np.ndarray
    se: np.ndarray
    n_se: float
    passed: bool

    @property
    def max_ratio(self):
        return float(np.max(self.distance / np.where(self.se > 0, self.se, np.inf)))


def compare_to_reference(st, rho_ref, n_se=3.0, atol=1e-8):
    """Trace distance to reference states against an n_se standard-error envelope."""
    d = np.array([trace_distance(a, b) for a, b in zip(st.rho, rho_ref)])
    se = st.trace_distance_se()
    return ReferenceComparison(st.times, d, se, n_se, bool(np.all(d <= n_se * se + atol)))


def hall_statistic(x, mu0):
    """Studentized mean with Hall's skewness correction.

    Squared norms of linear trajectories are strongly right-skewed, which
    makes the plain t statistic too often large and negative. Hall's
    monotone transformation removes the leading skewness term of the
    Edgeworth expansion.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    m = x.mean(axis=-1)
    s = x.std(axis=-1, ddof=1)
    t = np.sqrt(n) * (m - mu0) / s
    g = np.mean((x - m[..., None]) ** 3, axis=-1) / s**3
    rn = math.sqrt(n)
    return t + g * t**2 / (3 * rn) + g**2 * t**3 / (27 * n) + g / (6 * rn), t, s / rn


@dataclass
class BranchingReport:
    s: float
    checkpoints: np.ndarray
    norm_s: np.ndarray
    cond_mean: np.ndarray
    cond_se: np.ndarray
    z: np.ndarray
    z_plain: np.ndarray
    oracle: np.ndarray = None
    n_exceed: int = 0
    fraction_exceed: float = 0.0
    p_value: float = 1.0
    verdict: str = "PASS"
    oracle_z: np.ndarray = None

    @property
    def passed(self):
        return self.verdict == "PASS"

    @property
    def mean_abs_z(self):
        return float(np.mean(np.abs(self.z)))

    @property
    def mean_z2(self):
        return float(np.mean(self.z**2))

    @property
    def relative_deviation(self):
        """Pooled (conditional mean / norm at s) - 1 per checkpoint."""
        return self.cond_mean.sum(axis=0) / (self.norm_s.sum() * np.ones(len(self.checkpoints))) - 1.0

    def oracle_agrees(self, n_se=3.0):
        return self.oracle_z is not None and bool(np.all(np.abs(self.oracle_z) <= n_se))

    def to_json(self):
        d = {"s": self.s, "checkpoints": self.checkpoints.tolist(), "n_prefixes": len(self.norm_s),
             "n_exceed": self.n_exceed, "fraction_exceed": self.fraction_exceed,
             "p_value": self.p_value, "verdict": self.verdict, "mean_abs_z": self.mean_abs_z}
        if self.oracle_z is not None:
            d["oracle_z"] = self.oracle_z.tolist()
            d["oracle_agrees"] = self.oracle_agrees()
        return d


class _BranchPrefix:
    def __init__(self, cfg):
        self.cfg = cfg
        self.k_s, self.k_c = cfg.branch_indices()

    def __call__(self, p):
        cfg = self.cfg
        b = cfg.branch
        prefix = sample_realization(cfg.pair, cfg.grid, rngmod.stream(cfg.master_seed, "prefix", p))
        head = propagate(cfg.model, cfg.pair, prefix, cfg.integrator, k_end=self.k_s,
                         record=[self.k_s])
        if head.aborted:
            raise AbortError(1, 1)
        psi_s = head.states[-1]
        norm_s = float(np.sum(np.abs(psi_s) ** 2))
        k_end = max(self.k_c)
        norms = []
        for lo in range(0, b.m, CONTINUATION_CHUNK):
            hi = min(b.m, lo + CONTINUATION_CHUNK)
            rngs = rngmod.streams(cfg.master_seed, "branch", range(lo, hi), p)
            cont = condition_continue(prefix, self.k_s, cfg.pair, rngs, method=b.method)
            tail = propagate(cfg.model, cfg.pair, cont, cfg.integrator, psi_start=psi_s,
                             k_start=self.k_s, k_end=k_end, record=self.k_c)
            if np.any(tail.aborted):
                raise AbortError(int(tail.aborted.sum()), hi - lo)
            norms.append(np.stack([tail.norm_at(k) for k in self.k_c], axis=-1))
        norms = np.concatenate(norms, axis=0)
        x_s = prefix.x_exp[:, self.k_s].copy()
        return norm_s, psi_s, x_s, norms


def martingale_branch_test(cfg, workers=None, with_oracle=True):
    """Conditional branching test of E[|psi_t|^2 | past up to s] = |psi_s|^2."""
    validate_config(cfg, need_branch=True)
    job = _BranchPrefix(cfg)
    out = parallel_map(job, range(cfg.branch.n_prefixes), workers)
    norm_s = np.array([o[0] for o in out])
    norms = np.stack([o[3] for o in out])  # (P, m, C)
    x = np.swapaxes(norms, 1, 2)  # (P, C, m)
    z, zt, se = hall_statistic(x, norm_s[:, None])
    mean = x.mean(axis=-1)
    k = int(np.sum(np.abs(z) > Z_THRESHOLD))
    n = z.size
    p = float(stats.binomtest(k, n, P_EXCEED).pvalue)
    frac = k / n
    verdict = "PASS" if (frac <= Z_FRACTION and p >= BINOMIAL_LEVEL) else "FAIL"
    times = cfg.grid.dt * np.array(job.k_c)
    rep = BranchingReport(cfg.branch.s, times, norm_s, mean, se, z, zt, n_exceed=k,
                          fraction_exceed=frac, p_value=p, verdict=verdict)
    if with_oracle and cfg.model.is_diagonal and cfg.model.hermitian_coupling:
        lam = np.diag(cfg.model.L)
        try:
            orc = np.array([[dephasing_conditional_norm_oracle(cfg.pair, lam, o[2], o[1], cfg.branch.s, t)
                             for t in times] for o in out])
        except UnsupportedPair:
            orc = None
        if orc is not None:
            rep.oracle = orc
            # relative residuals so that no single large-norm prefix dominates
            rel = (mean - orc) / orc
            rel_se = se / orc
            rep.oracle_z = rel.sum(axis=0) / np.sqrt((rel_se**2).sum(axis=0))
    return rep


@dataclass
class ConvergenceTable:
    dts: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    diff: np.ndarray
    diff_se: np.ndarray
    order: float
    kind: str

    def rows(self):
        return [dict(dt=a, mean=b, se=c, diff=d, diff_se=e)
                for a, b, c, d, e in zip(self.dts, self.mean, self.se, self.diff, self.diff_se)]


class _ConvergenceBatch:
    def __init__(self, cfg, factors, reference):
        self.cfg = cfg
        self.factors = factors
        self.reference = reference

    def __call__(self, span):
        cfg = self.cfg
        lo, hi = span
        rngs = rngmod.streams(cfg.master_seed, "convergence", range(lo, hi))
        fine = sample_batch(cfg.pair, cfg.grid, rngs)
        out = []
        for f in self.factors:
            noise = fine.coarsen(f)
            rec = [noise.grid.n_steps]
            res = propagate(cfg.model, cfg.pair, noise, cfg.integrator, record=rec)
            if self.reference is None:
                out.append(res.norms_sq[:, -1])
            else:
                ref = propagate(cfg.model, cfg.pair, noise, self.reference, record=rec)
                out.append(np.linalg.norm(res.states[:, -1] - ref.states[:, -1], axis=-1))
        return np.stack(out, axis=-1)


def _fit_weak_order(dts, diff, diff_se=None):
    """Fit diff_k = C (dt_k^p - dt_min^p) for (C, p), weighted by 1/SE^2.

    C is eliminated in closed form and p found by a bounded scalar search.
    """
    dmin = dts.min()
    mask = dts > dmin
    x, y = dts[mask], diff[mask]
    if len(x) < 2:
        raise ValueError("need at least three dt levels")
    w = np.ones_like(x) if diff_se is None else 1.0 / np.maximum(diff_se[mask], 1e-300) ** 2

    def resid(p):
        basis = x**p - dmin**p
        c = np.sum(w * basis * y) / np.sum(w * basis * basis)
        return np.sum(w * (y - c * basis) ** 2)

    r = optimize.minimize_scalar(resid, bounds=(0.05, 6.0), method="bounded")
    return float(r.x)


def convergence_study(cfg, dt_levels, workers=None, reference=None):
    """Error table over dt levels driven by common (refined) noise paths.

    Without ``reference`` the squared norm at t_max is compared in the weak
    sense against the finest level and the order is fitted from the
    differences. With ``reference='dephasing_exact'`` the per-path distance
    to the exact solution on the same grid is averaged and the order is the
    log-log slope.
    """
    dt_levels = np.array(sorted(dt_levels, reverse=True), dtype=float)
    if len(dt_levels) < 3:
        raise ConfigError("convergence study needs at least three dt levels")
    dmin = dt_levels.min()
    factors = [int(round(d / dmin)) for d in dt_levels]
    if any(abs(f * dmin - d) > 1e-9 * d for f, d in zip(factors, dt_levels)):
        raise ConfigError("dt levels must be integer multiples of the finest level")
    fine_cfg = ExperimentConfig(cfg.model, cfg.pair, TimeGrid(cfg.grid.t_max, dmin),
                                cfg.n_trajectories, cfg.master_seed, cfg.integrator)
    validate_config(fine_cfg)
    for f in factors:
        TimeGrid(cfg.grid.t_max, dmin * f)
    job = _ConvergenceBatch(fine_cfg, factors, reference)
    vals = np.concatenate(parallel_map(job, _batches(cfg.n_trajectories), workers), axis=0)
    N = vals.shape[0]
    mean = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / math.sqrt(N)
    d = vals - vals[:, -1:]
    diff = d.mean(axis=0)
    diff_se = d.std(axis=0, ddof=1) / math.sqrt(N)
    if reference is None:
        order = _fit_weak_order(dt_levels, diff, diff_se)
        kind = "weak"
    else:
        slope = np.polyfit(np.log(dt_levels), np.log(mean), 1)[0]
        order = float(slope)
        kind = "pathwise"
    return ConvergenceTable(dt_levels, mean, se, diff, diff_se, order, kind)


def _alpha_signature(pair):
    white = round(pair.white_x + pair.white_y, 14)
    exps = {}
    for k in pair.exp_x + pair.exp_y:
        exps[k.a] = exps.get(k.a, 0.0) + k.c
    return white, tuple(sorted((a, round(c, 14)) for a, c in exps.items() if c != 0.0))


@dataclass
class EtaComparison:
    times: np.ndarray
    distance: np.ndarray
    se: np.ndarray
    passed: bool
    stats_a: EnsembleStats
    stats_b: EnsembleStats

    @property
    def max_ratio(self):
        return float(np.max(self.distance / np.where(self.se > 0, self.se, np.inf)))


def eta_independence_check(cfg_a, cfg_b, workers=None, n_se=3.0, atol=1e-8):
    """Compare reduced states of two configurations sharing alpha but not eta."""
    if _alpha_signature(cfg_a.pair) != _alpha_signature(cfg_b.pair):
        raise ConfigError("pairs must have identical Hermitian correlation alpha")
    if cfg_a.grid != cfg_b.grid or cfg_a.n_trajectories != cfg_b.n_trajectories:
        raise ConfigError("configurations must share grid and ensemble size")
    a = run_ensemble(cfg_a, workers)
    b = run_ensemble(cfg_b, workers)
    d = np.array([trace_distance(x, y) for x, y in zip(a.rho, b.rho)])
    se = a.trace_distance_se(b)
    return EtaComparison(a.times, d, se, bool(np.all(d <= n_se * se + atol)), a, b)
