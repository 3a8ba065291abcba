"""Gaussian-process Bayesian optimization of an expensive black box.

Inputs live on the unit cube (callers normalize), observed values are
standardized before fitting, and the squared-exponential kernel's scales
are picked by grid search on the log marginal likelihood. The acquisition
is analytic Expected Improvement, maximized over seeded quasi-random
candidates plus coordinate-wise refinement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.special import ndtr
from scipy.stats import qmc

JITTER_START = 1e-8
JITTER_MAX = 1e-2
DUPLICATE_TOL = 1e-9


class GpFitError(RuntimeError):
    """Gram matrix could not be factorized even with escalated jitter."""


@dataclass
class ObservationSet:
    """Evaluated points on the unit cube with finite objective values.

    Near-duplicate points are jittered apart before insertion; non-finite
    objective values (aborted trials) are replaced by the worst finite
    value seen so far and flagged.
    """

    dim: int
    seed: int = 0
    xs: list = field(default_factory=list)
    fs: list = field(default_factory=list)
    raw_fs: list = field(default_factory=list)
    flagged: list = field(default_factory=list)

    def __post_init__(self):
        self._rng = np.random.default_rng([self.seed, 0xB0])

    def __len__(self):
        return len(self.xs)

    def add(self, x, f):
        x = np.asarray(x, dtype=np.float64).copy()
        if x.shape != (self.dim,):
            raise ValueError(f"expected point of dim {self.dim}, got {x.shape}")
        if np.any(x < -1e-12) or np.any(x > 1 + 1e-12):
            raise ValueError("observation outside the unit cube")
        while any(np.max(np.abs(x - prev)) < DUPLICATE_TOL for prev in self.xs):
            x = np.clip(x + self._rng.uniform(-1e-6, 1e-6, self.dim), 0.0, 1.0)
        raw = float(f)
        flag = not math.isfinite(raw)
        if flag:
            finite = [v for v in self.fs if math.isfinite(v)]
            stored = max(finite) if finite else raw
        else:
            stored = raw
        self.xs.append(x)
        self.fs.append(stored)
        self.raw_fs.append(raw)
        self.flagged.append(flag)
        if not flag:
            # earlier aborted trials may predate any finite value; patch
            # them with the worst finite observation now available
            worst = max(v for v in self.fs if math.isfinite(v))
            self.fs = [v if math.isfinite(v) else worst for v in self.fs]

    def matrix(self):
        return np.array(self.xs), np.array(self.fs)

    def all_finite(self):
        return all(math.isfinite(v) for v in self.fs)


@dataclass
class GpState:
    """Fitted GP posterior over standardized observations."""

    x: np.ndarray
    y: np.ndarray              # standardized values
    length_scales: np.ndarray
    signal_var: float
    jitter: float
    chol: tuple                # cho_factor of K + jitter*I
    alpha: np.ndarray          # (K + jitter*I)^-1 y
    f_mean: float
    f_std: float

    def destandardize(self, mu, var):
        return mu * self.f_std + self.f_mean, var * self.f_std ** 2


def gaussian_kernel(a, b, length_scales, signal_var):
    """Squared-exponential kernel matrix between row-stacked points."""
    a = np.atleast_2d(a) / length_scales
    b = np.atleast_2d(b) / length_scales
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return signal_var * np.exp(-0.5 * d2)


def _factorize(k):
    jitter = JITTER_START
    n = k.shape[0]
    while jitter <= JITTER_MAX:
        try:
            chol = cho_factor(k + jitter * np.eye(n), lower=True)
            return chol, jitter
        except LinAlgError:
            jitter *= 10.0
    raise GpFitError(
        f"Gram matrix not positive definite up to jitter {JITTER_MAX}")


def _standardize(f):
    f = np.asarray(f, dtype=np.float64)
    mean = float(f.mean())
    std = float(f.std())
    if std < 1e-12:
        return np.zeros_like(f), mean, 1.0, True
    return (f - mean) / std, mean, std, False


def fit_gp(obs: ObservationSet, length_scales, signal_var) -> GpState:
    """Factorize the GP for fixed hyperparameters."""
    x, f = obs.matrix()
    y, f_mean, f_std, _ = _standardize(f)
    length_scales = np.broadcast_to(np.asarray(length_scales, dtype=np.float64),
                                    (obs.dim,)).copy()
    k = gaussian_kernel(x, x, length_scales, signal_var)
    chol, jitter = _factorize(k)
    alpha = cho_solve(chol, y)
    return GpState(x, y, length_scales, float(signal_var), jitter, chol,
                   alpha, f_mean, f_std)


def log_marginal_likelihood(state: GpState) -> float:
    n = len(state.y)
    data_fit = -0.5 * float(state.y @ state.alpha)
    logdet = -float(np.log(np.diag(state.chol[0])).sum())
    return data_fit + logdet - 0.5 * n * np.log(2.0 * np.pi)


LENGTH_SCALE_GRID = (0.05, 0.13, 0.32, 0.8, 2.0)
SIGNAL_VAR_GRID = (0.5, 1.0, 2.0)


def fit_hyperparameters(obs: ObservationSet, groups=None) -> GpState:
    """Pick kernel scales by grid-searched log marginal likelihood.

    ``groups`` optionally partitions the dimensions; each group shares one
    length scale drawn from the grid (the default is a single isotropic
    scale). Degenerate observations (all values equal) get unit defaults.
    """
    if len(obs) < 2:
        raise ValueError("need at least 2 observations to fit")
    _, f = obs.matrix()
    _, _, _, degenerate = _standardize(f)
    if degenerate:
        return fit_gp(obs, np.ones(obs.dim), 1.0)
    if groups is None:
        groups = [list(range(obs.dim))]
    best = None
    combos = [()]
    for _ in groups:
        combos = [c + (ls,) for c in combos for ls in LENGTH_SCALE_GRID]
    for combo in combos:
        scales = np.empty(obs.dim)
        for g, ls in zip(groups, combo):
            scales[list(g)] = ls
        for sv in SIGNAL_VAR_GRID:
            try:
                state = fit_gp(obs, scales, sv)
            except GpFitError:
                continue
            lml = log_marginal_likelihood(state)
            if best is None or lml > best[0]:
                best = (lml, state)
    if best is None:
        raise GpFitError("no hyperparameter combination could be factorized")
    return best[1]


def gp_posterior(state: GpState, q):
    """Posterior mean and variance at ``q``, in standardized units.

    Use ``state.destandardize`` for reporting in raw units.
    """
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    k_star = gaussian_kernel(q, state.x, state.length_scales, state.signal_var)
    mu = k_star @ state.alpha
    v = cho_solve(state.chol, k_star.T)
    var = state.signal_var - np.einsum("ij,ji->i", k_star, v)
    var = np.maximum(var, 0.0)
    if mu.shape[0] == 1:
        return float(mu[0]), float(var[0])
    return mu, var


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _norm_pdf(z):
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def expected_improvement(mu, sigma2, f_min):
    """Closed-form EI for minimization; degenerates to max(f_min - mu, 0)
    when the predictive deviation vanishes."""
    sigma = math.sqrt(max(float(sigma2), 0.0))
    gap = float(f_min) - float(mu)
    if sigma < 1e-12:
        return max(gap, 0.0)
    z = gap / sigma
    return gap * float(ndtr(z)) + sigma * float(_norm_pdf(z))


def _ei_batch(state: GpState, pts, f_min):
    k_star = gaussian_kernel(pts, state.x, state.length_scales,
                             state.signal_var)
    mu = k_star @ state.alpha
    v = cho_solve(state.chol, k_star.T)
    sigma = np.sqrt(np.maximum(state.signal_var -
                               np.einsum("ij,ji->i", k_star, v), 0.0))
    gap = f_min - mu
    out = np.where(gap > 0.0, gap, 0.0)
    nz = sigma >= 1e-12
    z = np.zeros_like(mu)
    z[nz] = gap[nz] / sigma[nz]
    out = np.where(nz, gap * ndtr(z) + sigma * _norm_pdf(z), out)
    return out


N_CANDIDATES = 1024
N_REFINE_STARTS = 4
N_REFINE_PASSES = 20


def propose_next(state: GpState, dim, seed, n_candidates=N_CANDIDATES):
    """Argmax-EI proposal on the unit cube.

    Seeded Sobol candidates plus greedy coordinate refinement with a
    shrinking step from the best few; deterministic given the seed.
    """
    f_min = float(state.y.min())
    sobol = qmc.Sobol(d=dim, scramble=True, seed=np.random.default_rng(seed))
    cands = sobol.random(n_candidates)
    ei = _ei_batch(state, cands, f_min)
    order = np.argsort(-ei)
    best_x = cands[order[0]].copy()
    best_ei = float(ei[order[0]])
    for start in order[:N_REFINE_STARTS]:
        x = cands[start].copy()
        cur = float(ei[start])
        step = 0.25
        for _ in range(N_REFINE_PASSES):
            for d in range(dim):
                for delta in (step, -step):
                    trial = x.copy()
                    trial[d] = min(1.0, max(0.0, trial[d] + delta))
                    val = float(_ei_batch(state, trial[None, :], f_min)[0])
                    if val > cur:
                        cur = val
                        x = trial
            step *= 0.7
        if cur > best_ei:
            best_ei = cur
            best_x = x
    return best_x


# ---------------------------------------------------------------------------
# the optimization loop


@dataclass
class Trial:
    index: int
    phase: str          # "random" | "guided"
    x: np.ndarray       # unit-cube point
    f: float            # raw objective value (may be inf for aborted runs)


@dataclass
class MinimizeResult:
    trials: list
    best_x: np.ndarray
    best_f: float

    def cumulative_min(self):
        out, cur = [], float("inf")
        for t in self.trials:
            cur = min(cur, t.f)
            out.append(cur)
        return out


def minimize(objective, dim, n_init, n_total, seed, groups=None):
    """Random trials then GP-guided trials; returns the full trial log.

    ``objective`` maps a unit-cube point to a float (inf allowed for
    aborted evaluations). Deterministic given the seed. The GP-guided
    phase falls back to a random proposal when fitting fails.
    """
    if not 2 <= n_init < n_total:
        raise ValueError("need n_total > n_init >= 2")
    rng = np.random.default_rng([seed, 0x1A])
    obs = ObservationSet(dim, seed=seed)
    trials = []
    for i in range(n_total):
        if i < n_init:
            phase = "random"
            x = rng.uniform(0.0, 1.0, dim)
        else:
            phase = "guided"
            if obs.all_finite():
                try:
                    state = fit_hyperparameters(obs, groups=groups)
                    x = propose_next(state, dim, seed=[seed, 0x5E, i])
                except GpFitError:
                    x = rng.uniform(0.0, 1.0, dim)
            else:
                # no finite observation yet; nothing to fit
                x = rng.uniform(0.0, 1.0, dim)
        f = float(objective(x))
        obs.add(x, f)
        # the observation may have been jittered away from a duplicate
        trials.append(Trial(i, phase, obs.xs[-1], f))
    finite = [t for t in trials if math.isfinite(t.f)]
    if not finite:
        raise RuntimeError("all trials diverged; no usable observation")
    best = min(finite, key=lambda t: (t.f, t.index))
    return MinimizeResult(trials, best.x.copy(), best.f)


def to_unit(x, low, high):
    return (np.asarray(x, dtype=np.float64) - low) / (high - low)


def from_unit(u, low, high):
    return low + np.asarray(u, dtype=np.float64) * (high - low)
