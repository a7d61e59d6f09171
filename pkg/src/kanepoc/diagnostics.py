"""Randomized quantile residuals, QQ reference bands and bootstrap intervals."""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .training import FitConfig, constant_fit, fit, single_class

CLAMP = 1e-12


def normal_quantile(p):
    """Standard normal quantile function."""
    return ndtri(p)


@dataclass
class ResidualSet:
    residuals: np.ndarray  # (T, n_u)
    seed: int
    alpha: np.ndarray = field(repr=False)

    @property
    def trajectories(self):
        return self.residuals.shape[0]

    def pooled(self):
        return self.residuals.ravel()


def _alpha_values(fit_or_alpha, sample):
    if hasattr(fit_or_alpha, "predict_unit"):
        alpha = fit_or_alpha.predict_unit(sample.features)
        if alpha.shape[1] != 1:
            raise ValueError("residuals are defined for binary follow-ups only")
        return alpha[:, 0]
    if callable(fit_or_alpha):
        return np.asarray(fit_or_alpha(sample.features), dtype=np.float64).ravel()
    return np.asarray(fit_or_alpha, dtype=np.float64).ravel()


def dunn_smyth(fit_or_alpha, sample, trajectories=10, seed=0):
    """Dunn-Smyth residuals for a binary POC fit.

    For ``delta = 0`` draw ``V ~ U(0, 1 - a)``, for ``delta = 1`` draw
    ``W ~ U(1 - a, 1)``, and map through the normal quantile function.
    ``fit_or_alpha`` is an estimate, a callable on unit features, or the
    fitted probabilities themselves. Trajectory ``t`` uses the ``t``-th
    child of ``SeedSequence(seed)``.
    """
    delta = np.asarray(sample.outcomes)
    if delta.ndim != 1:
        raise ValueError("residuals are defined for binary follow-ups only")
    alpha = _alpha_values(fit_or_alpha, sample)
    if alpha.shape != delta.shape:
        raise ValueError("fitted probabilities do not match the sample")
    if trajectories < 1:
        raise ValueError("need at least one trajectory")
    base = 1.0 - alpha
    out = np.empty((trajectories, delta.size))
    for t, child in enumerate(np.random.SeedSequence(seed).spawn(trajectories)):
        u = np.random.default_rng(child).random(delta.size)
        p = np.where(delta == 1, base + u * alpha, u * base)
        out[t] = normal_quantile(np.clip(p, CLAMP, 1.0 - CLAMP))
    return ResidualSet(out, seed, alpha)


@dataclass
class QQData:
    sample: np.ndarray
    theoretical: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float = 0.95

    def inside(self):
        return (self.sample >= self.lower) & (self.sample <= self.upper)


def qq_reference(residuals, level=0.95):
    """Sorted residuals against normal quantiles at ``(i - 0.5) / n``, with a
    pointwise band from the asymptotic normal law of order statistics."""
    r = np.sort(np.asarray(residuals, dtype=np.float64).ravel())
    n = r.size
    if n == 0:
        raise ValueError("empty residual trajectory")
    p = (np.arange(1, n + 1) - 0.5) / n
    q = normal_quantile(p)
    density = np.exp(-0.5 * q**2) / np.sqrt(2 * np.pi)
    se = np.sqrt(p * (1 - p) / n) / density
    z = normal_quantile(0.5 + level / 2)
    return QQData(r, q, q - z * se, q + z * se, level)


@dataclass
class BootstrapBand:
    grid: np.ndarray
    lower: np.ndarray
    point: np.ndarray
    upper: np.ndarray
    level: float
    replicates: int
    converged: int
    constant_fallbacks: int
    flagged: np.ndarray = field(repr=False, default=None)

    @property
    def width(self):
        return self.upper - self.lower

    def covers(self, values):
        values = np.asarray(values, dtype=np.float64).reshape(self.lower.shape)
        return (self.lower <= values) & (values <= self.upper)


def _refit(args):
    sample, rows, widths, spec, config = args
    sub = sample.subset(rows)
    if single_class(sub.outcomes) is not None:
        return None, False
    est, rep = fit(sub, widths, spec, None, config)
    return est, rep.converged


def bootstrap_ci(sample, config=None, replicates=200, grid=None, level=0.95, seed=0,
                 widths=None, spec=None, threads=1, min_replicates=50):
    """Resampling-cases bootstrap percentile band for a binary POC surface.

    Rows of ``D_n`` are resampled with replacement ``replicates`` times and
    refitted with the same configuration; single-class resamples fall back
    to their empirical rate and are counted.
    """
    if replicates < min_replicates:
        raise ValueError(f"need at least {min_replicates} bootstrap replicates")
    config = config or FitConfig()
    if grid is None:
        from .simulation import unit_grid

        grid = unit_grid(sample.dim, 101 if sample.dim == 1 else 21)
    grid = np.asarray(grid, dtype=np.float64).reshape(-1, sample.dim)
    point_est, _ = fit(sample, widths, spec, None, config)
    point = point_est.predict_unit(grid)[:, 0]
    rng = np.random.default_rng(seed)
    n = sample.n_retained
    draws = [rng.integers(0, n, size=n) for _ in range(replicates)]
    jobs = [(sample, rows, widths, spec, config) for rows in draws]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_refit, jobs, chunksize=4))
    else:
        results = [_refit(job) for job in jobs]
    curves = np.empty((replicates, grid.shape[0]))
    fallbacks = converged = 0
    for b, ((est, conv), rows) in enumerate(zip(results, draws)):
        if est is None:
            fallbacks += 1
            est = constant_fit(sample.subset(rows))
        converged += bool(conv)
        curves[b] = est.predict_unit(grid)[:, 0]
    tail = (1.0 - level) / 2.0
    lower, upper = np.quantile(curves, [tail, 1.0 - tail], axis=0)
    flagged = (point < lower) | (point > upper)
    return BootstrapBand(grid, lower, point, upper, level, replicates, converged, fallbacks, flagged)
