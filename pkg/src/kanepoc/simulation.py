"""Artificial cascade data (scenarios A1, A2, B1, B2, C), true POC surfaces,
MISE, and the Monte Carlo study.

Random numbers come from numpy's PCG64 generator; replicate ``r`` of a study
with base seed ``s`` uses ``default_rng(s + r)``, so every replicate is an
independent, reproducible stream.
"""
import math
import statistics
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .evt import RawDataset, build_threshold_sample, empirical_threshold
from .network import GLayer
from .training import FitConfig, fit

SCENARIOS = ("A1", "A2", "B1", "B2", "C")
DIMENSION = {"A1": 1, "A2": 1, "B1": 2, "B2": 2, "C": 2}
CATEGORIES = {"C": 3}
DEFAULT_QUANTILE = 0.95


def _check_id(scenario):
    if scenario not in DIMENSION:
        raise ValueError(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")
    return scenario


def normal_cdf(x):
    """Standard normal distribution function."""
    return ndtr(x)


def frechet_from_uniform(u):
    """Unit Frechet quantile ``-1 / log(u)``."""
    return -1.0 / np.log(u)


def open_uniform(rng, size=None):
    """Uniforms on the open interval (0, 1) at 2**-52 resolution."""
    k = rng.integers(0, 2**52, size=size, dtype=np.int64)
    return (k + 0.5) / 2.0**52


def frechet_sample(rng, size=None):
    return frechet_from_uniform(open_uniform(rng, size))


def _features(x, d):
    x = np.asarray(x, dtype=np.float64)
    if d == 1 and x.ndim <= 1:
        x = x.reshape(-1, 1)
    x = np.atleast_2d(x)
    if x.shape[1] != d:
        raise ValueError(f"expected {d} feature columns, got {x.shape[1]}")
    return x


def _components_c(x, shift, bump):
    b1 = normal_cdf(x[:, 0] - shift) * normal_cdf(x[:, 1] - shift)
    b2 = 0.4 * np.exp(-x[:, 0]) * np.cos(2 * np.pi * x[:, 1]) + 0.5 + bump
    b3 = 0.8 * x[:, 1] * np.sin(np.pi * x[:, 0]) ** 2 + bump
    return np.column_stack([b1, b2, b3])


def _surface(scenario, x, shift, bump):
    if scenario == "A1":
        return normal_cdf(x[:, 0] - shift)
    if scenario == "A2":
        return 0.2 * np.sin(3 * np.pi * (x[:, 0] - 1.0) ** 2) + 0.4 + bump
    if scenario == "B1":
        return normal_cdf(x[:, 0] - shift) * normal_cdf(x[:, 1] - shift)
    if scenario == "B2":
        return 0.4 * np.exp(-x[:, 0]) * np.cos(2 * np.pi * x[:, 1]) + 0.5 + bump
    m = _components_c(x, shift, bump)
    return m / m.sum(axis=1, keepdims=True)


def scenario_probability(scenario, x, u, return_clamped=False):
    """Success probability ``m(x; u)`` at threshold ``u`` (a triple for C)."""
    _check_id(scenario)
    x = _features(x, DIMENSION[scenario])
    if u <= 0:
        raise ValueError("threshold must be positive")
    p = _surface(scenario, x, math.exp(-u), 1.0 / u**2)
    bad = int(((p < 0) | (p > 1)).sum())
    if bad:
        warnings.warn(f"{bad} scenario probabilities fell outside [0, 1] at u={u:g}; clamped")
        p = np.clip(p, 0.0, 1.0)
    return (p, bad) if return_clamped else p


def true_poc(scenario, x):
    """Limiting POC surface as ``u`` grows (a triple for C)."""
    _check_id(scenario)
    return _surface(scenario, _features(x, DIMENSION[scenario]), 0.0, 0.0)


@dataclass
class ScenarioDraw:
    scenario: str
    n: int
    seed: int
    raw: RawDataset
    threshold: float
    quantile: float = DEFAULT_QUANTILE

    @property
    def exceedances(self):
        return np.flatnonzero(self.raw.trigger > self.threshold)


def generate(scenario, n, seed, q=DEFAULT_QUANTILE):
    """Simulate ``n`` rows; outcomes are drawn only for exceedances of the
    empirical ``q`` trigger quantile and are NaN elsewhere."""
    _check_id(scenario)
    d = DIMENSION[scenario]
    rng = np.random.default_rng(seed)
    X = rng.random((n, d))
    y = frechet_sample(rng, n)
    u = empirical_threshold(y, q)
    rows = np.flatnonzero(y > u)
    p = scenario_probability(scenario, X[rows], u)
    v = rng.random(rows.size)
    if scenario == "C":
        follow = np.full((n, 3), np.nan)
        cum = np.cumsum(p, axis=1)
        cat = (v[:, None] >= cum[:, :2]).sum(axis=1)
        onehot = np.zeros((rows.size, 3))
        onehot[np.arange(rows.size), cat] = 1.0
        follow[rows] = onehot
        raw = RawDataset(X, y, follow, "categorical", 3)
    else:
        follow = np.full(n, np.nan)
        follow[rows] = (v < p).astype(np.float64)
        raw = RawDataset(X, y, follow, "binary", 2)
    return ScenarioDraw(scenario, n, seed, raw, u, q)


def unit_grid(d, points=None):
    """Uniform grid on the unit cube: 1001 points for d=1, 101 x 101 for d=2."""
    if points is None:
        points = 1001 if d == 1 else 101
    axis = np.linspace(0.0, 1.0, points)
    if d == 1:
        return axis[:, None]
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def integrate_grid(values, d, points):
    """Trapezoid rule over a :func:`unit_grid` (values in grid order)."""
    v = np.asarray(values, dtype=np.float64).reshape((points,) * d)
    axis = np.linspace(0.0, 1.0, points)
    for _ in range(d):
        v = np.trapezoid(v, axis, axis=0)
    return float(v)


def mise(estimate, truth, d, points=None):
    """Integrated squared error over the unit cube.

    ``estimate`` and ``truth`` are callables on an ``(N, d)`` grid or arrays of
    grid values. Multi-output surfaces give one value per output column.
    """
    if points is None:
        points = 1001 if d == 1 else 101
    grid = unit_grid(d, points)
    est = np.asarray(estimate(grid) if callable(estimate) else estimate, dtype=np.float64)
    tru = np.asarray(truth(grid) if callable(truth) else truth, dtype=np.float64)
    if est.shape[0] != grid.shape[0] or tru.shape[0] != grid.shape[0]:
        raise ValueError("estimate/truth do not match the grid size")
    est = est.reshape(grid.shape[0], -1)
    tru = tru.reshape(grid.shape[0], -1)
    if est.shape != tru.shape:
        raise ValueError(f"estimate has {est.shape[1]} outputs, truth has {tru.shape[1]}")
    out = [integrate_grid((est[:, j] - tru[:, j]) ** 2, d, points) for j in range(est.shape[1])]
    return out[0] if len(out) == 1 else out


@dataclass
class ReplicateResult:
    replicate: int
    seed: int
    n_retained: int = 0
    final_loss: float = math.nan
    mise: list = field(default_factory=list)
    iterations: int = 0
    status: str = "failed"
    error: str = ""
    curve: np.ndarray = field(default=None, repr=False)

    @property
    def ok(self):
        return self.status != "failed"

    def to_dict(self):
        return {
            "replicate": self.replicate, "seed": self.seed, "n_retained": self.n_retained,
            "final_loss": self.final_loss, "mise": list(self.mise), "iterations": self.iterations,
            "status": self.status, "error": self.error,
            "curve": None if self.curve is None else self.curve.tolist(),
        }

    @classmethod
    def from_dict(cls, doc):
        curve = doc.get("curve")
        return cls(doc["replicate"], doc["seed"], doc["n_retained"], doc["final_loss"], list(doc["mise"]),
                   doc["iterations"], doc["status"], doc["error"],
                   None if curve is None else np.array(curve, dtype=np.float64))


def single_experiment(scenario, n, seed, config=None, q=DEFAULT_QUANTILE, grid_points=None):
    """generate -> threshold -> fit -> MISE for one seed."""
    config = (config or FitConfig()).replace(init_seed=seed)
    d = DIMENSION[scenario]
    draw = generate(scenario, n, seed, q)
    sample = build_threshold_sample(draw.raw, q, bounds=(np.zeros(d), np.ones(d)))
    g_layer = GLayer.softmax(3) if scenario == "C" else GLayer.sigmoid()
    est, report = fit(sample, g_layer=g_layer, config=config)
    grid = unit_grid(d, grid_points)
    curve = est.predict_unit(grid)
    truth = true_poc(scenario, grid)
    points = grid_points or (1001 if d == 1 else 101)
    err = mise(curve, truth, d, points)
    return est, report, curve, (err if isinstance(err, list) else [err])


def _run_replicate(scenario, n, r, seed, config, q, grid_points):
    rec = ReplicateResult(r, seed)
    try:
        est, report, curve, err = single_experiment(scenario, n, seed, config, q, grid_points)
    except Exception as exc:  # a failed replicate is recorded, never fatal
        rec.error = f"{type(exc).__name__}: {exc}"
        return rec
    rec.n_retained = est.metadata["n_retained"]
    rec.final_loss = report.final_loss
    rec.mise = err
    rec.iterations = report.iterations
    rec.status = report.status
    rec.curve = curve
    return rec


def _replicate(args):
    return _run_replicate(*args)


@dataclass
class MonteCarloSummary:
    scenario: str
    n: int
    replicates: int
    base_seed: int
    records: list
    grid: np.ndarray = field(repr=False)
    mean_curve: np.ndarray = field(repr=False)
    truth: np.ndarray = field(repr=False)

    @property
    def succeeded(self):
        return [r for r in self.records if r.ok]

    @property
    def failures(self):
        return sum(not r.ok for r in self.records)

    @property
    def categories(self):
        return self.mean_curve.shape[1]

    def mean_mise(self):
        """Average over replicates of each replicate's integrated squared error."""
        ok = self.succeeded
        if not ok:
            return [math.nan] * self.categories
        return [math.fsum(r.mise[j] for r in ok) / len(ok) for j in range(self.categories)]

    def median_mise(self):
        ok = self.succeeded
        if not ok:
            return [math.nan] * self.categories
        return [statistics.median(r.mise[j] for r in ok) for j in range(self.categories)]

    def mean_curve_ise(self):
        """Integrated squared error of the pointwise Monte Carlo mean surface."""
        d = self.grid.shape[1]
        points = round(self.grid.shape[0] ** (1 / d))
        err = mise(self.mean_curve, self.truth, d, points)
        return err if isinstance(err, list) else [err]


def run_replicates(jobs, threads=1, progress=None):
    """Evaluate ``(scenario, n, r, seed, config, q, grid_points)`` jobs."""
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(_replicate, jobs))
        if progress is not None:
            for rec in records:
                progress(rec)
        return records
    records = []
    for job in jobs:
        records.append(_replicate(job))
        if progress is not None:
            progress(records[-1])
    return records


def summarize(scenario, n, base_seed, records, grid_points=None):
    """Collect replicate records into a :class:`MonteCarloSummary`."""
    records = sorted(records, key=lambda r: r.replicate)
    d = DIMENSION[scenario]
    grid = unit_grid(d, grid_points)
    truth = true_poc(scenario, grid).reshape(grid.shape[0], -1)
    curves = [r.curve.reshape(truth.shape) for r in records if r.ok]
    if curves:
        acc = np.zeros_like(curves[0])
        for c in curves:
            acc = acc + c
        mean_curve = acc / len(curves)
    else:
        mean_curve = np.full_like(truth, np.nan)
    return MonteCarloSummary(scenario, n, len(records), base_seed, records, grid, mean_curve, truth)


def monte_carlo(scenario, n, replicates, base_seed=0, config=None, q=DEFAULT_QUANTILE,
                threads=1, grid_points=None, progress=None):
    """Run ``replicates`` independent single-sample experiments with seeds
    ``base_seed + r`` and summarize their MISE."""
    _check_id(scenario)
    config = config or FitConfig()
    jobs = [(scenario, n, r, base_seed + r, config, q, grid_points) for r in range(replicates)]
    records = run_replicates(jobs, threads, progress)
    return summarize(scenario, n, base_seed, records, grid_points)
