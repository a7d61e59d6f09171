"""Fit KANE coefficients by L-BFGS on the cross-entropy losses."""
import json
import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.optimize import line_search

from .network import (
    ConstantEstimate,
    GLayer,
    KaneNetwork,
    PocEstimate,
    canonical_widths,
    loss_and_gradient,
)
from .splines import SplineSpec


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitConfig:
    max_iterations: int = 100
    history_size: int = 10
    gradient_tolerance: float = 1e-8
    c1: float = 1e-4
    c2: float = 0.9
    init_seed: int = 0
    init_scale: float = 0.1
    loss_kind: str = "auto"

    def __post_init__(self):
        if self.max_iterations < 1 or self.history_size < 1:
            raise ValueError("max_iterations and history_size must be at least 1")
        if self.gradient_tolerance <= 0 or self.init_scale <= 0:
            raise ValueError("tolerances must be positive")
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("line search constants need 0 < c1 < c2 < 1")
        if self.loss_kind not in ("auto", "bce", "ce"):
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")

    def replace(self, **changes):
        return FitConfig(**{**asdict(self), **changes})

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown fit config keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class FitReport:
    final_loss: float
    loss_trace: list
    iterations: int
    converged: bool
    status: str
    gradient_norm: float
    evaluations: int = 0
    fallback_steps: int = 0
    wall_seconds: float = field(default=0.0, compare=False)

    def to_dict(self, include_timing=False):
        doc = asdict(self)
        if not include_timing:
            doc.pop("wall_seconds")
        return doc


class _Objective:
    """Loss/gradient closure over flat parameters with a small memo cache."""

    def __init__(self, template, X, targets, loss_kind, weights):
        self.template = template
        self.X = X
        self.targets = targets
        self.loss_kind = loss_kind
        self.weights = weights
        self.evaluations = 0
        self._cache = {}

    def __call__(self, theta):
        key = theta.tobytes()
        hit = self._cache.get(key)
        if hit is None:
            net = self.template.with_flat(theta)
            value, grads = loss_and_gradient(net, self.X, self.targets, self.loss_kind, self.weights)
            hit = (value, np.concatenate([g.ravel() for g in grads]))
            self.evaluations += 1
            if len(self._cache) > 8:
                self._cache.clear()
            self._cache[key] = hit
        return hit

    def value(self, theta):
        return self(theta)[0]

    def grad(self, theta):
        return self(theta)[1]


def _two_loop(g, pairs):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * s.dot(q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= s.dot(y) / y.dot(y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * y.dot(q)
        q += (a - b) * s
    return -q


def _backtrack(obj, x, f, g, c1, shrink=0.5, tries=60):
    d = -g
    slope = g.dot(d)
    step = 1.0 / max(1.0, np.linalg.norm(g))
    for _ in range(tries):
        x_new = x + step * d
        f_new = obj.value(x_new)
        if np.isfinite(f_new) and f_new <= f + c1 * step * slope:
            return x_new
        step *= shrink
    return None


def lbfgs(obj, x0, config):
    """Minimize ``obj`` from ``x0``; returns ``(best_x, FitReport)``.

    Directions come from the two-loop recursion over the last
    ``history_size`` curvature pairs; steps satisfy the strong Wolfe
    conditions. When the line search fails, one steepest-descent step with
    Armijo backtracking is taken and the memory is reset.
    """
    start = time.perf_counter()
    x = np.array(x0, dtype=np.float64)
    f, g = obj(x)
    if not (np.isfinite(f) and np.isfinite(g).all()):
        raise FitError("loss or gradient is not finite at the initial point")
    trace = [f]
    pairs = deque(maxlen=config.history_size)
    best_x, best_f = x, f
    status = "max_iterations"
    fallbacks = 0
    iterations = 0
    for _ in range(config.max_iterations):
        if np.abs(g).max() <= config.gradient_tolerance:
            status = "converged"
            break
        d = _two_loop(g, pairs)
        if not g.dot(d) < 0:
            pairs.clear()
            d = -g
        # quasi-Newton directions are scaled, so their first trial step is 1
        old_old = None if pairs else f + 0.5 * np.linalg.norm(g)
        with np.errstate(all="ignore"):
            alpha = line_search(
                obj.value, obj.grad, x, d, gfk=g, old_fval=f, old_old_fval=old_old,
                c1=config.c1, c2=config.c2, maxiter=20,
            )[0]
        if alpha is not None:
            x_new = x + alpha * d
            f_new, g_new = obj(x_new)
            if not (np.isfinite(f_new) and f_new <= f):
                alpha = None
        if alpha is None:
            fallbacks += 1
            pairs.clear()
            x_new = _backtrack(obj, x, f, g, config.c1)
            if x_new is None:
                status = "stalled"
                break
            f_new, g_new = obj(x_new)
        s = x_new - x
        y = g_new - g
        sy = s.dot(y)
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y, 1.0 / sy))
        x, f, g = x_new, f_new, g_new
        iterations += 1
        trace.append(f)
        if f < best_f:
            best_x, best_f = x, f
    else:
        if np.abs(g).max() <= config.gradient_tolerance:
            status = "converged"
    g_best = obj.grad(best_x)
    report = FitReport(
        final_loss=float(best_f),
        loss_trace=[float(v) for v in trace],
        iterations=iterations,
        converged=status == "converged",
        status=status,
        gradient_norm=float(np.abs(g_best).max()),
        evaluations=obj.evaluations,
        fallback_steps=fallbacks,
        wall_seconds=time.perf_counter() - start,
    )
    return best_x, report


def collapse_duplicates(X, targets):
    """Merge identical (features, outcome) rows into weighted unique rows.

    Makes the fit exactly invariant to duplicating the data and cheapens
    bootstrap refits.
    """
    T = targets.reshape(targets.shape[0], -1).astype(np.float64)
    joined = np.hstack([X, T])
    uniq, counts = np.unique(joined, axis=0, return_counts=True)
    d = X.shape[1]
    U = np.ascontiguousarray(uniq[:, :d])
    Tu = uniq[:, d:]
    if targets.ndim == 1:
        Tu = Tu[:, 0]
    return U, Tu, counts.astype(np.float64)


def resolve_loss(g_layer, config):
    if config.loss_kind != "auto":
        return config.loss_kind
    return "ce" if g_layer.kind == "softmax" else "bce"


def fit_arrays(X, targets, widths=None, spec=None, g_layer=None, config=None):
    """Fit a network on unit-cube features ``X``; returns ``(network, FitReport)``."""
    config = config or FitConfig()
    spec = spec or SplineSpec()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    targets = np.asarray(targets)
    if X.shape[0] == 0:
        raise FitError("cannot fit on an empty sample")
    if g_layer is None:
        g_layer = GLayer.softmax(targets.shape[1]) if targets.ndim == 2 else GLayer.sigmoid()
    widths = tuple(widths) if widths is not None else canonical_widths(X.shape[1], g_layer.width)
    if widths[0] != X.shape[1]:
        raise FitError(f"network expects {widths[0]} features, data has {X.shape[1]}")
    loss_kind = resolve_loss(g_layer, config)
    U, T, w = collapse_duplicates(X, targets)
    init = KaneNetwork.initialize(widths, spec, g_layer, seed=config.init_seed, scale=config.init_scale)
    obj = _Objective(init, U, T, loss_kind, w)
    theta, report = lbfgs(obj, init.flat(), config)
    return init.with_flat(theta), report


def single_class(outcomes):
    """The sole class label if ``outcomes`` (0/1 vector or one-hot) has one, else None."""
    outcomes = np.asarray(outcomes)
    if outcomes.ndim == 1:
        values = np.unique(outcomes)
        return int(values[0]) if values.size == 1 else None
    present = np.flatnonzero(outcomes.sum(axis=0) > 0)
    return int(present[0]) if present.size == 1 else None


def fit(sample, widths=None, spec=None, g_layer=None, config=None):
    """Fit a KANE estimate of the POC surface on a thresholded sample.

    Returns ``(PocEstimate, FitReport)``. Binary outcomes use a sigmoid
    g-layer with binary cross-entropy, one-hot outcomes a softmax g-layer
    with the multi-class loss.
    """
    if sample.kind == "ordinal" and np.asarray(sample.outcomes).ndim == 1:
        raise FitError("ordinal samples are fitted with kanepoc.ordinal.fit_ordinal")
    config = config or FitConfig()
    network, report = fit_arrays(sample.features, sample.outcomes, widths, spec, g_layer, config)
    meta = {
        "seed": config.init_seed,
        "iterations": report.iterations,
        "status": report.status,
        "final_loss": report.final_loss,
        "n_retained": int(sample.n_retained),
    }
    est = PocEstimate(network, sample.threshold, sample.quantile, sample.scaling, meta)
    return est, report


def constant_fit(sample):
    """Empirical-rate estimate for single-class binary samples."""
    rate = float(np.mean(sample.outcomes))
    meta = {"constant": True, "n_retained": int(sample.n_retained)}
    return ConstantEstimate(rate, sample.dim, sample.threshold, sample.quantile, sample.scaling, meta)
