"""B-spline bases on a clamped uniform knot vector over [0, 1]."""
from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels


class SplineDomainError(ValueError):
    """Raised when a spline is evaluated outside [0, 1]."""


@dataclass(frozen=True)
class SplineSpec:
    """Degree ``p`` and interval count ``m``; ``K = p + m`` basis functions.

    The knot vector repeats each endpoint ``p + 1`` times and places
    ``m - 1`` simple, equally spaced interior knots.
    """

    degree: int = 3
    intervals: int = 2
    knots: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.degree) != self.degree or self.degree < 0:
            raise ValueError(f"degree must be a non-negative integer, got {self.degree}")
        if int(self.intervals) != self.intervals or self.intervals < 1:
            raise ValueError(f"intervals must be a positive integer, got {self.intervals}")
        p, m = int(self.degree), int(self.intervals)
        object.__setattr__(self, "degree", p)
        object.__setattr__(self, "intervals", m)
        knots = np.concatenate([np.zeros(p), np.arange(m + 1) / m, np.ones(p)])
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)

    @property
    def n_basis(self):
        return self.degree + self.intervals

    def greville(self):
        """Greville abscissae; using them as coefficients reproduces ``x``."""
        p, t = self.degree, self.knots
        if p == 0:
            return 0.5 * (t[:-1] + t[1:])
        return np.array([t[k + 1 : k + p + 1].mean() for k in range(self.n_basis)])


def _check_domain(x):
    x = np.asarray(x, dtype=np.float64)
    if x.size and (np.isnan(x).any() or x.min() < 0.0 or x.max() > 1.0):
        raise SplineDomainError(
            "spline inputs must lie in [0, 1]; scale features first "
            "(see kanepoc.evt.scale_features)"
        )
    return x


def basis_value(spec, k, x):
    """Value of the ``k``-th basis function (1-based) by Cox-de Boor recursion.

    Uses 0/0 := 0. At ``x = 1`` the last non-degenerate interval is treated
    as closed, so the rightmost basis function equals 1 there.
    """
    if not 1 <= k <= spec.n_basis:
        raise IndexError(f"basis index {k} outside 1..{spec.n_basis}")
    x = float(_check_domain(x))
    t = spec.knots
    last = len(t) - spec.degree - 2  # index of the last non-empty interval

    def rec(i, p):
        if p == 0:
            if t[i] <= x < t[i + 1]:
                return 1.0
            return 1.0 if (x == t[-1] and i == last) else 0.0
        out = 0.0
        den = t[i + p] - t[i]
        if den > 0:
            out += (x - t[i]) / den * rec(i, p - 1)
        den = t[i + p + 1] - t[i + 1]
        if den > 0:
            out += (t[i + p + 1] - x) / den * rec(i + 1, p - 1)
        return out

    return rec(k - 1, spec.degree)


def local_basis(spec, x):
    """Sparse form ``(span, values, derivatives)`` for a flat array of points."""
    x = np.ascontiguousarray(_check_domain(x), dtype=np.float64).ravel()
    return kernels.basis_local(x, spec.knots, spec.degree, spec.n_basis)


def _densify(spec, span, local):
    n = span.shape[0]
    out = np.zeros((n, spec.n_basis))
    cols = span[:, None] - spec.degree + np.arange(spec.degree + 1)
    out[np.arange(n)[:, None], cols] = local
    return out


def design_matrix(spec, x):
    """Rows ``(B_1(x_r), ..., B_K(x_r))`` for every point in ``x``."""
    span, vals, _ = local_basis(spec, x)
    return _densify(spec, span, vals)


def design_matrix_derivative(spec, x):
    """Rows of first derivatives ``d/dx B_k(x_r)``; one-sided at the endpoints."""
    span, _, ders = local_basis(spec, x)
    return _densify(spec, span, ders)


def design_row(spec, x):
    return design_matrix(spec, np.array([x], dtype=np.float64))[0]


def design_row_derivative(spec, x):
    return design_matrix_derivative(spec, np.array([x], dtype=np.float64))[0]
