"""Threshold-exceedance datasets: scaling, empirical thresholds and indicators."""
import csv
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

MIN_RETAINED = 25
MIN_SAMPLE = 20
OUTCOME_KINDS = ("binary", "categorical", "ordinal", "continuous")


class ThresholdError(ValueError):
    """Too few exceedances, or an invalid quantile level."""


@dataclass(frozen=True)
class FeatureScaling:
    """Per-column min-max map onto [0, 1]; constant columns map to 0.5."""

    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.minimum, dtype=np.float64).ravel()
        hi = np.asarray(self.maximum, dtype=np.float64).ravel()
        if lo.shape != hi.shape or (hi < lo).any():
            raise ValueError("scaling bounds must satisfy max >= min per feature")
        object.__setattr__(self, "minimum", lo)
        object.__setattr__(self, "maximum", hi)

    @property
    def dim(self):
        return self.minimum.size

    @property
    def constant(self):
        return self.maximum == self.minimum

    def transform(self, X, return_clipped=False):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, self.dim)
        if X.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim} feature columns, got {X.shape[1]}")
        span = np.where(self.constant, 1.0, self.maximum - self.minimum)
        out = (X - self.minimum) / span
        out[:, self.constant] = 0.5
        outside = (out < 0.0) | (out > 1.0)
        n_clipped = int(outside.sum())
        if n_clipped:
            warnings.warn(f"{n_clipped} feature values outside the training range were clipped")
            np.clip(out, 0.0, 1.0, out=out)
        return (out, n_clipped) if return_clipped else out

    def inverse_transform(self, U):
        U = np.asarray(U, dtype=np.float64)
        out = self.minimum + U * (self.maximum - self.minimum)
        out[:, self.constant] = self.minimum[self.constant]
        return out

    def to_dict(self):
        return {"minimum": self.minimum.tolist(), "maximum": self.maximum.tolist()}

    @classmethod
    def from_dict(cls, doc):
        return cls(np.array(doc["minimum"], dtype=np.float64), np.array(doc["maximum"], dtype=np.float64))

    @classmethod
    def unit(cls, d):
        return cls(np.zeros(d), np.ones(d))


def scale_features(X, bounds=None):
    """Min-max scale each column to [0, 1].

    ``bounds`` (a ``(lo, hi)`` pair of per-feature arrays) fixes the range
    instead of using the column extremes, e.g. when features already live on
    a known box. Returns ``(scaled, FeatureScaling)``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.size == 0:
        raise ValueError("cannot scale an empty feature matrix")
    if bounds is None:
        scaling = FeatureScaling(X.min(axis=0), X.max(axis=0))
    else:
        scaling = FeatureScaling(*bounds)
    if scaling.constant.any():
        warnings.warn(f"constant feature columns {np.flatnonzero(scaling.constant).tolist()} mapped to 0.5")
    return scaling.transform(X), scaling


def quantile_rank(n, q):
    """1-based rank ``ceil(q n)`` of the threshold order statistic."""
    if not 0.0 < q < 1.0:
        raise ThresholdError(f"quantile level must lie in (0, 1), got {q}")
    # guard against q*n landing a hair above an integer
    return max(1, math.ceil(q * n - 1e-9))


def empirical_threshold(y, q):
    """The ``ceil(q n)``-th order statistic of ``y``."""
    y = np.asarray(y, dtype=np.float64).ravel()
    rank = quantile_rank(y.size, q)
    if y.size < MIN_SAMPLE:
        raise ThresholdError(f"need at least {MIN_SAMPLE} observations, got {y.size}")
    return float(np.partition(y, rank - 1)[rank - 1])


def reduce_multi_trigger(Y):
    """Row-wise minimum of a trigger matrix, giving a single trigger per row."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[1] < 1:
        raise ValueError("need at least one trigger column")
    if not np.isfinite(Y).all():
        raise ValueError("trigger matrix has non-finite entries")
    return Y.min(axis=1)


def continuous_to_indicator(z, u):
    """``1`` where ``z > u`` (strict), else ``0``."""
    return (np.asarray(z, dtype=np.float64) > u).astype(np.int64)


def exceedance_indicator_pi(z, y):
    """``1`` where ``z > y`` (strict): the extremal probabilistic index event."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if z.shape != y.shape:
        raise ValueError("z and y differ in length")
    return (z > y).astype(np.int64)


def ordinal_to_one_hot(levels, categories):
    levels = np.asarray(levels)
    if levels.size and (levels.min() < 1 or levels.max() > categories):
        raise ValueError(f"ordinal levels must lie in 1..{categories}")
    out = np.zeros((levels.size, categories), dtype=np.int64)
    out[np.arange(levels.size), levels.astype(np.int64) - 1] = 1
    return out


@dataclass
class RawDataset:
    """Features, trigger(s) and follow-up outcomes on their original scale.

    ``trigger`` may be a matrix of competing triggers; it is reduced with
    :func:`reduce_multi_trigger`. Follow-ups that are undefined for
    non-exceeding rows may be NaN there.
    """

    features: np.ndarray
    trigger: np.ndarray
    followup: np.ndarray
    kind: str = "binary"
    categories: int = 2

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        self.trigger = np.asarray(self.trigger, dtype=np.float64)
        self.followup = np.asarray(self.followup, dtype=np.float64)
        if self.kind not in OUTCOME_KINDS:
            raise ValueError(f"unknown follow-up kind {self.kind!r}")
        n = self.features.shape[0]
        if self.trigger.shape[0] != n or self.followup.shape[0] != n:
            raise ValueError("features, trigger and follow-up must have the same row count")
        if self.kind == "categorical" and self.followup.ndim == 2:
            self.categories = self.followup.shape[1]

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def trigger_vector(self):
        return self.trigger if self.trigger.ndim == 1 else reduce_multi_trigger(self.trigger)


@dataclass
class ThresholdedSample:
    """``D_n``: follow-up outcomes and scaled features for rows with ``y > u``."""

    features: np.ndarray
    outcomes: np.ndarray
    threshold: float
    quantile: float
    scaling: FeatureScaling
    index: np.ndarray
    kind: str = "binary"
    categories: int = 2
    levels: np.ndarray = field(default=None, repr=False)

    @property
    def n_retained(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def subset(self, rows):
        """Resampled copy, used by the bootstrap."""
        rows = np.asarray(rows)
        return ThresholdedSample(
            self.features[rows],
            self.outcomes[rows],
            self.threshold,
            self.quantile,
            self.scaling,
            self.index[rows],
            self.kind,
            self.categories,
            None if self.levels is None else self.levels[rows],
        )


def build_threshold_sample(raw, q=0.95, bounds=None, one_hot_ordinal=False, followup_threshold=None):
    """Threshold the trigger at its empirical ``q`` quantile and keep ``y > u``.

    Binary follow-ups give a 0/1 vector, categorical ones an ``n x J`` one-hot
    matrix, ordinal ones their levels in ``1..J`` (one-hot on request) and
    continuous ones the indicator ``z > followup_threshold`` (default ``u``).
    Features are scaled on the retained rows unless ``bounds`` is given.
    """
    y = raw.trigger_vector
    u = empirical_threshold(y, q)
    index = np.flatnonzero(y > u)
    if index.size < MIN_RETAINED:
        raise ThresholdError(
            f"only {index.size} exceedances above u={u:g}; need at least {MIN_RETAINED}. "
            "Lower the quantile level or supply more data."
        )
    follow = raw.followup[index]
    if np.isnan(follow).any():
        raise ValueError("follow-up outcomes are missing on exceedance rows")
    levels = None
    categories = raw.categories
    if raw.kind == "binary":
        outcomes = follow.astype(np.int64).ravel()
        if not np.isin(outcomes, (0, 1)).all():
            raise ValueError("binary follow-ups must be 0/1")
    elif raw.kind == "categorical":
        if follow.ndim == 1:
            outcomes = ordinal_to_one_hot(follow.astype(np.int64), categories)
        else:
            outcomes = follow.astype(np.int64)
            if not (outcomes.sum(axis=1) == 1).all():
                raise ValueError("categorical follow-ups must be one-hot rows")
    elif raw.kind == "ordinal":
        levels = follow.astype(np.int64).ravel()
        if levels.min() < 1 or levels.max() > categories:
            raise ValueError(f"ordinal levels must lie in 1..{categories}")
        outcomes = ordinal_to_one_hot(levels, categories) if one_hot_ordinal else levels
    else:
        cut = u if followup_threshold is None else followup_threshold
        outcomes = continuous_to_indicator(follow.ravel(), cut)
    features, scaling = scale_features(raw.features[index], bounds)
    return ThresholdedSample(features, outcomes, u, q, scaling, index, raw.kind, categories, levels)


@dataclass(frozen=True)
class ColumnMapping:
    """Roles of CSV columns; loaded from a JSON sidecar file."""

    features: tuple
    trigger: tuple
    followup: tuple
    kind: str = "binary"
    categories: int = 2

    @classmethod
    def from_dict(cls, doc):
        def names(value):
            return (value,) if isinstance(value, str) else tuple(value)

        try:
            mapping = cls(
                names(doc["features"]),
                names(doc["trigger"]),
                names(doc["followup"]),
                doc.get("kind", "binary"),
                int(doc.get("categories", 2)),
            )
        except KeyError as exc:
            raise ValueError(f"column mapping lacks {exc}") from exc
        if mapping.kind not in OUTCOME_KINDS:
            raise ValueError(f"unknown follow-up kind {mapping.kind!r}")
        if mapping.kind == "categorical" and len(mapping.followup) > 1:
            mapping = cls(mapping.features, mapping.trigger, mapping.followup, mapping.kind, len(mapping.followup))
        return mapping

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        return {
            "features": list(self.features),
            "trigger": list(self.trigger),
            "followup": list(self.followup),
            "kind": self.kind,
            "categories": self.categories,
        }


def read_table(path):
    """Header plus float matrix from a comma-separated UTF-8 file; blanks are NaN."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path} is empty") from None
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(f"{path}:{line_no}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) if v.strip() else math.nan for v in row])
            except ValueError as exc:
                raise ValueError(f"{path}:{line_no}: {exc}") from exc
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    return header, data


def read_dataset(path, mapping):
    """Load a :class:`RawDataset` from CSV according to a :class:`ColumnMapping`."""
    header, data = read_table(path)
    col = {name: i for i, name in enumerate(header)}
    missing = [c for c in mapping.features + mapping.trigger + mapping.followup if c not in col]
    if missing:
        raise ValueError(f"columns {missing} not found in {path}")

    def take(names):
        return data[:, [col[c] for c in names]]

    trigger = take(mapping.trigger)
    follow = take(mapping.followup)
    if follow.shape[1] == 1:
        follow = follow[:, 0]
    return RawDataset(
        take(mapping.features),
        trigger[:, 0] if trigger.shape[1] == 1 else trigger,
        follow,
        mapping.kind,
        mapping.categories,
    )
