"""Frank-Hall decomposition of ordered follow-up categories into binary fits."""
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import isotonic_regression

from .network import FORMAT_VERSION, ModelFormatError, estimate_from_dict
from .training import FitConfig, constant_fit, fit


def make_cumulative_labels(levels, j, categories=None):
    """Binary labels ``level > j`` for threshold ``j`` in ``1..J-1``."""
    levels = np.asarray(levels)
    top = categories if categories is not None else (int(levels.max()) if levels.size else 1)
    if not 1 <= j <= top - 1:
        raise ValueError(f"threshold index {j} outside 1..{top - 1}")
    return (levels > j).astype(np.int64)


def monotone_repair(pi):
    """Project each row of exceedance probabilities onto the non-increasing cone.

    Rows that are already non-increasing are returned untouched. Returns
    ``(repaired, n_repaired_rows)``.
    """
    pi = np.clip(np.asarray(pi, dtype=np.float64), 0.0, 1.0)
    if pi.ndim == 1:
        pi = pi[None, :]
    out = pi.copy()
    bad = np.flatnonzero((np.diff(pi, axis=1) > 0).any(axis=1))
    for r in bad:
        out[r] = isotonic_regression(pi[r], increasing=False).x
    return out, bad.size


def frank_hall_probs(pi):
    """Category probabilities from ``pi_j = P(level > j)``, j = 1..J-1.

    ``a_1 = 1 - pi_1``, ``a_j = pi_{j-1} - pi_j`` and ``a_J = pi_{J-1}``, after
    the monotone repair so every row lies on the simplex.
    """
    pi, _ = monotone_repair(pi)
    n = pi.shape[0]
    upper = np.hstack([np.ones((n, 1)), pi])
    lower = np.hstack([pi, np.zeros((n, 1))])
    return np.clip(upper - lower, 0.0, 1.0)


@dataclass
class OrdinalModel:
    categories: int
    submodels: list
    reports: list = field(default_factory=list)
    constant: list = field(default_factory=list)
    repaired_training_rows: int = 0

    @property
    def dim(self):
        return self.submodels[0].dim

    @property
    def scaling(self):
        return self.submodels[0].scaling

    @property
    def threshold(self):
        return self.submodels[0].threshold

    @property
    def outputs(self):
        return self.categories

    def exceedance_probs(self, U):
        return np.column_stack([m.predict_unit(U)[:, 0] for m in self.submodels])

    def predict_unit(self, U):
        return frank_hall_probs(self.exceedance_probs(U))

    def predict(self, X):
        return self.predict_unit(self.scaling.transform(X))

    def to_dict(self):
        return {
            "format": "kanepoc-ordinal",
            "version": FORMAT_VERSION,
            "categories": self.categories,
            "submodels": [m.to_dict() for m in self.submodels],
            "constant": list(self.constant),
            "repaired_training_rows": self.repaired_training_rows,
            "reports": [r.to_dict() if r is not None else None for r in self.reports],
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format") != "kanepoc-ordinal":
            raise ModelFormatError("not a kanepoc ordinal document")
        if doc.get("version") != FORMAT_VERSION:
            raise ModelFormatError(f"unsupported ordinal format version {doc.get('version')!r}")
        subs = [estimate_from_dict(d) for d in doc["submodels"]]
        if len(subs) != doc["categories"] - 1:
            raise ModelFormatError("an ordinal model needs J - 1 sub-models")
        return cls(doc["categories"], subs, [], list(doc.get("constant", [])),
                   int(doc.get("repaired_training_rows", 0)))


def ordinal_category_probs(model, x):
    """Category probabilities at unit-cube points ``x`` (one row per point)."""
    U = np.asarray(x, dtype=np.float64).reshape(-1, model.dim)
    return model.predict_unit(U)


def fit_ordinal(sample, widths=None, spec=None, config=None):
    """Fit the ``J - 1`` cumulative binary problems ``level > j``.

    Sub-fit ``j`` uses seed ``config.init_seed + j``. A label vector with a
    single class gets a constant empirical-rate model and is flagged.
    """
    config = config or FitConfig()
    levels = sample.levels if sample.levels is not None else np.asarray(sample.outcomes)
    J = sample.categories
    if J < 2:
        raise ValueError("ordinal models need at least two categories")
    subs, reports, constant = [], [], []
    for j in range(1, J):
        labels = make_cumulative_labels(levels, j, J)
        sub = _binary_view(sample, labels)
        if labels.min() == labels.max():
            warnings.warn(f"labels for level > {j} are all {labels[0]}; using a constant model")
            subs.append(constant_fit(sub))
            reports.append(None)
            constant.append(True)
            continue
        est, rep = fit(sub, widths, spec, None, config.replace(init_seed=config.init_seed + j))
        subs.append(est)
        reports.append(rep)
        constant.append(False)
    model = OrdinalModel(J, subs, reports, constant)
    _, model.repaired_training_rows = monotone_repair(model.exceedance_probs(sample.features))
    return model


def _binary_view(sample, labels):
    from .evt import ThresholdedSample

    return ThresholdedSample(
        sample.features, labels, sample.threshold, sample.quantile,
        sample.scaling, sample.index, "binary", 2,
    )
