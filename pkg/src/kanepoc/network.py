"""KANE networks: spline-matrix layers followed by a range-enforcing g-layer.

Layer ``l`` maps ``n_l`` inputs to ``n_{l+1}`` outputs through univariate
B-spline functions, ``s_i = sum_j sum_k beta[i, j, k] B_k(z_j)``. The first
layer reads the features directly; every later layer reads the logistic
squash of the previous sums so that its splines stay on [0, 1]. The final
sums pass through the g-layer (sigmoid, softmax or identity).
"""
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from ._backend import kernels
from .losses import bce_loss_and_grad, ce_loss_and_grad
from .splines import SplineDomainError, SplineSpec, design_matrix

FORMAT_VERSION = 1
_SIG_LO = np.finfo(np.float64).tiny
_SIG_HI = np.nextafter(1.0, 0.0)


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced inf/nan."""

    def __init__(self, layer, where):
        super().__init__(f"non-finite values in {where} of layer {layer}")
        self.layer = layer


class ModelFormatError(ValueError):
    """A serialized model document is malformed or inconsistent."""


@dataclass(frozen=True)
class GLayer:
    kind: str = "sigmoid"
    categories: int = 1

    def __post_init__(self):
        if self.kind not in ("sigmoid", "softmax", "identity"):
            raise ValueError(f"unknown g-layer {self.kind!r}")
        if self.kind == "softmax" and self.categories < 2:
            raise ValueError("softmax needs at least 2 categories")
        if self.kind != "softmax" and self.categories != 1:
            raise ValueError(f"{self.kind} g-layer has a single output")

    @classmethod
    def sigmoid(cls):
        return cls("sigmoid")

    @classmethod
    def softmax(cls, categories):
        return cls("softmax", int(categories))

    @classmethod
    def identity(cls):
        return cls("identity")

    @property
    def width(self):
        return self.categories

    def __call__(self, s):
        if self.kind == "sigmoid":
            return np.clip(expit(s), _SIG_LO, _SIG_HI)
        if self.kind == "softmax":
            e = np.exp(s - s.max(axis=1, keepdims=True))
            return e / e.sum(axis=1, keepdims=True)
        return s.copy()

    def backward(self, out, grad_out):
        if self.kind == "sigmoid":
            return grad_out * out * (1.0 - out)
        if self.kind == "softmax":
            inner = (out * grad_out).sum(axis=1, keepdims=True)
            return out * (grad_out - inner)
        return grad_out


def univariate_eval(coeffs, spec, x):
    """``sum_k coeffs[k] B_k(x)`` for scalar or array ``x`` in [0, 1]."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.shape != (spec.n_basis,):
        raise ValueError(f"expected {spec.n_basis} coefficients, got shape {coeffs.shape}")
    x = np.asarray(x, dtype=np.float64)
    out = design_matrix(spec, x.ravel()) @ coeffs
    return float(out[0]) if x.ndim == 0 else out.reshape(x.shape)


def squash(s):
    """Logistic map used between spline layers; numerically stable."""
    return expit(s)


def canonical_widths(d, outputs=1, depth=3):
    """``(d, 2d + 1, ..., outputs)``; ``depth`` counts the node layers."""
    if depth < 2:
        raise ValueError("a network needs at least two node layers")
    return (d,) + (2 * d + 1,) * (depth - 2) + (outputs,)


@dataclass(frozen=True, eq=False)
class KaneNetwork:
    widths: tuple
    spec: SplineSpec
    coefficients: tuple
    g_layer: GLayer = field(default_factory=GLayer.sigmoid)

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid widths {widths}")
        if widths[-1] != self.g_layer.width:
            raise ValueError(
                f"final width {widths[-1]} does not match the {self.g_layer.kind} g-layer"
            )
        coeffs = []
        for l, beta in enumerate(self.coefficients):
            beta = np.array(beta, dtype=np.float64)
            expected = (widths[l + 1], widths[l], self.spec.n_basis)
            if beta.shape != expected:
                raise ValueError(f"layer {l + 1} coefficients {beta.shape}, expected {expected}")
            if not np.isfinite(beta).all():
                raise ValueError(f"layer {l + 1} coefficients are not finite")
            beta.setflags(write=False)
            coeffs.append(beta)
        if len(coeffs) != len(widths) - 1:
            raise ValueError("need one coefficient tensor per layer transition")
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "coefficients", tuple(coeffs))

    @classmethod
    def initialize(cls, widths, spec=None, g_layer=None, seed=0, scale=0.1):
        """Random network with every coefficient drawn from N(0, scale^2)."""
        spec = spec or SplineSpec()
        g_layer = g_layer or GLayer.sigmoid()
        rng = np.random.default_rng(seed)
        widths = tuple(widths)
        coeffs = [
            rng.normal(0.0, scale, size=(widths[l + 1], widths[l], spec.n_basis))
            for l in range(len(widths) - 1)
        ]
        return cls(widths, spec, tuple(coeffs), g_layer)

    @classmethod
    def zeros(cls, widths, spec=None, g_layer=None):
        spec = spec or SplineSpec()
        widths = tuple(widths)
        coeffs = [np.zeros((widths[l + 1], widths[l], spec.n_basis)) for l in range(len(widths) - 1)]
        return cls(widths, spec, tuple(coeffs), g_layer or GLayer.sigmoid())

    @property
    def input_dim(self):
        return self.widths[0]

    @property
    def n_params(self):
        return sum(b.size for b in self.coefficients)

    def flat(self):
        return np.concatenate([b.ravel() for b in self.coefficients])

    def with_flat(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        out, pos = [], 0
        for b in self.coefficients:
            out.append(theta[pos : pos + b.size].reshape(b.shape))
            pos += b.size
        return KaneNetwork(self.widths, self.spec, tuple(out), self.g_layer)

    def forward(self, x):
        """Output vector (length 1 or J) for a single feature vector."""
        x = np.asarray(x, dtype=np.float64).reshape(1, -1)
        return self.forward_batch(x)[0]

    def forward_batch(self, X):
        out, _ = _forward(self, X)
        return out

    __call__ = forward_batch

    def to_dict(self):
        return {
            "format": "kanepoc-network",
            "version": FORMAT_VERSION,
            "widths": list(self.widths),
            "degree": self.spec.degree,
            "intervals": self.spec.intervals,
            "g_layer": self.g_layer.kind,
            "categories": self.g_layer.categories,
            "coefficients": [b.ravel().tolist() for b in self.coefficients],
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            if doc.get("format") != "kanepoc-network":
                raise ModelFormatError("not a kanepoc network document")
            if doc.get("version") != FORMAT_VERSION:
                raise ModelFormatError(
                    f"unsupported network format version {doc.get('version')!r}"
                )
            widths = tuple(int(w) for w in doc["widths"])
            spec = SplineSpec(int(doc["degree"]), int(doc["intervals"]))
            g_layer = GLayer(doc["g_layer"], int(doc["categories"]))
            flat = doc["coefficients"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"malformed network document: {exc}") from exc
        if len(widths) < 2 or len(flat) != len(widths) - 1:
            raise ModelFormatError("layer count does not match widths")
        coeffs = []
        for l, values in enumerate(flat):
            arr = np.array(values, dtype=np.float64)
            shape = (widths[l + 1], widths[l], spec.n_basis)
            if arr.size != math.prod(shape):
                raise ModelFormatError(
                    f"layer {l + 1} holds {arr.size} coefficients, widths imply {shape}"
                )
            if not np.isfinite(arr).all():
                raise ModelFormatError(f"layer {l + 1} has non-finite coefficients")
            coeffs.append(arr.reshape(shape))
        try:
            return cls(widths, spec, tuple(coeffs), g_layer)
        except ValueError as exc:
            raise ModelFormatError(str(exc)) from exc


def _check_inputs(net, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1 and net.input_dim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[1] != net.input_dim:
        raise ValueError(f"expected an n x {net.input_dim} feature matrix, got shape {X.shape}")
    if X.size and (np.isnan(X).any() or X.min() < 0.0 or X.max() > 1.0):
        raise SplineDomainError(
            "features must lie in the unit cube; scale them with kanepoc.evt.scale_features"
        )
    return X


def _forward(net, X):
    X = _check_inputs(net, X)
    n = X.shape[0]
    spec = net.spec
    q = spec.degree + 1
    z = np.ascontiguousarray(X)
    cache = []
    n_layers = len(net.coefficients)
    s = None
    for l, beta in enumerate(net.coefficients):
        n_in = z.shape[1]
        span, vals, ders = kernels.basis_local(z.ravel(), spec.knots, spec.degree, spec.n_basis)
        span = span.reshape(n, n_in)
        vals = vals.reshape(n, n_in, q)
        ders = ders.reshape(n, n_in, q)
        s = kernels.layer_forward(span, vals, beta)
        if not np.isfinite(s).all():
            raise NonFiniteError(l + 1, "forward sums")
        cache.append((span, vals, ders, z))
        if l < n_layers - 1:
            z = np.ascontiguousarray(squash(s))
    out = net.g_layer(s)
    return out, cache


def loss_and_gradient(net, X, targets, loss_kind="bce", weights=None):
    """Mean loss and its exact gradient, one array per coefficient tensor."""
    out, cache = _forward(net, X)
    if loss_kind == "bce":
        if out.shape[1] != 1:
            raise ValueError("binary cross-entropy needs a single-output network")
        value, g = bce_loss_and_grad(out[:, 0], targets, weights)
        g = g[:, None]
    elif loss_kind == "ce":
        value, g = ce_loss_and_grad(out, targets, weights)
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    ds = net.g_layer.backward(out, g)
    grads = [None] * len(cache)
    for l in range(len(cache) - 1, -1, -1):
        span, vals, ders, z = cache[l]
        dbeta, dz = kernels.layer_backward(span, vals, ders, net.coefficients[l], ds)
        if not (np.isfinite(dbeta).all() and np.isfinite(dz).all()):
            raise NonFiniteError(l + 1, "backward pass")
        grads[l] = dbeta
        if l > 0:
            ds = dz * z * (1.0 - z)
    return value, grads


def gradient(net, X, targets, loss_kind="bce", weights=None):
    return loss_and_gradient(net, X, targets, loss_kind, weights)[1]


def dumps(net):
    return json.dumps(net.to_dict())


def loads(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"not valid JSON: {exc}") from exc
    return KaneNetwork.from_dict(doc)


class PocEstimate:
    """A fitted network together with the threshold and feature scaling it used.

    ``predict`` takes features on their original scale; ``predict_unit`` takes
    features already in the unit cube.
    """

    def __init__(self, network, threshold=None, quantile=None, scaling=None, metadata=None):
        from .evt import FeatureScaling

        self.network = network
        self.threshold = threshold
        self.quantile = quantile
        self.scaling = scaling if scaling is not None else FeatureScaling.unit(network.input_dim)
        self.metadata = dict(metadata or {})

    @property
    def dim(self):
        return self.network.input_dim

    @property
    def outputs(self):
        return self.network.widths[-1]

    def predict_unit(self, U):
        return self.network.forward_batch(U)

    def predict(self, X):
        return self.predict_unit(self.scaling.transform(X))

    def to_dict(self):
        return {
            "format": "kanepoc-estimate",
            "version": FORMAT_VERSION,
            "network": self.network.to_dict(),
            "threshold": self.threshold,
            "quantile": self.quantile,
            "scaling": self.scaling.to_dict(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, doc):
        from .evt import FeatureScaling

        if doc.get("format") != "kanepoc-estimate":
            raise ModelFormatError("not a kanepoc estimate document")
        if doc.get("version") != FORMAT_VERSION:
            raise ModelFormatError(f"unsupported estimate format version {doc.get('version')!r}")
        net = KaneNetwork.from_dict(doc["network"])
        scaling = FeatureScaling.from_dict(doc["scaling"])
        if scaling.dim != net.input_dim:
            raise ModelFormatError("scaling dimension does not match the network input width")
        return cls(net, doc.get("threshold"), doc.get("quantile"), scaling, doc.get("metadata"))


class ConstantEstimate:
    """Stand-in for a fit when the training labels contain a single class."""

    def __init__(self, rate, dim, threshold=None, quantile=None, scaling=None, metadata=None):
        from .evt import FeatureScaling

        self.rate = float(rate)
        self._dim = int(dim)
        self.threshold = threshold
        self.quantile = quantile
        self.scaling = scaling if scaling is not None else FeatureScaling.unit(self._dim)
        self.metadata = dict(metadata or {})

    @property
    def dim(self):
        return self._dim

    @property
    def outputs(self):
        return 1

    def predict_unit(self, U):
        U = np.asarray(U, dtype=np.float64).reshape(-1, self._dim)
        return np.full((U.shape[0], 1), self.rate)

    def predict(self, X):
        return self.predict_unit(self.scaling.transform(X))

    def to_dict(self):
        return {
            "format": "kanepoc-constant",
            "version": FORMAT_VERSION,
            "rate": self.rate,
            "dim": self._dim,
            "threshold": self.threshold,
            "quantile": self.quantile,
            "scaling": self.scaling.to_dict(),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, doc):
        from .evt import FeatureScaling

        return cls(
            doc["rate"], doc["dim"], doc.get("threshold"), doc.get("quantile"),
            FeatureScaling.from_dict(doc["scaling"]), doc.get("metadata"),
        )


def estimate_from_dict(doc):
    kind = doc.get("format") if isinstance(doc, dict) else None
    if kind == "kanepoc-estimate":
        return PocEstimate.from_dict(doc)
    if kind == "kanepoc-constant":
        return ConstantEstimate.from_dict(doc)
    raise ModelFormatError(f"unknown estimate document format {kind!r}")
