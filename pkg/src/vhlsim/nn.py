"""Dense-network numeric kernel: forward/backward, losses, optimizer step.

Parameters live in one flat float64 vector; per-layer weights and biases are
views into it, so aggregation and optimizer updates are plain vector algebra.
Weights are stored (fan_in, fan_out) and applied as ``h @ W + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericError, ShapeError

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths run from the input dim through the hidden layers to the
    feature dim; the classifier head maps the feature layer onto
    ``natural_classes + virtual_classes`` logits."""

    layer_widths: tuple[int, ...]
    natural_classes: int
    virtual_classes: int = 0
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ShapeError("layer_widths needs an input and at least one feature width")
        if any(w < 1 for w in self.layer_widths):
            raise ShapeError(f"non-positive width in {self.layer_widths}")
        if self.natural_classes < 1 or self.virtual_classes < 0:
            raise ShapeError("natural_classes must be >= 1 and virtual_classes >= 0")
        if self.activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.activation!r}")

    @property
    def output_width(self) -> int:
        return self.natural_classes + self.virtual_classes

    @property
    def n_hidden(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def feature_dim(self) -> int:
        return self.layer_widths[-1]

    def layer_shapes(self) -> list[tuple[int, int]]:
        widths = list(self.layer_widths) + [self.output_width]
        return [(widths[i], widths[i + 1]) for i in range(len(widths) - 1)]

    @property
    def size(self) -> int:
        return sum(a * b + b for a, b in self.layer_shapes())

    def resolve_layer(self, layer: int) -> int:
        """Map a possibly negative hidden-layer index onto 0..n_hidden-1."""
        idx = layer + self.n_hidden if layer < 0 else layer
        if not 0 <= idx < self.n_hidden:
            raise ShapeError(f"feature layer {layer} out of range for {self.n_hidden} hidden layers")
        return idx


class ModelParams:
    """Flat parameter vector with per-layer (weight, bias) views.

    Also used for gradients, control variates and momentum buffers, which
    share the layout.
    """

    __slots__ = ("spec", "flat")

    def __init__(self, spec: MlpSpec, flat=None):
        self.spec = spec
        if flat is None:
            flat = np.zeros(spec.size)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (spec.size,):
            raise ShapeError(f"flat vector has shape {flat.shape}, expected ({spec.size},)")
        self.flat = flat

    @classmethod
    def unflatten(cls, spec: MlpSpec, vector) -> "ModelParams":
        return cls(spec, np.array(vector, dtype=np.float64, copy=True))

    @classmethod
    def from_layers(cls, spec: MlpSpec, layers) -> "ModelParams":
        parts = []
        for i, ((w, b), (fan_in, fan_out)) in enumerate(zip(layers, spec.layer_shapes())):
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ShapeError(f"got W{w.shape}, b{b.shape}, expected W{(fan_in, fan_out)}", layer=i)
            parts.extend([w.ravel(), b])
        if len(parts) != 2 * len(spec.layer_shapes()):
            raise ShapeError("wrong number of layers")
        return cls(spec, np.concatenate(parts))

    def flatten(self) -> np.ndarray:
        return self.flat.copy()

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out = []
        offset = 0
        for fan_in, fan_out in self.spec.layer_shapes():
            w = self.flat[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = self.flat[offset : offset + fan_out]
            offset += fan_out
            out.append((w, b))
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, self.flat.copy())

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.spec)

    def __add__(self, other):
        return ModelParams(self.spec, self.flat + other.flat)

    def __sub__(self, other):
        return ModelParams(self.spec, self.flat - other.flat)

    def __mul__(self, scalar):
        return ModelParams(self.spec, self.flat * scalar)

    __rmul__ = __mul__

    def __repr__(self):
        return f"ModelParams(size={self.flat.size}, widths={self.spec.layer_widths})"


Gradient = ModelParams


def init_params(spec: MlpSpec, rng: np.random.Generator) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    layers = []
    for fan_in, fan_out in spec.layer_shapes():
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        b = rng.uniform(-bound, bound, size=fan_out)
        layers.append((w, b))
    return ModelParams.from_layers(spec, layers)


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    features: list[np.ndarray]
    logits: np.ndarray
    pre_activations: list[np.ndarray] = field(repr=False, default_factory=list)

    @property
    def batch_size(self) -> int:
        return self.inputs.shape[0]


def _activate(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(name, z, h, upstream):
    if name == "relu":
        return upstream * (z > 0)
    return upstream * (1.0 - h * h)


def forward(spec: MlpSpec, params: ModelParams, batch) -> ForwardTrace:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != spec.layer_widths[0]:
        raise ShapeError(
            f"batch shape {x.shape} does not match input width {spec.layer_widths[0]}", layer=0
        )
    if params.spec != spec:
        raise ShapeError("params were built for a different MlpSpec")
    layers = params.layers()
    h = x
    features, pre = [], []
    for w, b in layers[:-1]:
        z = h @ w + b
        h = _activate(spec.activation, z)
        pre.append(z)
        features.append(h)
    w, b = layers[-1]
    logits = h @ w + b
    return ForwardTrace(inputs=x, features=features, logits=logits, pre_activations=pre)


def backward(
    spec: MlpSpec,
    params: ModelParams,
    trace: ForwardTrace,
    logits_grad=None,
    feature_grads: dict[int, np.ndarray] | None = None,
) -> Gradient:
    """Reverse-mode gradient of a loss given dL/dlogits and optional dL/dfeature
    injections keyed by hidden-layer index (negative indices allowed)."""
    layers = params.layers()
    if logits_grad is None:
        upstream = np.zeros_like(trace.logits)
    else:
        upstream = np.asarray(logits_grad, dtype=np.float64)
        if upstream.shape != trace.logits.shape:
            raise ShapeError(f"logits gradient {upstream.shape} vs logits {trace.logits.shape}", layer=len(layers) - 1)
    injected = {}
    for layer, g in (feature_grads or {}).items():
        idx = spec.resolve_layer(layer)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != trace.features[idx].shape:
            raise ShapeError(f"feature gradient {g.shape} vs features {trace.features[idx].shape}", layer=idx)
        injected[idx] = injected.get(idx, 0.0) + g

    grads = [None] * len(layers)
    h_in = trace.features[-1] if trace.features else trace.inputs
    w, _ = layers[-1]
    grads[-1] = (h_in.T @ upstream, upstream.sum(axis=0))
    dh = upstream @ w.T
    for i in range(len(layers) - 2, -1, -1):
        if i in injected:
            dh = dh + injected[i]
        dz = _activation_grad(spec.activation, trace.pre_activations[i], trace.features[i], dh)
        h_in = trace.features[i - 1] if i > 0 else trace.inputs
        w, _ = layers[i]
        grads[i] = (h_in.T @ dz, dz.sum(axis=0))
        if i > 0:
            dh = dz @ w.T
    return ModelParams.from_layers(spec, grads)


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels):
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] < 1:
        raise InputError("cross_entropy needs a non-empty 2-D logits matrix")
    if labels.shape != (logits.shape[0],):
        raise InputError(f"labels shape {labels.shape} vs {logits.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise InputError(f"label out of range [0, {logits.shape[1]})")
    n = logits.shape[0]
    logp = _log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


def supcon_loss(features, labels, temperature=0.07, frozen_rows=None):
    """Supervised contrastive loss over L2-normalised rows.

    Only non-frozen rows act as anchors, and frozen rows get a zero gradient
    (they behave as constants). Anchors without a positive are skipped.
    With no valid anchor the loss and gradient are 0.
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    n = x.shape[0]
    if x.ndim != 2 or n < 2:
        raise InputError("supcon_loss needs at least 2 feature rows")
    if temperature <= 0:
        raise InputError("temperature must be positive")
    frozen = np.zeros(n, dtype=bool) if frozen_rows is None else np.asarray(frozen_rows, dtype=bool)
    if frozen.shape != (n,) or labels.shape != (n,):
        raise InputError("labels and frozen_rows must have one entry per row")
    if frozen.all():
        raise InputError("every row is frozen, no anchors left")
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0.0):
        raise NumericError("cannot normalise a zero-norm feature row", index=int(np.flatnonzero(norms == 0.0)[0]))
    z = x / norms[:, None]

    sim = z @ z.T / temperature
    off_diag = ~np.eye(n, dtype=bool)
    positives = (labels[:, None] == labels[None, :]) & off_diag
    pos_count = positives.sum(axis=1)
    anchors = ~frozen & (pos_count > 0)
    if not anchors.any():
        return 0.0, np.zeros_like(x)

    masked = np.where(off_diag, sim, -np.inf)
    row_max = masked.max(axis=1, keepdims=True)
    exp = np.exp(masked - row_max)
    denom = exp.sum(axis=1, keepdims=True)
    log_prob = masked - row_max - np.log(denom)
    softmax = exp / denom

    a = np.flatnonzero(anchors)
    n_anchors = a.size
    pos_a = positives[a]
    mean_log_pos = np.where(pos_a, log_prob[a], 0.0).sum(axis=1) / pos_count[a]
    loss = -mean_log_pos.mean()

    # dL/dsim for anchor rows only.
    g_sim = np.zeros((n, n))
    g_sim[a] = (softmax[a] - pos_a / pos_count[a][:, None]) / n_anchors
    g_z = (g_sim + g_sim.T) @ z / temperature
    g_x = (g_z - z * np.sum(z * g_z, axis=1, keepdims=True)) / norms[:, None]
    g_x[frozen] = 0.0
    return float(loss), g_x


def finite_diff_grad(spec: MlpSpec, params: ModelParams, loss_fn, eps: float = 1e-5) -> Gradient:
    """Central differences of ``loss_fn(params)`` in every coordinate."""
    if eps <= 0:
        raise InputError("eps must be positive")
    base = params.flat
    out = np.empty_like(base)
    for i in range(base.size):
        plus = base.copy()
        plus[i] += eps
        minus = base.copy()
        minus[i] -= eps
        f_plus = loss_fn(ModelParams(spec, plus))
        f_minus = loss_fn(ModelParams(spec, minus))
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError("non-finite loss during finite differencing", index=i)
        out[i] = (f_plus - f_minus) / (2 * eps)
    return ModelParams(spec, out)


def sgd_momentum_step(params: ModelParams, grad: Gradient, lr, momentum=0.0, weight_decay=0.0, buffer=None):
    """One heavy-ball step with coupled L2 decay.

    ``buffer`` (a ModelParams or None) is the momentum state; returns the new
    params and the new buffer. Inputs are not mutated.
    """
    if lr <= 0:
        raise InputError("lr must be positive")
    if not 0.0 <= momentum < 1.0:
        raise InputError("momentum must lie in [0, 1)")
    if weight_decay < 0:
        raise InputError("weight_decay must be non-negative")
    bad = np.flatnonzero(~np.isfinite(grad.flat))
    if bad.size:
        raise NumericError("non-finite gradient entry", index=int(bad[0]))
    d = grad.flat + weight_decay * params.flat if weight_decay else grad.flat.copy()
    if buffer is not None:
        d = momentum * buffer.flat + d
    new_buffer = ModelParams(params.spec, d)
    return ModelParams(params.spec, params.flat - lr * d), new_buffer
