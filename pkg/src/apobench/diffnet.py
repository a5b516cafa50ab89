"""Differentiable models: MLPs, a 2-parameter Rosenbrock model, losses, and
reverse-mode gradients.

Weight matrices are stored fan_in x fan_out, so a forward step is
``a @ W + b`` on row-batched activations.  Parameter vectors (for the dense
oracles) flatten each layer as W.ravel() in C order followed by the bias;
this makes the per-layer Fisher blocks come out as
(input stats) kron (output stats) under that flattening.

ReLU uses subgradient 0 at 0; finite-difference checks are run on smooth
activations or off-kink inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, NumericalError, OracleScaleError
from .numkit import FLOAT

ACTIVATIONS = ("linear", "relu", "sigmoid")
HEADS = ("regression-gaussian-unit-variance", "classification-softmax", "rosenbrock-direct")

JACOBIAN_MAX_PARAMS = 2000


@dataclass(frozen=True)
class LayerSpec:
    fan_in: int
    fan_out: int
    activation: str = "linear"
    has_bias: bool = True

    def __post_init__(self):
        if self.fan_in < 1 or self.fan_out < 1:
            raise ContractError(f"fan extents must be positive, got {self.fan_in}x{self.fan_out}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class Model:
    layers: tuple
    head: str
    kind: str = "mlp"  # "mlp" or "rosenbrock"

    def __post_init__(self):
        if self.head not in HEADS:
            raise ContractError(f"unknown head {self.head!r}")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.fan_out != nxt.fan_in:
                raise ContractError(
                    f"layer extents do not chain: {prev.fan_out} -> {nxt.fan_in}"
                )

    @property
    def d_in(self):
        return self.layers[0].fan_in

    @property
    def d_out(self):
        return self.layers[-1].fan_out


def mlp(widths, activation="sigmoid", head="regression-gaussian-unit-variance",
        out_activation="linear", bias=True):
    """MLP over a width chain, hidden activation everywhere but the last layer."""
    layers = []
    for i, (m, n) in enumerate(zip(widths, widths[1:])):
        act = out_activation if i == len(widths) - 2 else activation
        layers.append(LayerSpec(m, n, act, bias))
    return Model(tuple(layers), head)


def rosenbrock_model():
    """Two free parameters (x, y) stored as a 2x1 weight; the scalar output is
    (1 - x)^2 + 100 (y - x^2)^2 regardless of the (dummy) input rows."""
    return Model((LayerSpec(2, 1, "linear", False),), "rosenbrock-direct", kind="rosenbrock")


@dataclass
class ParamSet:
    """Per-layer weights and optional biases; also reused as a generic
    parameter-shaped container (gradients, optimizer buffers)."""

    weights: list
    biases: list

    def entries(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            if b is not None:
                yield b

    def map(self, fn):
        return ParamSet(
            [fn(w) for w in self.weights],
            [None if b is None else fn(b) for b in self.biases],
        )

    def map2(self, other, fn):
        weights = [fn(a, b) for a, b in zip(self.weights, other.weights)]
        biases = [
            None if a is None else fn(a, b)
            for a, b in zip(self.biases, other.biases)
        ]
        return ParamSet(weights, biases)

    def copy(self):
        return self.map(np.copy)

    def zeros_like(self):
        return self.map(np.zeros_like)

    def dot(self, other):
        return float(sum(np.vdot(a, b) for a, b in zip(self.entries(), other.entries())))

    def sq_norm(self):
        return float(sum(np.vdot(a, a) for a in self.entries()))

    @property
    def size(self):
        return int(sum(a.size for a in self.entries()))

    def all_finite(self):
        return all(np.all(np.isfinite(a)) for a in self.entries())

    def to_flat(self):
        return np.concatenate([np.asarray(a, dtype=FLOAT).ravel() for a in self.entries()])

    def from_flat(self, vec):
        """New ParamSet with this one's shapes filled from a flat vector."""
        vec = np.asarray(vec, dtype=FLOAT)
        if vec.size != self.size:
            raise DimensionError(f"flat vector has {vec.size} entries, need {self.size}")
        weights, biases, k = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vec[k:k + w.size].reshape(w.shape).copy())
            k += w.size
            if b is None:
                biases.append(None)
            else:
                biases.append(vec[k:k + b.size].copy())
                k += b.size
        return ParamSet(weights, biases)


def init_params(model, rng):
    """Fan-in-scaled uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    weights, biases = [], []
    for spec in model.layers:
        bound = 1.0 / np.sqrt(spec.fan_in)
        weights.append(rng.uniform(-bound, bound, size=(spec.fan_in, spec.fan_out)))
        biases.append(np.zeros(spec.fan_out) if spec.has_bias else None)
    return ParamSet(weights, biases)


def zero_params(model):
    return ParamSet(
        [np.zeros((s.fan_in, s.fan_out)) for s in model.layers],
        [np.zeros(s.fan_out) if s.has_bias else None for s in model.layers],
    )


def check_params(model, params):
    for spec, w, b in zip(model.layers, params.weights, params.biases):
        if w.shape != (spec.fan_in, spec.fan_out):
            raise DimensionError(f"weight shape {w.shape} != ({spec.fan_in}, {spec.fan_out})")
        if spec.has_bias and (b is None or b.shape != (spec.fan_out,)):
            raise DimensionError(f"bias missing or misshaped for layer {spec}")
        if not spec.has_bias and b is not None:
            raise DimensionError("unexpected bias on a bias-free layer")


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=FLOAT)
        targets = np.asarray(self.targets)
        if not np.issubdtype(targets.dtype, np.integer):
            targets = targets.astype(FLOAT)
        self.targets = targets
        if self.inputs.ndim != 2:
            raise DimensionError(f"inputs must be 2-D, got {self.inputs.shape}")
        if self.targets.shape[0] != self.inputs.shape[0]:
            raise DimensionError("inputs and targets disagree on row count")
        if self.inputs.shape[0] < 1:
            raise ContractError("batch must contain at least one example")

    @property
    def size(self):
        return self.inputs.shape[0]


@dataclass
class ForwardTrace:
    """Per-layer inputs and pre-activations kept for backprop / KFAC stats.

    layer_inputs[l] is the activation entering layer l (layer_inputs[0] is the
    batch input); preacts[l] = layer_inputs[l] @ W_l (+ b_l).
    """

    layer_inputs: list = field(default_factory=list)
    preacts: list = field(default_factory=list)


def _act(name, s):
    if name == "linear":
        return s
    if name == "relu":
        return np.maximum(s, 0.0)
    return 1.0 / (1.0 + np.exp(-s))  # sigmoid


def _act_deriv(name, s, a):
    if name == "linear":
        return np.ones_like(s)
    if name == "relu":
        return (s > 0).astype(FLOAT)
    return a * (1.0 - a)  # sigmoid, from the cached activation


def _rosenbrock_value(w):
    x, y = float(w[0, 0]), float(w[1, 0])
    return (1.0 - x) ** 2 + 100.0 * (y - x * x) ** 2


def _rosenbrock_grad(w):
    x, y = float(w[0, 0]), float(w[1, 0])
    gx = -2.0 * (1.0 - x) - 400.0 * x * (y - x * x)
    gy = 200.0 * (y - x * x)
    return np.array([[gx], [gy]])


def forward(model, params, inputs):
    """Run the network; returns (outputs, ForwardTrace)."""
    check_params(model, params)
    inputs = np.asarray(inputs, dtype=FLOAT)
    if inputs.ndim != 2:
        raise DimensionError(f"inputs must be 2-D, got {inputs.shape}")
    if model.kind == "rosenbrock":
        f = _rosenbrock_value(params.weights[0])
        outputs = np.full((inputs.shape[0], 1), f)
        return outputs, ForwardTrace([inputs], [outputs.copy()])
    if inputs.shape[1] != model.d_in:
        raise DimensionError(f"inputs have {inputs.shape[1]} features, model wants {model.d_in}")
    trace = ForwardTrace()
    a = inputs
    for spec, w, b in zip(model.layers, params.weights, params.biases):
        trace.layer_inputs.append(a)
        s = a @ w
        if b is not None:
            s = s + b
        trace.preacts.append(s)
        a = _act(spec.activation, s)
    if not np.all(np.isfinite(a)):
        raise NumericalError("forward pass produced non-finite outputs")
    return a, trace


def backward(model, params, trace, out_grad):
    """Vector-Jacobian product of the forward map.

    out_grad is d(scalar)/d(outputs), shape B x d_out.  Returns
    (ParamSet gradient, per-layer pre-activation gradients ds).
    """
    if model.kind == "rosenbrock":
        seed = float(np.sum(out_grad))
        g = ParamSet([seed * _rosenbrock_grad(params.weights[0])], [None])
        return g, [np.asarray(out_grad, dtype=FLOAT)]
    grads_w = [None] * len(model.layers)
    grads_b = [None] * len(model.layers)
    ds_list = [None] * len(model.layers)
    da = np.asarray(out_grad, dtype=FLOAT)
    for idx in range(len(model.layers) - 1, -1, -1):
        spec = model.layers[idx]
        s = trace.preacts[idx]
        a = _act(spec.activation, s)
        ds = da * _act_deriv(spec.activation, s, a)
        ds_list[idx] = ds
        a_prev = trace.layer_inputs[idx]
        grads_w[idx] = a_prev.T @ ds
        grads_b[idx] = ds.sum(axis=0) if spec.has_bias else None
        if idx > 0:
            da = ds @ params.weights[idx].T
    return ParamSet(grads_w, grads_b), ds_list


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _as_labels(targets, n_classes, batch):
    if np.issubdtype(np.asarray(targets).dtype, np.integer):
        labels = np.asarray(targets).reshape(-1)
        if labels.min() < 0 or labels.max() >= n_classes:
            raise ContractError(
                f"label outside [0, {n_classes}): {labels.min()}..{labels.max()}"
            )
        return labels
    onehot = np.asarray(targets, dtype=FLOAT)
    if onehot.shape != (batch, n_classes):
        raise DimensionError(f"one-hot targets must be {batch}x{n_classes}")
    return onehot.argmax(axis=1)


def loss_eval(head, outputs, targets):
    """Mean per-example loss: squared error for regression, softmax
    cross-entropy for classification, raw function value for rosenbrock."""
    outputs = np.asarray(outputs, dtype=FLOAT)
    b = outputs.shape[0]
    if head == "rosenbrock-direct":
        return float(outputs.mean())
    if head == "regression-gaussian-unit-variance":
        t = np.asarray(targets, dtype=FLOAT).reshape(outputs.shape)
        return float(np.mean(np.sum((outputs - t) ** 2, axis=1)))
    labels = _as_labels(targets, outputs.shape[1], b)
    z = outputs - outputs.max(axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(z), axis=1))
    return float(np.mean(logz - z[np.arange(b), labels]))


def loss_out_grad(head, outputs, targets):
    """d loss_eval / d outputs (includes the 1/B mean factor)."""
    outputs = np.asarray(outputs, dtype=FLOAT)
    b = outputs.shape[0]
    if head == "rosenbrock-direct":
        return np.full_like(outputs, 1.0 / b)
    if head == "regression-gaussian-unit-variance":
        t = np.asarray(targets, dtype=FLOAT).reshape(outputs.shape)
        return 2.0 * (outputs - t) / b
    labels = _as_labels(targets, outputs.shape[1], b)
    p = _softmax(outputs)
    p[np.arange(b), labels] -= 1.0
    return p / b


def grad_params(model, params, batch, head=None):
    """Reverse-mode gradient of loss_eval(forward(.)) over the batch."""
    head = head or model.head
    outputs, trace = forward(model, params, batch.inputs)
    dy = loss_out_grad(head, outputs, batch.targets)
    g, _ = backward(model, params, trace, dy)
    if not g.all_finite():
        raise NumericalError("parameter gradient is non-finite")
    return g


def predictive(head, outputs):
    """Predictive-distribution parameters: softmax probabilities for
    classification, means passed through for regression."""
    outputs = np.asarray(outputs, dtype=FLOAT)
    if head == "classification-softmax":
        return _softmax(outputs)
    return outputs


def per_example_jacobian(model, params, inputs):
    """Exact per-example Jacobian d f(x_b, theta) / d theta, B x d_out x m.

    Parameter ordering matches ParamSet.to_flat (row-major W, then bias, per
    layer).  Loops over examples and output units; oracle scale only.
    """
    m = params.size
    if m > JACOBIAN_MAX_PARAMS:
        raise OracleScaleError(f"per_example_jacobian limited to {JACOBIAN_MAX_PARAMS} params, got {m}")
    inputs = np.asarray(inputs, dtype=FLOAT)
    bsz = inputs.shape[0]
    outputs, _ = forward(model, params, inputs)
    d_out = outputs.shape[1]
    jac = np.zeros((bsz, d_out, m))
    for bi in range(bsz):
        row = inputs[bi:bi + 1]
        _, trace = forward(model, params, row)
        for j in range(d_out):
            seed = np.zeros((1, d_out))
            seed[0, j] = 1.0
            g, _ = backward(model, params, trace, seed)
            jac[bi, j] = g.to_flat()
    return jac
