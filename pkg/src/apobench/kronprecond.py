"""Kronecker-structured gradient preconditioner.

Per weight matrix W (fan_in x fan_out) the preconditioner acting on
vec_cm(grad W) is

    P = (A kron B) diag(vec_cm(S))^2 (A kron B)^T

with A fan_out x fan_out, B fan_in x fan_in, S fan_in x fan_out.  P is PSD
for arbitrary A, B, S, and is applied without ever materializing it:

    P vec_cm(G) = vec_cm( B (S^2 * (B^T G A)) A^T )      (* elementwise)

Biases are not covered by the factorization; each bias vector gets an
independent diagonal preconditioner diag(d)^2 with d meta-learned alongside
the blocks.  The fixed step scale c multiplies the preconditioned gradient
and is not meta-learned.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .diffnet import ParamSet
from .errors import DimensionError, NumericalError, OracleScaleError
from .numkit import FLOAT, kron_dense, vec_cm

DENSE_MAX_DIM = 64
DEFAULT_SCALE = 0.9


@dataclass
class KronBlocks:
    a: np.ndarray  # fan_out x fan_out
    b: np.ndarray  # fan_in x fan_in
    s: np.ndarray  # fan_in x fan_out

    def check(self, fan_in, fan_out):
        if self.a.shape != (fan_out, fan_out):
            raise DimensionError(f"A block {self.a.shape} != ({fan_out}, {fan_out})")
        if self.b.shape != (fan_in, fan_in):
            raise DimensionError(f"B block {self.b.shape} != ({fan_in}, {fan_in})")
        if self.s.shape != (fan_in, fan_out):
            raise DimensionError(f"S block {self.s.shape} != ({fan_in}, {fan_out})")

    @property
    def param_count(self):
        return self.a.size + self.b.size + self.s.size

    def copy(self):
        return KronBlocks(self.a.copy(), self.b.copy(), self.s.copy())


@dataclass
class PrecondPhi:
    """One KronBlocks per weight layer, one diagonal vector per bias, plus the
    fixed application scale c."""

    blocks: list
    bias_diags: list  # per layer: fan_out vector or None
    scale: float = DEFAULT_SCALE

    def copy(self):
        return PrecondPhi(
            [blk.copy() for blk in self.blocks],
            [None if d is None else d.copy() for d in self.bias_diags],
            self.scale,
        )

    def entries(self):
        for blk, d in zip(self.blocks, self.bias_diags):
            yield blk.a
            yield blk.b
            yield blk.s
            if d is not None:
                yield d

    def to_flat(self):
        return np.concatenate([e.ravel() for e in self.entries()])

    def from_flat(self, vec):
        vec = np.asarray(vec, dtype=FLOAT)
        out = self.copy()
        k = 0
        for blk, d in zip(out.blocks, out.bias_diags):
            for arr in (blk.a, blk.b, blk.s):
                arr[...] = vec[k:k + arr.size].reshape(arr.shape)
                k += arr.size
            if d is not None:
                d[...] = vec[k:k + d.size]
                k += d.size
        if k != vec.size:
            raise DimensionError(f"flat vector has {vec.size} entries, need {k}")
        return out

    def frobenius_norm(self):
        return float(np.sqrt(sum(np.vdot(e, e) for e in self.entries())))


def init_identity(model, scale=DEFAULT_SCALE):
    """Identity preconditioner: A = I, B = I, S = ones (and d = ones for
    biases), so the first preconditioned update equals scale * gradient."""
    blocks, diags = [], []
    for spec in model.layers:
        blocks.append(KronBlocks(
            np.eye(spec.fan_out),
            np.eye(spec.fan_in),
            np.ones((spec.fan_in, spec.fan_out)),
        ))
        diags.append(np.ones(spec.fan_out) if spec.has_bias else None)
    return PrecondPhi(blocks, diags, scale)


def apply_precond(blocks, grad_w):
    """Efficient application: B (S^2 * (B^T G A)) A^T."""
    grad_w = np.asarray(grad_w, dtype=FLOAT)
    fan_in, fan_out = grad_w.shape
    blocks.check(fan_in, fan_out)
    inner = blocks.b.T @ grad_w @ blocks.a
    return blocks.b @ ((blocks.s * blocks.s) * inner) @ blocks.a.T


def dense_precond(blocks):
    """Materialized (A kron B) diag(vec_cm(S))^2 (A kron B)^T, oracle scale."""
    fan_in, fan_out = blocks.s.shape
    if fan_in * fan_out > DENSE_MAX_DIM:
        raise OracleScaleError(
            f"dense_precond limited to {DENSE_MAX_DIM} rows, got {fan_in * fan_out}"
        )
    ab = kron_dense(blocks.a, blocks.b)
    d2 = vec_cm(blocks.s) ** 2
    return (ab * d2) @ ab.T


def apply_precond_update(params, phi, g):
    """theta' = theta - c * P g, per layer (bias preconditioner diag(d)^2)."""
    if len(phi.blocks) != len(params.weights):
        raise DimensionError(
            f"{len(phi.blocks)} block sets for {len(params.weights)} layers"
        )
    c = phi.scale
    weights, biases = [], []
    for w, b, gw, gb, blk, d in zip(
        params.weights, params.biases, g.weights, g.biases, phi.blocks, phi.bias_diags
    ):
        weights.append(w - c * apply_precond(blk, gw))
        if b is None:
            biases.append(None)
        else:
            biases.append(b - c * ((d * d) * gb))
    out = ParamSet(weights, biases)
    if not out.all_finite():
        raise NumericalError("preconditioned update produced non-finite parameters")
    return out


def precond_vjp(blocks, grad_w, upstream):
    """Gradients of <upstream, apply_precond(blocks, grad_w)> w.r.t. A, B, S,
    holding grad_w fixed.

    Derived from R = B U A^T with U = S^2 * T and T = B^T G A:
      dS = 2 S * T * X          where X = B^T V A  (V = upstream)
      dB = V A U^T + (G A) (S^2 * X)^T
      dA = G^T B (S^2 * X) + V^T B U
    """
    g = np.asarray(grad_w, dtype=FLOAT)
    v = np.asarray(upstream, dtype=FLOAT)
    a, b, s = blocks.a, blocks.b, blocks.s
    s2 = s * s
    t = b.T @ g @ a
    u = s2 * t
    x = b.T @ v @ a
    ds = 2.0 * s * t * x
    db = v @ a @ u.T + (g @ a) @ (s2 * x).T
    da = g.T @ (b @ (s2 * x)) + v.T @ (b @ u)
    return da, db, ds


def bias_diag_vjp(d, grad_b, upstream):
    """Gradient of <upstream, d^2 * grad_b> w.r.t. d."""
    return 2.0 * d * grad_b * upstream


def to_json(phi, layer_names=None):
    """Flat JSON document: per-layer row-major block arrays plus the scale."""
    layers = []
    for i, (blk, d) in enumerate(zip(phi.blocks, phi.bias_diags)):
        name = layer_names[i] if layer_names else f"layer{i}"
        layers.append({
            "name": name,
            "a": blk.a.tolist(),
            "b": blk.b.tolist(),
            "s": blk.s.tolist(),
            "bias_diag": None if d is None else d.tolist(),
        })
    return json.dumps({"scale": phi.scale, "layers": layers}, indent=2)


def from_json(doc):
    data = json.loads(doc)
    blocks, diags = [], []
    for layer in data["layers"]:
        blocks.append(KronBlocks(
            np.asarray(layer["a"], dtype=FLOAT),
            np.asarray(layer["b"], dtype=FLOAT),
            np.asarray(layer["s"], dtype=FLOAT),
        ))
        d = layer.get("bias_diag")
        diags.append(None if d is None else np.asarray(d, dtype=FLOAT))
    return PrecondPhi(blocks, diags, float(data["scale"]))
