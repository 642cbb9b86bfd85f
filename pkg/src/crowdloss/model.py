"""Shared tanh encoder with one softmax head per annotator.

All parameters live in one flat float64 vector; the encoder and head arrays
are reshaped views into it. Flat layout, in order::

    for each encoder layer k = 1..L:  W_k (in_k x H, row-major), b_k (H)
    head weights (A x H x M), head biases (A x M)

with ``in_1 = D`` and ``in_k = H`` afterwards. This is also the order of the
``params`` array in a checkpoint.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels
from .losses import LossSpec, batch_targets

CHECKPOINT_FORMAT = "crowdloss-model"
CHECKPOINT_VERSION = 1


class Dims(NamedTuple):
    input: int
    hidden: int
    classes: int
    annotators: int
    layers: int = 2

    def validate(self):
        if min(self) < 1:
            raise ValueError(f"all model dimensions must be positive, got {self}")

    @property
    def num_params(self):
        D, H, M, A, L = self
        enc = D * H + H + (L - 1) * (H * H + H)
        return enc + A * (H * M + M)


def _slices(dims: Dims):
    D, H, M, A, L = dims
    out = []
    pos = 0
    for k in range(L):
        fan_in = D if k == 0 else H
        out.append(((fan_in, H), pos))
        pos += fan_in * H
        out.append(((H,), pos))
        pos += H
    out.append(((A, H, M), pos))
    pos += A * H * M
    out.append(((A, M), pos))
    return out


@dataclass(eq=False)
class ModelParams:
    dims: Dims
    vector: np.ndarray
    encoder: list = field(init=False, repr=False)
    head_W: np.ndarray = field(init=False, repr=False)
    head_b: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.dims = Dims(*self.dims)
        self.vector = np.ascontiguousarray(self.vector, dtype=np.float64)
        if self.vector.shape != (self.dims.num_params,):
            raise ValueError(f"expected {self.dims.num_params} parameters, got {self.vector.shape}")
        views = [self.vector[pos:pos + int(np.prod(shape))].reshape(shape)
                 for shape, pos in _slices(self.dims)]
        L = self.dims.layers
        self.encoder = [(views[2 * k], views[2 * k + 1]) for k in range(L)]
        self.head_W, self.head_b = views[2 * L], views[2 * L + 1]

    @property
    def num_params(self):
        return self.vector.size

    def like(self, vector) -> "ModelParams":
        return ModelParams(self.dims, vector)

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, self.vector.copy())

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.dims == other.dims and bool(np.array_equal(self.vector, other.vector))

    __hash__ = None

    def to_checkpoint(self, provenance=None) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "dims": self.dims._asdict(),
            "layout": "encoder (W_k, b_k) for k=1..L, head_W (A,H,M), head_b (A,M); row-major",
            "provenance": provenance or {},
            "params": [float(v) for v in self.vector],
        }

    @classmethod
    def from_checkpoint(cls, data: dict) -> "ModelParams":
        if data.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a crowdloss model checkpoint")
        if data.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {data.get('version')}")
        return cls(Dims(**data["dims"]), np.array(data["params"], dtype=np.float64))


def save_checkpoint(model: ModelParams, path, provenance=None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_checkpoint(provenance), fh)


def load_checkpoint(path) -> ModelParams:
    with open(path, encoding="utf-8") as fh:
        return ModelParams.from_checkpoint(json.load(fh))


def init_model(dims, seed: int) -> ModelParams:
    """Weights ~ N(0, 1/fan_in), biases zero; deterministic in ``seed``."""
    dims = Dims(*dims)
    dims.validate()
    rng = np.random.default_rng([seed, 10])
    model = ModelParams(dims, np.zeros(dims.num_params))
    for W, _ in model.encoder:
        W[...] = rng.standard_normal(W.shape) / np.sqrt(W.shape[0])
    model.head_W[...] = rng.standard_normal(model.head_W.shape) / np.sqrt(dims.hidden)
    return model


@dataclass
class ForwardTrace:
    activations: list
    probs: np.ndarray
    mix: dict | None = None


def _as_batch(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def encode(model: ModelParams, X, start: int = 0, stop: int | None = None):
    """Run encoder layers ``start+1 .. stop`` from activation ``X`` (layer ``start``).

    Returns the list of activations for layers ``start .. stop``.
    """
    stop = model.dims.layers if stop is None else stop
    acts = [np.ascontiguousarray(X, dtype=np.float64)]
    for W, b in model.encoder[start:stop]:
        acts.append(kernels.dense_tanh_forward(acts[-1], W, b))
    return acts


def predict_proba(model: ModelParams, X) -> np.ndarray:
    """Head probabilities, shape ``(N, A, M)``."""
    X = _as_batch(X)
    h = encode(model, X)[-1]
    return kernels.heads_forward(h, model.head_W, model.head_b)


def forward(model: ModelParams, x) -> ForwardTrace:
    """Forward pass for one D-vector (or a batch); keeps every activation."""
    single = np.ndim(x) == 1
    acts = encode(model, _as_batch(x))
    probs = kernels.heads_forward(acts[-1], model.head_W, model.head_b)
    if single:
        return ForwardTrace([a[0] for a in acts], probs[0])
    return ForwardTrace(acts, probs)


def _mixed_forward(model, X, perm, lam, layer):
    if not 0.0 <= lam <= 1.0:
        raise ValueError("mixup lambda must be in [0, 1]")
    if not 0 <= layer <= model.dims.layers:
        raise ValueError(f"mixup layer must be in [0, {model.dims.layers}]")
    pre = encode(model, X, 0, layer)
    h = pre[-1]
    mixed = np.ascontiguousarray(lam * h + (1.0 - lam) * h[perm])
    post = encode(model, mixed, layer)
    probs = kernels.heads_forward(post[-1], model.head_W, model.head_b)
    return pre, post, probs


def forward_mixup(model: ModelParams, x_i, x_j, lam: float, layer: int) -> ForwardTrace:
    """Mix the layer-``layer`` activations of ``x_i`` and ``x_j`` as ``lam*h_i + (1-lam)*h_j``.

    Layer 0 mixes the inputs themselves.
    """
    X = np.stack([np.asarray(x_i, dtype=float), np.asarray(x_j, dtype=float)])
    pre, post, probs = _mixed_forward(model, X, np.array([1, 0]), float(lam), int(layer))
    acts = [a[0] for a in pre[:-1]] + [a[0] for a in post]
    return ForwardTrace(acts, probs[0], {"lambda": float(lam), "layer": int(layer)})


@dataclass
class Batch:
    """One minibatch.

    ``labels`` is ``(B, A)`` with -1 for missing cells; ``weights`` are the
    correction weights w per cell; ``guesses`` are detached self-guess
    probabilities ``(B, A, M)``. ``mix_perm``/``mix_lambda``/``mix_layer``
    enable mixup: sample ``i`` is mixed with sample ``mix_perm[i]``.
    """
    x: np.ndarray
    labels: np.ndarray
    weights: np.ndarray | None = None
    guesses: np.ndarray | None = None
    mix_perm: np.ndarray | None = None
    mix_lambda: float = 1.0
    mix_layer: int = 0


def _targets(batch: Batch, spec: LossSpec, num_classes: int):
    T = batch_targets(batch.labels, num_classes, batch.weights, batch.guesses, spec.psi, spec.mt_norm)
    if batch.mix_perm is not None:
        lam = batch.mix_lambda
        T = lam * T + (1.0 - lam) * T[batch.mix_perm]
    return np.ascontiguousarray(T)


def compute_gradients(model: ModelParams, batch: Batch, spec: LossSpec):
    """Exact gradient of the configured batch objective.

    Returns ``(grad, loss)`` where ``grad`` is a ModelParams holding gradients.
    Missing annotation cells have zero target mass and so contribute nothing.
    """
    X = _as_batch(batch.x)
    T = _targets(batch, spec, model.dims.classes)
    if batch.mix_perm is not None:
        pre, post, P = _mixed_forward(model, X, batch.mix_perm, batch.mix_lambda, batch.mix_layer)
        split = batch.mix_layer
    else:
        pre, post = [X], encode(model, X)
        P = kernels.heads_forward(post[-1], model.head_W, model.head_b)
        split = 0

    loss, dlogits = kernels.heads_objective(P, T, spec.entropy_penalty_coeff, spec.class_balance_coeff)
    grad = model.like(np.zeros(model.num_params))
    dW, db, dh = kernels.heads_backward(post[-1], model.head_W, dlogits)
    grad.head_W[...] = dW
    grad.head_b[...] = db

    # post[j] is the activation of layer split + j; pre[j] of layer j
    dh = _backprop(model, grad, post, split, dh)
    if batch.mix_perm is not None and split > 0:
        _backprop(model, grad, pre, 0, _unmix(dh, batch.mix_perm, batch.mix_lambda))
    return grad, loss


def _backprop(model, grad, chain, first_layer, dh):
    """Backprop ``dh`` (w.r.t. ``chain[-1]``) down to ``chain[0]``; fills encoder grads."""
    for j in range(len(chain) - 1, 0, -1):
        k = first_layer + j
        W, _ = model.encoder[k - 1]
        dW, db, dh = kernels.dense_tanh_backward(chain[j - 1], W, chain[j], np.ascontiguousarray(dh))
        gW, gb = grad.encoder[k - 1]
        gW[...] = dW
        gb[...] = db
    return dh


def _unmix(dh, perm, lam):
    out = lam * dh
    out[perm] += (1.0 - lam) * dh
    return out
