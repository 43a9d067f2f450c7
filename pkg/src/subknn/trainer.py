"""ReLU MLP classifier with a subspace output layer, trained by SGD + momentum.

Everything is hand-differentiated numpy. The penultimate ReLU activations are
the feature embedding ``h(x)`` consumed by the OOD scorers.
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import snn_layer
from .datagen import Dataset
from .numcore import ContractError, NonFiniteError, Rng, as_matrix, softmax
from .snn_layer import SnnLayer

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


# -- losses ------------------------------------------------------------------

@dataclass(frozen=True)
class Loss:
    """``kind`` is ``nll``, ``label_smoothing`` (uses alpha) or ``focal`` (uses gamma)."""

    kind: str = "nll"
    alpha: float = 0.05
    gamma: float = 3.0

    def __post_init__(self):
        if self.kind not in ("nll", "label_smoothing", "focal"):
            raise ContractError(f"unknown loss {self.kind!r}")
        if not 0.0 <= self.alpha < 1.0:
            raise ContractError("label smoothing alpha must lie in [0, 1)")
        if self.gamma < 0:
            raise ContractError("focal gamma must be >= 0")

    @property
    def tag(self) -> str:
        return {"nll": "nll", "label_smoothing": "ls", "focal": "fl"}[self.kind]


def smoothed_targets(y: np.ndarray, num_classes: int, alpha: float) -> np.ndarray:
    y = np.atleast_1d(y)
    if num_classes == 1:
        return np.ones((len(y), 1))
    q = np.full((len(y), num_classes), alpha / (num_classes - 1))
    q[np.arange(len(y)), y] = 1.0 - alpha
    return q


def loss_value(loss: Loss, probs, y: int) -> float:
    """Per-sample loss for a single probability vector."""
    p = np.asarray(probs, dtype=np.float64)
    return float(per_sample_losses(loss, p[None, :], np.array([y]))[0])


def per_sample_losses(loss: Loss, probs: np.ndarray, y: np.ndarray) -> np.ndarray:
    n, C = probs.shape
    logp = np.log(np.maximum(probs, LOG_CLAMP))
    py = probs[np.arange(n), y]
    if loss.kind == "nll":
        return -logp[np.arange(n), y]
    if loss.kind == "label_smoothing":
        return -(smoothed_targets(y, C, loss.alpha) * logp).sum(axis=1)
    return -((1.0 - py) ** loss.gamma) * np.log(np.maximum(py, LOG_CLAMP))


def loss_and_grad(loss: Loss, logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean loss over the batch and its gradient w.r.t. the logits."""
    n, C = logits.shape
    probs = softmax(logits)
    values = per_sample_losses(loss, probs, y)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), y] = 1.0
    if loss.kind == "nll":
        grad = probs - onehot
    elif loss.kind == "label_smoothing":
        grad = probs - smoothed_targets(y, C, loss.alpha)
    else:
        g = loss.gamma
        py = probs[np.arange(n), y]
        one_minus = 1.0 - py
        logpy = np.log(np.maximum(py, LOG_CLAMP))
        # dL/dp_y, then chain through dp_y/dz_j = p_y (1{j=y} - p_j)
        if g == 0:
            dldp_times_p = -np.ones(n)
        else:
            dldp_times_p = g * one_minus ** (g - 1) * logpy * py - one_minus ** g
        grad = dldp_times_p[:, None] * (onehot - probs)
    return float(values.mean()), grad / n


# -- model ---------------------------------------------------------------------

@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)


@dataclass
class MlpModel:
    hidden: list[DenseLayer]
    output: SnnLayer

    def __post_init__(self):
        if not self.hidden:
            raise ContractError("need at least one hidden layer to define features")
        for prev, nxt in zip(self.hidden, self.hidden[1:]):
            if nxt.weight.shape[1] != prev.weight.shape[0]:
                raise ContractError("hidden layer dimensions do not chain")
        if self.hidden[-1].weight.shape[0] != self.output.m:
            raise ContractError("last hidden width must equal the output layer's m")

    @property
    def input_dim(self) -> int:
        return self.hidden[0].weight.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.output.m

    @property
    def num_classes(self) -> int:
        return self.output.num_classes

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.hidden:
            out += [layer.weight, layer.bias]
        return out + [self.output.weight, self.output.bias]

    def copy(self) -> "MlpModel":
        return MlpModel(
            [DenseLayer(l.weight.copy(), l.bias.copy()) for l in self.hidden],
            SnnLayer(self.output.weight.copy(), self.output.bias.copy(), r=self.output.r,
                     selection=self.output.selection,
                     fixed_mask=None if self.output.fixed_mask is None else self.output.fixed_mask.copy()))


def glorot(rng: Rng, fan_out: int, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def build_model(input_dim: int, hidden: tuple[int, ...], num_classes: int, r: float,
                seed: int, selection: str = "top", fixed_mask=None) -> MlpModel:
    rng = Rng(seed).substream("init")
    layers = []
    fan_in = input_dim
    for width in hidden:
        layers.append(DenseLayer(glorot(rng, width, fan_in), np.zeros(width)))
        fan_in = width
    out = SnnLayer(glorot(rng, num_classes, fan_in), np.zeros(num_classes), r=r,
                   selection=selection, fixed_mask=fixed_mask)
    return MlpModel(layers, out)


def _forward_hidden(model: MlpModel, x: np.ndarray):
    acts = [x]
    for layer in model.hidden:
        acts.append(np.maximum(acts[-1] @ layer.weight.T + layer.bias, 0.0))
    return acts


def extract_features(model: MlpModel, inputs) -> np.ndarray:
    """Penultimate (last hidden, post-ReLU) activations; not normalized."""
    x = as_matrix(inputs, "inputs")
    if x.shape[1] != model.input_dim:
        raise ContractError(f"input dim {x.shape[1]} != model input dim {model.input_dim}")
    return _forward_hidden(model, x)[-1]


def logits(model: MlpModel, inputs) -> np.ndarray:
    return snn_layer.forward(model.output, extract_features(model, inputs))[0]


def predict(model: MlpModel, inputs) -> np.ndarray:
    return snn_layer.predict(model.output, extract_features(model, inputs))


def id_accuracy(model: MlpModel, data: Dataset) -> float:
    if len(data) == 0:
        raise ContractError("empty dataset")
    return float(np.mean(predict(model, data.inputs) == data.labels))


def batch_gradients(model: MlpModel, x: np.ndarray, y: np.ndarray, loss: Loss):
    """Mean batch loss and gradients in ``model.parameters()`` order."""
    acts = _forward_hidden(model, x)
    z, masks = snn_layer.forward(model.output, acts[-1])
    value, gz = loss_and_grad(loss, z, y)
    gw, gb, gh = snn_layer.backward(model.output, acts[-1], masks, gz)
    grads = [gw, gb]
    for i in range(len(model.hidden) - 1, -1, -1):
        layer = model.hidden[i]
        ga = gh * (acts[i + 1] > 0)
        grads = [ga.T @ acts[i], ga.sum(axis=0)] + grads
        gh = ga @ layer.weight
    return value, grads


# -- training ------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_drop_epochs: tuple[int, ...] = (50, 75, 90)
    lr_drop_factor: float = 0.1
    loss: Loss = field(default_factory=Loss)
    relevance_ratio: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.lr_drop_epochs = tuple(int(e) for e in self.lr_drop_epochs)
        if self.lr < 0:
            raise ContractError("lr must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError("momentum must lie in [0, 1)")
        if not 0.0 < self.relevance_ratio <= 1.0:
            raise ContractError("relevance ratio must lie in (0, 1]")
        if self.epochs < 0 or self.batch_size < 1 or self.weight_decay < 0:
            raise ContractError("epochs >= 0, batch_size >= 1, weight_decay >= 0 required")

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.lr_drop_epochs if epoch >= e)
        return self.lr * self.lr_drop_factor ** drops


def train(model: MlpModel, data: Dataset, cfg: TrainConfig) -> tuple[MlpModel, list[float]]:
    """Train a copy of ``model``; returns (trained model, per-epoch mean loss)."""
    if data.inputs.shape[1] != model.input_dim:
        raise ContractError("dataset input dim does not match model")
    if data.num_classes != model.num_classes:
        raise ContractError("dataset class count does not match model")
    model = model.copy()
    params = model.parameters()
    decay = [p.ndim == 2 for p in params]  # weights only, never biases
    velocity = [np.zeros_like(p) for p in params]
    shuffle_rng = Rng(cfg.seed).substream("shuffle")
    history = []
    n = len(data)
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = shuffle_rng.permutation(n)
        total, count = 0.0, 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    value, grads = batch_gradients(model, data.inputs[idx], data.labels[idx], cfg.loss)
            except NonFiniteError:
                raise TrainingDivergedError(epoch, b, float("nan")) from None
            if not math.isfinite(value):
                raise TrainingDivergedError(epoch, b, value)
            for p, g, v, wd in zip(params, grads, velocity, decay):
                if wd and cfg.weight_decay:
                    g = g + cfg.weight_decay * p
                v *= cfg.momentum
                v += g
                p -= lr * v
            total += value * len(idx)
            count += len(idx)
        history.append(total / count)
        log.debug("epoch %d lr %.4g loss %.6f", epoch, lr, history[-1])
    return model, history


# -- checkpoint ------------------------------------------------------------------

MAGIC = b"SNN1"
_SELECTION_CODES = {"top": 0, "least": 1, "fixed": 2}


def save_checkpoint(model: MlpModel, path) -> None:
    """Binary layout (all little-endian):

    ``SNN1`` | u64 L (hidden layers) | u64 x (L+1) layer widths, input first |
    u64 C | u64 m | u64 s | f64 r | u8 selection |
    per hidden layer: f64 weight (out x in), f64 bias |
    f64 output weight (C x m), f64 output bias |
    u8 fixed mask (C x m), present only when selection is ``fixed``.
    """
    out = model.output
    widths = [model.input_dim] + [l.weight.shape[0] for l in model.hidden]
    parts = [MAGIC, struct.pack("<Q", len(model.hidden)),
             struct.pack(f"<{len(widths)}Q", *widths),
             struct.pack("<QQQdB", out.num_classes, out.m, out.s, out.r,
                         _SELECTION_CODES[out.selection])]
    for arr in model.parameters():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    if out.selection == "fixed":
        parts.append(out.fixed_mask.astype("<u1").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_checkpoint(path) -> MlpModel:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not an SNN1 checkpoint")
    pos = 4

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (L,) = take("<Q")
    widths = take(f"<{L + 1}Q")
    C, m, s, r, code = take("<QQQdB")
    selection = {v: k for k, v in _SELECTION_CODES.items()}[code]

    def array(shape, dtype="<f8"):
        nonlocal pos
        count = int(np.prod(shape))
        a = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(shape)
        pos += a.nbytes
        return a.astype(np.float64 if dtype == "<f8" else bool)

    hidden = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w = array((fan_out, fan_in))
        hidden.append(DenseLayer(w, array((fan_out,))))
    w, b = array((C, m)), array((C,))
    fixed = array((C, m), "<u1") if selection == "fixed" else None
    layer = SnnLayer(w, b, r=r, selection=selection, fixed_mask=fixed)
    if layer.s != s:
        raise ValueError(f"{path}: stored s={s} disagrees with r={r}, m={m}")
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    return MlpModel(hidden, layer)
