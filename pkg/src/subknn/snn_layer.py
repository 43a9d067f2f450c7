"""Subspace output layer.

For every sample ``h`` and class ``c`` the layer forms the per-dimension
contributions ``w_c * h`` and keeps only ``s`` of them before summing:

* ``selection="top"``   -- the ``s`` largest contributions (the relevance rule),
* ``selection="least"`` -- the ``s`` smallest contributions (ablation),
* ``selection="fixed"`` -- a per-class index set chosen once (random-subspace
  ablation, see :func:`subknn.ood_scoring.random_subspace_mask`).

The bias is added densely after the masked sum. In the backward pass the
selected index sets are held fixed, so gradients flow only through the kept
entries.
"""
from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .numcore import ContractError, as_matrix, top_s_mask

SELECTIONS = ("top", "least", "fixed")


def subspace_size(r: float, m: int) -> int:
    """``s = max(1, round(r*m))`` with halves rounded up."""
    if not 0.0 < r <= 1.0:
        raise ContractError(f"relevance ratio r={r} must lie in (0, 1]")
    return max(1, min(m, int(math.floor(r * m + 0.5))))


@dataclass(frozen=True)
class SubspaceMask:
    class_id: int
    indices: tuple[int, ...]


@dataclass
class MaskSet:
    """Boolean selection masks of shape (B, C, m) produced by one forward call."""

    selected: np.ndarray
    s: int

    def mask(self, b: int, c: int) -> SubspaceMask:
        return SubspaceMask(c, tuple(int(i) for i in np.flatnonzero(self.selected[b, c])))


@dataclass
class SnnLayer:
    weight: np.ndarray  # (C, m)
    bias: np.ndarray  # (C,)
    r: float = 1.0
    selection: str = "top"
    fixed_mask: np.ndarray | None = None  # (C, m) bool, only for selection="fixed"
    s: int = field(init=False)

    def __post_init__(self):
        self.weight = as_matrix(self.weight, "weight")
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64).reshape(-1)
        C, m = self.weight.shape
        if self.bias.shape != (C,):
            raise ContractError(f"bias shape {self.bias.shape} != ({C},)")
        if self.selection not in SELECTIONS:
            raise ContractError(f"unknown selection {self.selection!r}")
        self.s = subspace_size(self.r, m)
        if self.selection == "fixed":
            if self.fixed_mask is None:
                raise ContractError("selection='fixed' needs fixed_mask")
            fm = np.asarray(self.fixed_mask, dtype=bool)
            if fm.shape != (C, m) or np.any(fm.sum(axis=1) != self.s):
                raise ContractError(f"fixed_mask must be ({C}, {m}) with {self.s} ones per row")
            self.fixed_mask = fm

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    @property
    def m(self) -> int:
        return self.weight.shape[1]

    @classmethod
    def init(cls, num_classes: int, m: int, rng, r: float = 1.0, **kw) -> "SnnLayer":
        bound = math.sqrt(6.0 / (m + num_classes))
        w = rng.uniform(-bound, bound, size=(num_classes, m))
        return cls(w, np.zeros(num_classes), r=r, **kw)


def _check_features(layer: SnnLayer, h) -> np.ndarray:
    h = as_matrix(h, "h")
    if h.shape[1] != layer.m:
        raise ContractError(f"feature dim {h.shape[1]} != layer input dim {layer.m}")
    return h


def forward(layer: SnnLayer, h) -> tuple[np.ndarray, MaskSet]:
    """Return (logits (B, C), masks) for features ``h`` of shape (B, m)."""
    h = _check_features(layer, h)
    vote = h[:, None, :] * layer.weight[None, :, :]
    if layer.selection == "fixed":
        selected = np.broadcast_to(layer.fixed_mask, vote.shape).copy()
    elif layer.s == layer.m:
        selected = np.ones(vote.shape, dtype=bool)
    else:
        selected = top_s_mask(vote, layer.s, largest=layer.selection == "top")
    logits = np.where(selected, vote, 0.0).sum(axis=2) + layer.bias
    return logits, MaskSet(selected, layer.s)


def backward(layer: SnnLayer, h, masks: MaskSet, grad_logits):
    """Gradients of a scalar loss w.r.t. (weight, bias, h), masks held fixed."""
    h = _check_features(layer, h)
    g = as_matrix(grad_logits, "grad_logits")
    B = h.shape[0]
    C, m = layer.weight.shape
    if g.shape != (B, C):
        raise ContractError(f"grad_logits shape {g.shape} != ({B}, {C})")
    sel = masks.selected
    if sel.shape != (B, C, m) or masks.s != layer.s:
        raise ContractError("masks do not come from a forward call on this layer/batch")
    if np.any(sel.sum(axis=2) != layer.s):
        raise ContractError("mask rows must each select exactly s entries")
    gm = np.where(sel, g[:, :, None], 0.0)  # (B, C, m)
    grad_weight = np.einsum("bci,bi->ci", gm, h)
    grad_h = np.einsum("bci,ci->bi", gm, layer.weight)
    grad_bias = g.sum(axis=0)
    return grad_weight, grad_bias, grad_h


def predict(layer: SnnLayer, h) -> np.ndarray | int:
    """Argmax of the subspace logits; lowest class id wins ties.

    Accepts a single feature vector (returns an int) or a batch.
    """
    h = np.asarray(h, dtype=np.float64)
    single = h.ndim == 1
    logits, _ = forward(layer, h[None, :] if single else h)
    labels = np.argmax(logits, axis=1)
    return int(labels[0]) if single else labels


def export_weight_heatmap(layer: SnnLayer, path) -> None:
    """Write the (C, m) weight matrix as CSV with a ``dim_i`` header.

    The file is written to a temporary sibling and renamed into place, so a
    failed write leaves no partial output.
    """
    path = os.fspath(path)
    if not path:
        raise OSError("empty output path")
    directory = os.path.dirname(os.path.abspath(path))
    header = ",".join(f"dim_{i}" for i in range(layer.m))
    lines = [header] + [",".join(format(x, ".17g") for x in row) for row in layer.weight]
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write("\n".join(lines) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_weight_heatmap(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
