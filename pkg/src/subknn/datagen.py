"""Synthetic desk-scale datasets with class-relevant subspaces.

Each class ``c`` has a mean vector that is non-zero only on its own random
subset of ``s_true`` input dimensions, with Euclidean norm ``class_separation``
spread evenly over those coordinates. Samples are the class mean plus isotropic
Gaussian noise of scale ``noise_sigma`` on all ``d`` dimensions, so most
coordinates carry no class information at all. OOD shifts are likewise
Euclidean norms of the displacement vector.
"""
from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .numcore import ContractError, Rng


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.inputs = np.ascontiguousarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.shape != (self.inputs.shape[0],):
            raise ContractError("inputs must be (N, d) with N labels")
        if len(self.labels) < 1:
            raise ContractError("dataset must not be empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ContractError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class SubspaceMixtureSpec:
    num_classes: int = 10
    ambient_dim: int = 256
    relevant_dims_per_class: int = 16
    class_separation: float = 4.0
    noise_sigma: float = 1.0
    samples_per_class: int = 500
    test_per_class: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.samples_per_class < 2 or self.test_per_class < 1:
            raise ContractError("need >= 1 class, >= 2 train and >= 1 test samples per class")
        if not 1 <= self.relevant_dims_per_class <= self.ambient_dim:
            raise ContractError("relevant_dims_per_class must lie in [1, ambient_dim]")
        if self.class_separation < 0 or self.noise_sigma <= 0:
            raise ContractError("class_separation must be >= 0 and noise_sigma > 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class IdData:
    train: Dataset
    val: Dataset
    test: Dataset
    means: np.ndarray  # (C, d)
    relevant: list[np.ndarray] = field(default_factory=list)  # per-class sorted dims


def class_structure(spec: SubspaceMixtureSpec) -> tuple[np.ndarray, list[np.ndarray]]:
    """Class means and relevant-dimension sets; depends only on the seed."""
    rng = Rng(spec.seed).substream("class-structure")
    means = np.zeros((spec.num_classes, spec.ambient_dim))
    relevant = []
    for c in range(spec.num_classes):
        dims = np.sort(rng.choice(spec.ambient_dim, spec.relevant_dims_per_class))
        means[c, dims] = spec.class_separation / np.sqrt(dims.size)
        relevant.append(dims)
    return means, relevant


def _sample_class(spec, mean, n, label):
    rng = Rng(spec.seed).substream(label)
    return mean + spec.noise_sigma * rng.normal(size=(n, spec.ambient_dim))


def generate_id(spec: SubspaceMixtureSpec) -> IdData:
    """Train/validation (90/10 per class) and held-out test sets."""
    means, relevant = class_structure(spec)
    n_val = max(1, spec.samples_per_class // 10)
    parts = {"train": ([], []), "val": ([], []), "test": ([], [])}
    for c in range(spec.num_classes):
        pool = _sample_class(spec, means[c], spec.samples_per_class, f"train/{c}")
        order = Rng(spec.seed).substream(f"split/{c}").permutation(spec.samples_per_class)
        val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
        test = _sample_class(spec, means[c], spec.test_per_class, f"test/{c}")
        for key, x in (("train", pool[train_idx]), ("val", pool[val_idx]), ("test", test)):
            parts[key][0].append(x)
            parts[key][1].append(np.full(len(x), c))
    sets = {k: Dataset(np.vstack(xs), np.concatenate(ys), spec.num_classes)
            for k, (xs, ys) in parts.items()}
    return IdData(sets["train"], sets["val"], sets["test"], means, relevant)


def ood_mean(spec: SubspaceMixtureSpec, kind: str, shift: float, class_id: int = 0) -> np.ndarray:
    means, relevant = class_structure(spec)
    d, s = spec.ambient_dim, spec.relevant_dims_per_class
    mu = np.zeros(d)
    if kind == "far":
        rng = Rng(spec.seed).substream("ood-structure/far")
        used = np.unique(np.concatenate(relevant))
        free = np.setdiff1d(np.arange(d), used)
        if free.size == 0:
            raise ContractError("no dimensions outside the class subspaces for far-OOD")
        dims = free[np.sort(rng.choice(free.size, min(s, free.size)))]
        mu[dims] = shift / np.sqrt(dims.size)
    elif kind == "near":
        # fixed random direction inside the class's relevant coordinates
        rng = Rng(spec.seed).substream(f"ood-structure/near/{class_id}")
        dims = relevant[class_id]
        u = rng.normal(size=dims.size)
        mu = means[class_id].copy()
        mu[dims] += shift * u / np.linalg.norm(u)
    else:
        raise ContractError(f"unknown OOD kind {kind!r}")
    return mu


def generate_ood(spec: SubspaceMixtureSpec, kind: str, shift: float | None = None,
                 count: int = 1000) -> np.ndarray:
    """OOD samples; ``far`` lives off every class subspace, ``near`` on one.

    Default shifts: far = 2 * separation, near = 0.5 * separation. Near-OOD
    samples cycle over the classes.
    """
    if shift is None:
        shift = (2.0 if kind == "far" else 0.5) * spec.class_separation
    if kind == "near" and shift >= spec.class_separation:
        warnings.warn(f"near-OOD shift {shift} >= class separation; OOD may overlap ID",
                      stacklevel=2)
    if kind == "far":
        mu = ood_mean(spec, kind, shift)
        return _sample_class(spec, mu, count, f"ood/{kind}/{shift!r}")
    counts = np.bincount(np.arange(count) % spec.num_classes, minlength=spec.num_classes)
    chunks = [_sample_class(spec, ood_mean(spec, kind, shift, c), int(n), f"ood/{kind}/{shift!r}/{c}")
              for c, n in enumerate(counts) if n]
    return np.vstack(chunks)


def gaussian_noise_validation(count: int, d: int, rng: Rng) -> np.ndarray:
    if count < 1:
        raise ContractError("count must be >= 1")
    return rng.normal(size=(count, d))
