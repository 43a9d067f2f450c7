"""OOD scoring functions. Every score follows "larger means more in-distribution"."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg

from . import snn_layer
from .numcore import ContractError, Rng, as_matrix, l2_normalize_rows, softmax
from .snn_layer import SnnLayer, SubspaceMask

_CHUNK_ELEMS = 1 << 21


@dataclass(frozen=True)
class EmbeddingBank:
    """Frozen set of unit-norm training embeddings used as k-NN reference."""

    embeddings: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        emb = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or len(emb) == 0:
            raise ContractError("bank needs a non-empty (N, m) matrix")
        norms = np.linalg.norm(emb, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-10):
            raise ContractError("bank rows must be unit norm; use EmbeddingBank.build")
        emb.setflags(write=False)
        labels = np.asarray(self.labels, dtype=np.int64).copy()
        if labels.shape != (len(emb),):
            raise ContractError("one label per embedding required")
        labels.setflags(write=False)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def build(cls, features, labels) -> "EmbeddingBank":
        return cls(l2_normalize_rows(features), labels)

    def __len__(self):
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def distances_to_bank(bank: EmbeddingBank, queries: np.ndarray) -> np.ndarray:
    """Euclidean distances (Q, N) computed from explicit coordinate differences."""
    Z = bank.embeddings
    out = np.empty((len(queries), len(Z)))
    step = max(1, _CHUNK_ELEMS // Z.size)
    for start in range(0, len(queries), step):
        q = queries[start:start + step]
        diff = q[:, None, :] - Z[None, :, :]
        out[start:start + step] = np.sqrt((diff * diff).sum(axis=2))
    return out


def _exact_distance(q: np.ndarray, rows: np.ndarray) -> np.ndarray:
    diff = q[None, :] - rows
    return np.sqrt((diff * diff).sum(axis=1))


# Gram-form squared distances differ from the explicit ones by ~1e-15 on unit
# vectors; anything within this slack of the approximate k-th value is rechecked.
_GRAM_SLACK = 1e-9


def kth_neighbor_distance(bank: EmbeddingBank, query_features, k: int) -> np.ndarray:
    """Exact k-th nearest-neighbour distance for each (normalized) query.

    Candidates are pre-selected with the Gram identity ``|q|^2 + |z|^2 - 2 q.z``
    and then re-measured with explicit differences, so the result is identical
    to sorting the full explicit distance row.
    """
    q = as_matrix(query_features, "query_features")
    if q.shape[1] != bank.dim:
        raise ContractError(f"query dim {q.shape[1]} != bank dim {bank.dim}")
    if not 1 <= k <= len(bank):
        raise ContractError(f"k={k} must lie in [1, N={len(bank)}]")
    q = l2_normalize_rows(q)
    Z = bank.embeddings
    z_sq = np.einsum("ij,ij->i", Z, Z)
    out = np.empty(len(q))
    step = max(1, _CHUNK_ELEMS // len(Z))
    for start in range(0, len(q), step):
        qc = q[start:start + step]
        approx = np.einsum("ij,ij->i", qc, qc)[:, None] + z_sq[None, :] - 2.0 * (qc @ Z.T)
        cut = np.partition(approx, k - 1, axis=1)[:, k - 1:k] + 2 * _GRAM_SLACK
        for i, row in enumerate(approx <= cut):
            cand = np.flatnonzero(row)
            d = _exact_distance(qc[i], Z[cand])
            out[start + i] = np.partition(d, k - 1)[k - 1]
    return out


def knn_score(bank: EmbeddingBank, query_features, k: int) -> np.ndarray:
    """Negated distance from each normalized query to its k-th nearest bank row."""
    return -kth_neighbor_distance(bank, query_features, k)


# -- Mahalanobis ---------------------------------------------------------------

@dataclass
class MahalanobisModel:
    means: np.ndarray  # (C, m)
    covariance: np.ndarray  # (m, m), before ridge
    precision: np.ndarray  # inverse of covariance + ridge * I
    ridge: float

    @classmethod
    def fit(cls, features, labels, num_classes: int | None = None) -> "MahalanobisModel":
        """Class means and shared covariance of the L2-normalized features."""
        z = l2_normalize_rows(features)
        labels = np.asarray(labels, dtype=np.int64)
        C = int(labels.max()) + 1 if num_classes is None else num_classes
        m = z.shape[1]
        means = np.zeros((C, m))
        for c in range(C):
            members = z[labels == c]
            if len(members) == 0:
                raise ContractError(f"class {c} has no samples")
            means[c] = members.mean(axis=0)
        centred = z - means[labels]
        cov = centred.T @ centred / len(z)
        cov = 0.5 * (cov + cov.T)
        ridge = 1e-6 * np.trace(cov) / m
        if ridge <= 0:
            ridge = 1e-12
        regularized = cov + ridge * np.eye(m)
        try:
            factor = linalg.cho_factor(regularized, lower=True)
        except linalg.LinAlgError as exc:
            raise ContractError(f"covariance not positive definite after ridge: {exc}") from exc
        precision = linalg.cho_solve(factor, np.eye(m))
        return cls(means, cov, 0.5 * (precision + precision.T), ridge)

    @classmethod
    def from_parameters(cls, means, covariance) -> "MahalanobisModel":
        cov = as_matrix(covariance, "covariance")
        linalg.cho_factor(cov, lower=True)
        return cls(as_matrix(means, "means"), cov, np.linalg.inv(cov), 0.0)


def mahalanobis_score(model: MahalanobisModel, query_features, normalize: bool = True) -> np.ndarray:
    """``-min_c (z - mu_c)^T P (z - mu_c)`` over class means, z normalized first."""
    z = l2_normalize_rows(query_features) if normalize else as_matrix(query_features)
    if z.shape[1] != model.means.shape[1]:
        raise ContractError("query dim does not match fitted model")
    best = np.full(len(z), np.inf)
    for mu in model.means:
        diff = z - mu
        best = np.minimum(best, np.einsum("ij,jk,ik->i", diff, model.precision, diff))
    return -best


# -- output-space baseline -------------------------------------------------------

def msp_from_logits(logits) -> np.ndarray:
    return softmax(as_matrix(logits, "logits")).max(axis=1)


def msp_score(model, inputs) -> np.ndarray:
    """Maximum softmax probability of the model's (subspace) logits."""
    from .trainer import logits
    return msp_from_logits(logits(model, inputs))


# -- subspace-selection ablations ---------------------------------------------------

def random_subspace_mask(m: int, s: int, rng: Rng, class_id: int = 0) -> SubspaceMask:
    """Uniformly random ``s``-subset of ``range(m)``."""
    if not 1 <= s <= m:
        raise ContractError(f"s={s} out of range [1, {m}]")
    idx = np.sort(rng.choice(m, s))
    return SubspaceMask(class_id, tuple(int(i) for i in idx))


def random_subspace_masks(num_classes: int, m: int, s: int, seed: int) -> np.ndarray:
    """Class-level (C, m) boolean masks, fixed for a whole training run."""
    root = Rng(seed).substream("random-subspace")
    out = np.zeros((num_classes, m), dtype=bool)
    for c in range(num_classes):
        out[c, list(random_subspace_mask(m, s, root.substream(f"class/{c}"), c).indices)] = True
    return out


def least_relevance_forward(layer: SnnLayer, h) -> np.ndarray:
    """Logits from the ``s`` smallest entries of ``w_c * h`` plus bias."""
    least = replace(layer, selection="least", fixed_mask=None)
    return snn_layer.forward(least, h)[0]


def masked_features(layer: SnnLayer, h) -> np.ndarray:
    """EXPERIMENTAL, not the reference method: zero all feature dims outside the
    predicted class's selected subspace before k-NN scoring."""
    logits, masks = snn_layer.forward(layer, h)
    pred = np.argmax(logits, axis=1)
    keep = masks.selected[np.arange(len(pred)), pred]
    return np.where(keep, h, 0.0)


# -- file formats -------------------------------------------------------------------

BANK_MAGIC = b"EMB1"


def save_bank(path, embeddings, labels) -> None:
    """``EMB1`` | u64 N | u64 m | f64 N*m row-major | u32 N labels (little-endian).

    Also used for raw dataset matrices, so rows are not required to be unit norm.
    """
    emb = as_matrix(embeddings, "embeddings")
    labels = np.asarray(labels)
    if labels.shape != (len(emb),) or (labels.size and labels.min() < 0):
        raise ContractError("need one non-negative label per row")
    with open(path, "wb") as f:
        f.write(BANK_MAGIC + struct.pack("<QQ", *emb.shape))
        f.write(emb.astype("<f8").tobytes())
        f.write(labels.astype("<u4").tobytes())


def load_bank(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != BANK_MAGIC:
        raise ValueError(f"{path}: not an EMB1 file")
    n, m = struct.unpack_from("<QQ", buf, 4)
    off = 20
    emb = np.frombuffer(buf, dtype="<f8", count=n * m, offset=off).reshape(n, m)
    off += emb.nbytes
    labels = np.frombuffer(buf, dtype="<u4", count=n, offset=off)
    if off + labels.nbytes != len(buf):
        raise ValueError(f"{path}: size does not match header")
    return emb.astype(np.float64), labels.astype(np.int64)


def write_scores_csv(path, scores) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", "score"])
        for i, s in enumerate(scores):
            w.writerow([i, format(float(s), ".17g")])
