"""Dense float64 kernels and seeded randomness shared by every module.

Matrices are plain ``numpy.ndarray`` objects of dtype float64, shape (rows, cols),
C-contiguous. The helpers here enforce the shape/finiteness contract at the
boundaries so the rest of the package can assume clean inputs.

Randomness uses numpy's Philox4x64 counter-based bit generator. A master seed
fans out to independent substreams keyed by a text label (``Rng.substream``),
so adding a new consumer of randomness never perturbs existing streams.
"""
from __future__ import annotations

import hashlib

import numpy as np


class ContractError(ValueError):
    """A precondition on shapes, ranges or argument values was violated."""


class NonFiniteError(ContractError):
    """An array that must be finite holds NaN or Inf."""


class DegenerateEmbeddingError(ValueError):
    """A feature row has (numerically) zero norm and cannot be normalized."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce ``x`` to a finite C-contiguous float64 2-D array."""
    a = np.ascontiguousarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ContractError(f"{name} must be 2-D, got shape {a.shape}")
    check_finite(a, name)
    return a


def check_finite(a: np.ndarray, name: str = "array") -> None:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{name} contains NaN or Inf")


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    check_finite(out, "matmul result")
    return out


def l2_normalize_rows(x) -> np.ndarray:
    """Scale each row to unit Euclidean norm.

    Raises DegenerateEmbeddingError if any row has norm below 1e-30.
    """
    x = as_matrix(x, "x")
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    bad = np.flatnonzero(norms < 1e-30)
    if bad.size:
        raise DegenerateEmbeddingError(
            f"{bad.size} row(s) with zero norm, first at index {bad[0]}")
    return x / norms[:, None]


def top_s_indices(v, s: int) -> np.ndarray:
    """Indices of the ``s`` largest entries of ``v``, sorted ascending.

    Ties are broken towards the lowest index.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ContractError("v must be a vector")
    if not 1 <= s <= v.size:
        raise ContractError(f"s={s} out of range [1, {v.size}]")
    order = np.argsort(-v, kind="stable")
    return np.sort(order[:s])


def top_s_mask(values: np.ndarray, s: int, largest: bool = True) -> np.ndarray:
    """Boolean mask selecting the top ``s`` entries along the last axis.

    Batched form of :func:`top_s_indices` (same lowest-index tie-break).
    With ``largest=False`` the ``s`` smallest entries are selected instead.
    """
    m = values.shape[-1]
    if not 1 <= s <= m:
        raise ContractError(f"s={s} out of range [1, {m}]")
    keys = values if largest else -values
    thr = np.partition(keys, m - s, axis=-1)[..., m - s:m - s + 1]
    above = keys > thr
    at = keys == thr
    # among entries equal to the s-th value keep the lowest indices
    room = s - above.sum(axis=-1, keepdims=True)
    return above | (at & (np.cumsum(at, axis=-1) <= room))


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max-subtraction; accepts a vector or a matrix."""
    z = np.asarray(logits, dtype=np.float64)
    check_finite(z, "logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class Rng:
    """Seeded random source built on Philox4x64.

    ``Rng(seed).substream(label)`` derives an independent child generator from
    ``(seed, sha256(label))``; the same pair always yields the same stream.
    """

    def __init__(self, seed: int, _words: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ContractError("seed must be a uint64")
        self.seed = int(seed)
        self._words = _words
        ss = np.random.SeedSequence([self.seed, *_words])
        self.generator = np.random.Generator(np.random.Philox(ss))

    def substream(self, label: str) -> "Rng":
        digest = hashlib.sha256(label.encode("utf-8")).digest()
        words = tuple(int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4))
        return Rng(self.seed, self._words + words)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.generator.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        # explicit Fisher-Yates so the shuffle algorithm is pinned, not numpy's
        idx = np.arange(n)
        draws = self.generator.random(n)
        for i in range(n - 1, 0, -1):
            j = int(draws[i] * (i + 1))
            idx[i], idx[j] = idx[j], idx[i]
        return idx
