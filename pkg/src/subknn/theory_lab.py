"""Monte-Carlo checks of k-NN density estimation in growing dimension.

The reference distribution is an isotropic Gaussian ``N(0, sigma^2 I_m)``.
Its density is known in closed form, so the split of evaluation points into
the high-density region (``p >= lam``) and the low-density region is exact.
The threshold ``lam`` is the density at a fixed chi-square quantile of the
radius, which keeps both regions populated in every dimension.

``sigma`` is chosen per dimension so that a density scale is shared across the
sweep: either the mean density level ``E_p[p]`` (``match="level"``) or the true
in/out density gap (``match="gap"``). The k-NN estimator is scale-equivariant,
so with a shared scale its absolute errors are comparable across dimensions.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import gammaln
from scipy.stats import chi2

from .numcore import ContractError, Rng


class DuplicatePointError(ValueError):
    """The k-th neighbour sits at distance zero, so the estimate is infinite."""


class EmptyRegionError(ValueError):
    def __init__(self, n_in: int, n_out: int):
        super().__init__(f"empty density region after sampling (in={n_in}, out={n_out})")
        self.n_in = n_in
        self.n_out = n_out


class DomainError(ValueError):
    pass


def ball_volume(m: int, r: float) -> float:
    """Volume of the m-ball of radius r, via log-gamma."""
    if m < 1 or r < 0:
        raise ContractError("need m >= 1 and r >= 0")
    if r == 0:
        return 0.0
    return math.exp(0.5 * m * math.log(math.pi) - gammaln(0.5 * m + 1) + m * math.log(r))


def hypercube_side(k: int, N: int, m: int) -> float:
    """Side of the sub-cube of [0,1]^m expected to hold k of N uniform points."""
    if not 0 < k < N or m < 1:
        raise ContractError("need 0 < k < N and m >= 1")
    return (k / N) ** (1.0 / m)


@dataclass
class DensityEstimate:
    point: np.ndarray
    k: int
    r_k: float
    p_hat: float


def kth_distances(sample: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    d = cdist(queries, sample)
    return np.partition(d, k - 1, axis=1)[:, k - 1]


def _estimate(r_k: np.ndarray, N: int, k: int, m: int) -> np.ndarray:
    if np.any(r_k == 0):
        raise DuplicatePointError("k-th neighbour at distance 0 (duplicate points)")
    log_v = 0.5 * m * math.log(math.pi) - gammaln(0.5 * m + 1) + m * np.log(r_k)
    return (k - 1) / N * np.exp(-log_v)


def knn_density(sample, query, k: int) -> DensityEstimate:
    """``p_hat = (k - 1) / (N * V_m(r_k))`` with an exact brute-force ``r_k``."""
    sample = np.asarray(sample, dtype=np.float64)
    if sample.ndim == 1:
        sample = sample[:, None]
    query = np.atleast_1d(np.asarray(query, dtype=np.float64))
    N, m = sample.shape
    if k < 2 or N < k:
        raise ContractError(f"need 2 <= k <= N (k={k}, N={N})")
    if query.shape != (m,):
        raise ContractError("query dimension mismatch")
    r_k = float(kth_distances(sample, query[None, :], k)[0])
    p_hat = float(_estimate(np.array([r_k]), N, k, m)[0])
    return DensityEstimate(query, k, r_k, p_hat)


# -- Gaussian reference family ---------------------------------------------------

@dataclass(frozen=True)
class GaussianModel:
    m: int
    sigma: float = 1.0

    def logpdf(self, z: np.ndarray) -> np.ndarray:
        sq = np.einsum("ij,ij->i", z, z) / self.sigma ** 2
        return -0.5 * sq - 0.5 * self.m * math.log(2 * math.pi) - self.m * math.log(self.sigma)

    def pdf(self, z: np.ndarray) -> np.ndarray:
        return np.exp(self.logpdf(z))

    def sample(self, rng: Rng, n: int) -> np.ndarray:
        return self.sigma * rng.normal(size=(n, self.m))

    def density_at_radius(self, radius: float) -> float:
        """Density threshold lam at Mahalanobis radius ``radius``."""
        return math.exp(-0.5 * radius ** 2 - 0.5 * self.m * math.log(2 * math.pi)
                        - self.m * math.log(self.sigma))

    def true_gap(self, radius: float) -> float:
        """``E[p | |z| <= radius*sigma] - E[p | outside]`` for z drawn from p.

        Uses ``p(z)^2 = (4 pi sigma^2)^(-m/2) N(z; 0, sigma^2 I / 2)``.
        """
        t = radius ** 2
        scale = (4 * math.pi * self.sigma ** 2) ** (-0.5 * self.m)
        e_in = scale * chi2.cdf(2 * t, self.m) / chi2.cdf(t, self.m)
        e_out = scale * chi2.sf(2 * t, self.m) / chi2.sf(t, self.m)
        return e_in - e_out

    def mean_density(self) -> float:
        """``E_p[p(z)] = (4 pi sigma^2)^(-m/2)``."""
        return (4 * math.pi * self.sigma ** 2) ** (-0.5 * self.m)


def quantile_radius(m: int, q: float = 0.5) -> float:
    return math.sqrt(chi2.ppf(q, m))


def matched_model(m: int, target_gap: float, radius_quantile: float = 0.5) -> GaussianModel:
    """Gaussian in dimension m whose true in/out density gap equals ``target_gap``."""
    unit_gap = GaussianModel(m).true_gap(quantile_radius(m, radius_quantile))
    return GaussianModel(m, (unit_gap / target_gap) ** (1.0 / m))


def level_matched_model(m: int, target_level: float) -> GaussianModel:
    """Gaussian in dimension m whose mean density ``E_p[p]`` equals ``target_level``."""
    return GaussianModel(m, math.sqrt(target_level ** (-2.0 / m) / (4 * math.pi)))


# -- density-gap experiment ---------------------------------------------------------

@dataclass
class GapRow:
    m: int
    delta_hat: float
    delta_true: float
    est_error: float
    n_in: int
    n_out: int
    k: int
    N: int
    trials: int
    seed: int


def estimate_density_gap(model: GaussianModel, lam: float, N: int, k: int, trials: int,
                         rng: Rng, n_eval: int = 200) -> GapRow:
    """Average k-NN density estimates over the two regions split at ``lam``.

    Each trial draws a fresh reference sample of size N and ``n_eval``
    independent evaluation points from ``model``. Returns the estimated gap, the
    gap of the true densities at the same points, and mean |p - p_hat|.
    """
    if k < 2 or N < k or trials < 1:
        raise ContractError("need 2 <= k <= N and trials >= 1")
    p_all, ph_all = [], []
    for t in range(trials):
        sub = rng.substream(f"trial/{t}")
        ref = model.sample(sub.substream("reference"), N)
        z = model.sample(sub.substream("eval"), n_eval)
        p_all.append(model.pdf(z))
        ph_all.append(_estimate(kth_distances(ref, z, k), N, k, model.m))
    p = np.concatenate(p_all)
    p_hat = np.concatenate(ph_all)
    inside = p >= lam
    n_in, n_out = int(inside.sum()), int((~inside).sum())
    if n_in == 0 or n_out == 0:
        raise EmptyRegionError(n_in, n_out)
    return GapRow(
        m=model.m,
        delta_hat=float(p_hat[inside].mean() - p_hat[~inside].mean()),
        delta_true=float(p[inside].mean() - p[~inside].mean()),
        est_error=float(np.abs(p - p_hat).mean()),
        n_in=n_in, n_out=n_out, k=k, N=N, trials=trials, seed=rng.seed)


@dataclass
class TheoryReport:
    rows: list[GapRow] = field(default_factory=list)
    failed: dict[int, str] = field(default_factory=dict)

    @property
    def dims(self) -> list[int]:
        return [r.m for r in self.rows]

    @property
    def delta_hat(self) -> list[float]:
        return [r.delta_hat for r in self.rows]

    @property
    def est_error(self) -> list[float]:
        return [r.est_error for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["m", "delta_hat", "est_error", "k", "N", "trials", "seed"])
            for r in self.rows:
                w.writerow([r.m, format(r.delta_hat, ".17g"), format(r.est_error, ".17g"),
                            r.k, r.N, r.trials, r.seed])


def dimension_sweep(dims, k: int, N: int, trials: int, seed: int, match: str = "level",
                    radius_quantile: float = 0.5, n_eval: int = 200) -> TheoryReport:
    """Run :func:`estimate_density_gap` for each m at a shared density scale.

    The shared scale (mean density level or true gap, see ``match``) is the one
    of the standard Gaussian in the smallest dimension of the sweep. Dimensions
    whose sampling leaves a region empty are recorded in ``report.failed``.
    """
    dims = list(dims)
    if match not in ("level", "gap"):
        raise ContractError(f"unknown matching {match!r}")
    base = GaussianModel(min(dims))
    report = TheoryReport()
    root = Rng(seed)
    for m in dims:
        if match == "level":
            model = level_matched_model(m, base.mean_density())
        else:
            model = matched_model(m, base.true_gap(quantile_radius(base.m, radius_quantile)),
                                  radius_quantile)
        lam = model.density_at_radius(quantile_radius(m, radius_quantile))
        try:
            report.rows.append(estimate_density_gap(model, lam, N, k, trials,
                                                    root.substream(f"m/{m}"), n_eval))
        except (EmptyRegionError, DuplicatePointError) as exc:
            report.failed[m] = str(exc)
    return report


def bound_term(m: int, k: int, N: int) -> float:
    """Shape of the estimation-error bound: (k/N)^(1/m) + k^(-1/2)."""
    return (k / N) ** (1.0 / m) + k ** -0.5


# -- k-NN distance gap identity --------------------------------------------------------

def delta_r_identity_check(r_in: float, m: int, c_kN: float, delta_p: float):
    """Compare the direct distance gap with its closed form.

    With ``p_hat = c * r^(1-m)``, the OOD radius follows from the density
    ``c * r_in^(1-m) - delta_p``; the closed form is
    ``r_in * ((1 - delta_p / c * r_in^(m-1))^(-1/(m-1)) - 1)``.
    Returns ``(direct, closed_form, |difference|)``.
    """
    if m < 2 or r_in <= 0 or c_kN <= 0:
        raise ContractError("need m >= 2, r_in > 0, c > 0")
    radicand = 1.0 - delta_p / c_kN * r_in ** (m - 1)
    if radicand <= 0:
        raise DomainError(f"radicand {radicand} <= 0: OOD density would be non-positive")
    p_in = c_kN * r_in ** (1 - m)
    p_out = p_in - delta_p
    r_out = (p_out / c_kN) ** (1.0 / (1 - m))
    direct = r_out - r_in
    closed = r_in * (radicand ** (-1.0 / (m - 1)) - 1.0)
    return direct, closed, abs(direct - closed)
