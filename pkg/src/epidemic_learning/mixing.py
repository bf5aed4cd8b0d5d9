"""Contraction factors of one randomized communication phase, and checks.

The closed forms ``lambda_oracle`` and ``alpha_local`` give the expected
shrink of model dispersion, measured around the pre-communication average,
for EL-Oracle and EL-Local respectively. The Monte Carlo functions run the
actual samplers from :mod:`epidemic_learning.topology` and compare.

Also here: the equal-weight spectral gap of a static graph, the
transient-iteration crossing point, rate terms of the convergence bound, and
the binomial indegree tail of EL-Local.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp, xlog1py, xlogy

from .errors import DegenerateInput, Disconnected, InvalidDegree, InvalidParam, ZeroNoise
from .topology import RoundGraph, TopologyKind, sample_regular_batch, sample_s_out_batch

__all__ = [
    "ContractionEstimate",
    "AverageCheck",
    "VarianceCheck",
    "RateTerms",
    "lambda_oracle",
    "alpha_local",
    "contraction_factor",
    "communicate_batch",
    "mc_contraction",
    "check_average_preservation",
    "mc_average_variance",
    "mixing_matrix",
    "spectral_gap",
    "transient_crossing",
    "rate_terms",
    "indegree_log_pmf",
    "indegree_tail",
    "indegree_cdf",
]

SE_BAND = 3.0
_CHUNK_CELLS = 2_000_000


@dataclass(frozen=True)
class ContractionEstimate:
    """Monte Carlo estimate of a dispersion ratio next to its closed form."""

    mean_ratio: float
    std_error: float
    trials: int
    target: float

    def __post_init__(self) -> None:
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.std_error < 0:
            raise ValueError("std_error must be >= 0")

    @property
    def z_score(self) -> float:
        diff = self.mean_ratio - self.target
        if self.std_error == 0:
            return 0.0 if abs(diff) <= 1e-12 else math.inf
        return diff / self.std_error

    def agrees(self, band: float = SE_BAND) -> bool:
        # ratios are dimensionless; gaps at rounding level count as agreement
        return abs(self.mean_ratio - self.target) <= 1e-12 or abs(self.z_score) <= band


@dataclass(frozen=True)
class AverageCheck:
    """Drift of the network average across one communication phase.

    ``max_residual`` is the largest ``||y_bar - x_bar||`` seen over trials.
    ``mean_residual_vector_norm`` is the norm of the trial-mean of
    ``y_bar - x_bar``; ``band`` is three standard errors of that norm.
    """

    max_residual: float
    mean_residual_vector_norm: float
    band: float
    trials: int
    reference_norm: float


@dataclass(frozen=True)
class VarianceCheck:
    estimate: float
    std_error: float
    bound: float
    trials: int

    def holds(self, band: float = SE_BAND) -> bool:
        return self.estimate <= self.bound + band * self.std_error


@dataclass(frozen=True)
class RateTerms:
    term_speedup: float
    term_drift: float
    term_higher: float

    def __post_init__(self) -> None:
        for name in ("term_speedup", "term_drift", "term_higher"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def total(self) -> float:
        return self.term_speedup + self.term_drift + self.term_higher


def _check_ns(n: int, s: int) -> None:
    if n < 2:
        raise InvalidDegree(f"need n >= 2, got {n}")
    if not 1 <= s <= n - 1:
        raise InvalidDegree(f"s={s} outside [1, {n - 1}] for n={n}")


def lambda_oracle(n: int, s: int) -> float:
    """EL-Oracle contraction factor ``(1 - s/(n-1)) / (s+1)``."""
    _check_ns(n, s)
    return (1.0 - s / (n - 1)) / (s + 1)


def alpha_local(n: int, s: int) -> float:
    """EL-Local contraction factor ``(1 - (1 - s/(n-1))^n)/s - 1/(n-1)``."""
    _check_ns(n, s)
    q = 1.0 - s / (n - 1)
    # -expm1(n*log1p(-p)) keeps precision when q^n is close to 1
    p = s / (n - 1)
    one_minus_qn = 1.0 if q == 0.0 else -math.expm1(n * math.log1p(-p))
    return max(one_minus_qn / s - 1.0 / (n - 1), 0.0)


def contraction_factor(kind: TopologyKind, n: int, s: int) -> float:
    kind = TopologyKind.parse(kind)
    if kind is TopologyKind.EL_ORACLE:
        return lambda_oracle(n, s)
    if kind is TopologyKind.EL_LOCAL:
        return alpha_local(n, s)
    raise ValueError(f"no closed-form contraction factor for {kind.value}")


def _sample_batch(kind: TopologyKind, n: int, s: int, size: int, rng: np.random.Generator):
    if kind is TopologyKind.EL_ORACLE:
        return sample_regular_batch(n, s, size, rng)
    if kind is TopologyKind.EL_LOCAL:
        return sample_s_out_batch(n, s, size, rng)
    raise ValueError(f"Monte Carlo checks support EL kinds only, got {kind.value}")


def communicate_batch(x: np.ndarray, out_adj: np.ndarray) -> np.ndarray:
    """Apply one equal-weight aggregation per draw.

    Args:
        x: Node vectors, shape ``(n, d)``.
        out_adj: Out-neighbor ids, shape ``(size, n, s)``.

    Returns:
        ``(size, n, d)``: node i's output is the mean of its own vector and
        every vector it received.
    """
    size, n, s = out_adj.shape
    d = x.shape[1]
    flat_target = (np.arange(size)[:, None, None] * n + out_adj).ravel()
    senders = np.broadcast_to(np.arange(n)[None, :, None], out_adj.shape).ravel()
    indegree = np.bincount(flat_target, minlength=size * n).astype(float)
    sums = np.empty((size * n, d))
    for k in range(d):
        sums[:, k] = np.bincount(flat_target, weights=x[senders, k], minlength=size * n)
    sums = sums.reshape(size, n, d) + x[None, :, :]
    return sums / (indegree.reshape(size, n, 1) + 1.0)


def _chunks(trials: int, n: int, s: int, d: int):
    per = max(1, _CHUNK_CELLS // max(1, n * max(s, d)))
    done = 0
    while done < trials:
        size = min(per, trials - done)
        yield size
        done += size


def _dispersion(x: np.ndarray) -> float:
    return float(np.mean(np.sum((x - x.mean(axis=0)) ** 2, axis=1)))


def _prepare(vectors) -> np.ndarray:
    x = np.asarray(vectors, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError("vectors must have shape (n, d)")
    return x


def mc_contraction(
    kind: TopologyKind,
    n: int,
    s: int,
    vectors,
    trials: int,
    rng: np.random.Generator,
) -> ContractionEstimate:
    """Estimate the expected dispersion ratio of one communication phase.

    The ratio is ``(1/n) sum_i ||y_i - x_bar||^2`` over
    ``(1/n) sum_i ||x_i - x_bar||^2`` where ``x_bar`` is the average BEFORE
    communicating. Its expectation equals the kind's contraction factor
    exactly, so agreement within a few standard errors is a sharp test of
    the sampler.
    """
    kind = TopologyKind.parse(kind)
    x = _prepare(vectors)
    if x.shape[0] != n:
        raise ValueError(f"expected {n} vectors, got {x.shape[0]}")
    target = contraction_factor(kind, n, s)
    base = _dispersion(x)
    if base <= 0.0:
        raise DegenerateInput("input vectors have zero dispersion")
    x_bar = x.mean(axis=0)
    total = 0.0
    total_sq = 0.0
    for size in _chunks(trials, n, s, x.shape[1]):
        y = communicate_batch(x, _sample_batch(kind, n, s, size, rng))
        ratios = np.mean(np.sum((y - x_bar) ** 2, axis=2), axis=1) / base
        total += float(ratios.sum())
        total_sq += float(np.square(ratios).sum())
    mean = total / trials
    var = max(total_sq / trials - mean * mean, 0.0) * trials / max(trials - 1, 1)
    return ContractionEstimate(
        mean_ratio=mean, std_error=math.sqrt(var / trials), trials=trials, target=target
    )


def check_average_preservation(
    kind: TopologyKind,
    n: int,
    s: int,
    vectors,
    trials: int,
    rng: np.random.Generator,
) -> AverageCheck:
    """Measure how far one communication phase moves the network average."""
    kind = TopologyKind.parse(kind)
    x = _prepare(vectors)
    x_bar = x.mean(axis=0)
    d = x.shape[1]
    max_res = 0.0
    shift_sum = np.zeros(d)
    shift_sq = np.zeros(d)
    for size in _chunks(trials, n, s, d):
        y = communicate_batch(x, _sample_batch(kind, n, s, size, rng))
        shift = y.mean(axis=1) - x_bar
        max_res = max(max_res, float(np.max(np.linalg.norm(shift, axis=1))))
        shift_sum += shift.sum(axis=0)
        shift_sq += np.square(shift).sum(axis=0)
    mean_shift = shift_sum / trials
    var = np.maximum(shift_sq / trials - mean_shift**2, 0.0) * trials / max(trials - 1, 1)
    band = SE_BAND * math.sqrt(float(var.sum()) / trials)
    return AverageCheck(
        max_residual=max_res,
        mean_residual_vector_norm=float(np.linalg.norm(mean_shift)),
        band=band,
        trials=trials,
        reference_norm=float(np.linalg.norm(x_bar)),
    )


def mc_average_variance(
    n: int, s: int, vectors, trials: int, rng: np.random.Generator
) -> VarianceCheck:
    """EL-Local variance of the post-communication average, against its bound.

    ``estimate`` is the Monte Carlo mean of ``||y_bar - x_bar||^2``;
    ``bound`` is ``alpha_s / (2n)`` times the mean pairwise squared distance
    of the inputs.
    """
    x = _prepare(vectors)
    alpha = alpha_local(n, s)
    pairwise = 2.0 * _dispersion(x)
    bound = alpha / (2 * n) * pairwise
    if pairwise <= 0.0:
        raise DegenerateInput("input vectors have zero dispersion")
    x_bar = x.mean(axis=0)
    total = 0.0
    total_sq = 0.0
    for size in _chunks(trials, n, s, x.shape[1]):
        y = communicate_batch(x, sample_s_out_batch(n, s, size, rng))
        sq = np.sum((y.mean(axis=1) - x_bar) ** 2, axis=1)
        total += float(sq.sum())
        total_sq += float(np.square(sq).sum())
    mean = total / trials
    var = max(total_sq / trials - mean * mean, 0.0) * trials / max(trials - 1, 1)
    return VarianceCheck(
        estimate=mean, std_error=math.sqrt(var / trials), bound=bound, trials=trials
    )


def mixing_matrix(graph: RoundGraph) -> np.ndarray:
    """Equal-weight averaging matrix: ``W[i, j] = 1/(deg(i)+1)`` on ``N(i) + {i}``."""
    a = graph.adjacency_matrix() + np.eye(graph.n)
    return a / a.sum(axis=1, keepdims=True)


def spectral_gap(
    graph: RoundGraph,
    *,
    tol: float = 1e-9,
    max_iter: int = 100_000,
    strict: bool = False,
) -> float:
    """``1 - |lambda_2(W)|`` for the equal-weight mixing matrix of ``graph``.

    ``W`` is similar to the symmetric ``M^{-1/2} (A+I) M^{-1/2}`` with
    ``M = diag(deg+1)``, whose top eigenvector is ``sqrt(deg+1)``. Power
    iteration on the square of that operator, deflated against the top
    eigenvector, converges to ``lambda_2^2`` even when ``+l`` and ``-l`` are
    both eigenvalues. Iteration stops once the eigen-residual falls below
    ``tol`` relative to the estimate.

    A disconnected graph has gap 0; with ``strict=True`` it raises instead.
    """
    if graph.directed:
        raise ValueError("spectral_gap needs an undirected graph")
    if not graph.is_connected():
        if strict:
            raise Disconnected("graph is not connected")
        return 0.0
    a = graph.adjacency_matrix() + np.eye(graph.n)
    mass = a.sum(axis=1)
    scale = 1.0 / np.sqrt(mass)
    sym = a * scale[:, None] * scale[None, :]
    top = np.sqrt(mass)
    top /= np.linalg.norm(top)

    def apply(v: np.ndarray) -> np.ndarray:
        v = v - top * (top @ v)
        w = sym @ (sym @ v)
        return w - top * (top @ w)

    v = np.random.default_rng(20230917).standard_normal(graph.n)
    v -= top * (top @ v)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return 1.0
    v /= norm
    mu = 0.0
    for _ in range(max_iter):
        w = apply(v)
        mu = float(v @ w)
        resid = float(np.linalg.norm(w - mu * v))
        if resid <= tol * max(mu, 1e-300) or mu <= 1e-300:
            break
        v = w / np.linalg.norm(w)
    lam2 = math.sqrt(max(mu, 0.0))
    return 1.0 - lam2


def transient_crossing(
    n: int,
    s: int,
    L: float,
    delta0: float,
    sigma: float,
    H: float,
    kind: TopologyKind = TopologyKind.EL_ORACLE,
    contraction: float | None = None,
) -> float:
    """Round count at which the linear-speedup term overtakes the drift term.

    Solves ``sqrt(L D sigma^2 / (n T)) = cbrt(c L^2 D^2 (sigma^2+H^2) / T^2)``
    for ``T``, giving ``c^2 L D (sigma^2+H^2)^2 n^3 / sigma^6``. Constant
    factors of the bound are dropped, so only ratios are meaningful.

    Args:
        contraction: Use this ``c`` instead of the kind's closed form at
            ``(n, s)``. Holding it fixed isolates the ``n^3`` scaling.
    """
    if sigma == 0:
        raise ZeroNoise("crossing is undefined without gradient noise")
    if sigma < 0 or L <= 0 or delta0 <= 0 or H < 0:
        raise InvalidParam("need sigma > 0, L > 0, delta0 > 0, H >= 0")
    c = contraction_factor(kind, n, s) if contraction is None else float(contraction)
    if c <= 0:
        raise InvalidDegree(f"contraction factor is 0 at n={n}, s={s}: no transient phase")
    var = sigma**2 + H**2
    return c**2 * L * delta0 * var**2 * n**3 / sigma**6


def rate_terms(
    kind: TopologyKind,
    n: int,
    s: int,
    T: int,
    L: float,
    delta0: float,
    sigma: float,
    H: float,
) -> RateTerms:
    """Explicit three-term upper bound on the time-averaged gradient norm.

    Constants are those obtained with the proof's step-size choice: 8/38/80
    for EL-Oracle and 8/51/80 (with the 211/332 noise mix) for EL-Local.
    """
    kind = TopologyKind.parse(kind)
    if T < 1 or L <= 0 or delta0 < 0 or sigma < 0 or H < 0:
        raise InvalidParam("need T >= 1, L > 0, delta0 >= 0, sigma >= 0, H >= 0")
    c = contraction_factor(kind, n, s)
    var = sigma**2 + H**2
    drift = np.cbrt(c * L**2 * delta0**2 * var / T**2)
    if kind is TopologyKind.EL_ORACLE:
        speed = 8.0 * math.sqrt(L * delta0 * sigma**2 / (n * T))
        drift *= 38.0
    else:
        speed = 8.0 * math.sqrt(L * delta0 * (211 * sigma**2 + 332 * c * H**2) / (n * T))
        drift *= 51.0
    return RateTerms(term_speedup=speed, term_drift=float(drift), term_higher=80.0 * L * delta0 / T)


def indegree_log_pmf(n: int, s: int) -> np.ndarray:
    """Log pmf of Binomial(n-1, s/(n-1)) over ``k = 0..n-1``."""
    _check_ns(n, s)
    m = n - 1
    p = s / m
    k = np.arange(m + 1, dtype=float)
    log_binom = gammaln(m + 1) - gammaln(k + 1) - gammaln(m - k + 1)
    return log_binom + xlogy(k, p) + xlog1py(m - k, -p)


def indegree_tail(n: int, s: int, k: int) -> float:
    """``P(indegree >= k)`` for an EL-Local node, summed in log space."""
    if k <= 0:
        return 1.0
    if k >= n:
        return 0.0
    logp = indegree_log_pmf(n, s)[k:]
    return float(min(1.0, math.exp(logsumexp(logp))))


def indegree_cdf(n: int, s: int) -> np.ndarray:
    """``P(indegree <= k)`` for ``k = 0..n-1``."""
    logp = indegree_log_pmf(n, s)
    cdf = np.cumsum(np.exp(logp - logp.max())) * math.exp(logp.max())
    return np.minimum(cdf, 1.0)
