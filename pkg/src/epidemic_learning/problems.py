"""Synthetic objectives with known smoothness, noise and heterogeneity.

Each node i holds a separable quadratic

    f_i(x) = 1/2 x^T diag(a_i) x - b_i^T x + c_i

and the global objective is their average. With a curvature vector shared by
all nodes (the :func:`make_quadratic` testbed), heterogeneity is exactly
``(1/n) sum ||b_i - b_bar||^2`` at every x.

:func:`make_dirichlet_quadratic` instead derives node objectives from a
labeled dataset split by :func:`dirichlet_partition`; curvature then differs
between nodes and heterogeneity varies with x.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidParam, OutOfRange

__all__ = [
    "QuadraticEnsemble",
    "LabeledDataset",
    "make_quadratic",
    "make_blobs",
    "make_dirichlet_quadratic",
    "load_csv_dataset",
    "dirichlet_partition",
    "grad_oracle",
    "grad_oracle_all",
    "global_grad",
    "global_loss",
    "optimum",
]


@dataclass(frozen=True)
class QuadraticEnsemble:
    """n separable quadratics over R^d.

    Attributes:
        curvature: ``(d,)`` shared diagonal, or ``(n, d)`` per-node diagonals.
        offsets: ``(n, d)`` linear terms b_i.
        sigma: Gradient noise level; ``E||xi||^2 = sigma^2``.
        constants: ``(n,)`` additive constants c_i (zeros by default).
    """

    curvature: np.ndarray
    offsets: np.ndarray
    sigma: float
    constants: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        curv = np.asarray(self.curvature, dtype=float)
        offs = np.asarray(self.offsets, dtype=float)
        if offs.ndim != 2:
            raise InvalidParam("offsets must have shape (n, d)")
        n, d = offs.shape
        if n < 2:
            raise InvalidParam(f"need n >= 2 nodes, got {n}")
        if curv.shape not in ((d,), (n, d)):
            raise InvalidParam(f"curvature shape {curv.shape} incompatible with offsets {offs.shape}")
        if np.any(curv <= 0):
            raise InvalidParam("curvature must be positive")
        if self.sigma < 0:
            raise InvalidParam("sigma must be >= 0")
        consts = np.zeros(n) if self.constants is None else np.asarray(self.constants, dtype=float)
        for arr in (curv, offs, consts):
            arr.setflags(write=False)
        object.__setattr__(self, "curvature", curv)
        object.__setattr__(self, "offsets", offs)
        object.__setattr__(self, "constants", consts)

    @property
    def n(self) -> int:
        return self.offsets.shape[0]

    @property
    def d(self) -> int:
        return self.offsets.shape[1]

    @property
    def shared_curvature(self) -> bool:
        return self.curvature.ndim == 1

    @property
    def node_curvature(self) -> np.ndarray:
        """Curvature broadcast to ``(n, d)``."""
        return np.broadcast_to(self.curvature, (self.n, self.d))

    @property
    def mean_curvature(self) -> np.ndarray:
        return self.curvature if self.shared_curvature else self.curvature.mean(axis=0)

    @property
    def L(self) -> float:
        return float(self.curvature.max())

    @property
    def H(self) -> float:
        """Exact heterogeneity constant (shared curvature), else its value at the optimum."""
        if self.shared_curvature:
            centred = self.offsets - self.offsets.mean(axis=0)
            return math.sqrt(float(np.mean(np.sum(centred**2, axis=1))))
        return math.sqrt(self.heterogeneity_sq(optimum(self)[0]))

    def local_grads(self, x: np.ndarray) -> np.ndarray:
        """Exact gradients of every f_i; ``x`` is ``(d,)`` or per-node ``(n, d)``."""
        return self.node_curvature * x - self.offsets

    def heterogeneity_sq(self, x: np.ndarray) -> float:
        g = self.local_grads(np.asarray(x, dtype=float))
        return float(np.mean(np.sum((g - g.mean(axis=0)) ** 2, axis=1)))

    def delta0(self, x0: np.ndarray) -> float:
        return global_loss(self, x0) - optimum(self)[1]


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    classes: int

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels, dtype=np.int64)
        feats = np.asarray(self.features, dtype=float)
        if feats.ndim != 2 or feats.shape[0] != labels.shape[0]:
            raise InvalidParam("features must be (items, dim) with one label per item")
        if labels.size and (labels.min() < 0 or labels.max() >= self.classes):
            raise InvalidParam(f"labels must lie in [0, {self.classes})")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "features", feats)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def items(self) -> list[tuple[np.ndarray, int]]:
        return list(zip(self.features, self.labels.tolist()))


def _log_uniform_curvature(d: int, L: float, rng: np.random.Generator) -> np.ndarray:
    curv = np.exp(rng.uniform(math.log(L / 10.0), math.log(L), size=d))
    curv[int(np.argmax(curv))] = L
    return curv


def make_quadratic(
    n: int, d: int, L: float, H_target: float, sigma: float, rng: np.random.Generator
) -> QuadraticEnsemble:
    """Shared-curvature ensemble with heterogeneity exactly ``H_target``.

    Curvature is log-uniform in ``[L/10, L]`` with its maximum pinned to L.
    Offsets are Gaussian, recentred, then rescaled so the mean squared
    deviation from their average is ``H_target**2``.
    """
    if n < 2 or d < 1:
        raise InvalidParam(f"need n >= 2 and d >= 1, got n={n}, d={d}")
    if not L > 0:
        raise InvalidParam(f"L must be positive, got {L}")
    if H_target < 0 or sigma < 0:
        raise InvalidParam("H_target and sigma must be >= 0")
    curv = _log_uniform_curvature(d, L, rng)
    raw = rng.standard_normal((n, d))
    centre = rng.standard_normal(d)
    dev = raw - raw.mean(axis=0)
    spread = math.sqrt(float(np.mean(np.sum(dev**2, axis=1))))
    if H_target == 0 or spread == 0:
        offsets = np.tile(centre, (n, 1))
    else:
        offsets = centre + dev * (H_target / spread)
    return QuadraticEnsemble(curvature=curv, offsets=offsets, sigma=float(sigma))


def grad_oracle(
    ens: QuadraticEnsemble, i: int, x: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Stochastic gradient of f_i at x with isotropic Gaussian noise."""
    if not 0 <= i < ens.n:
        raise OutOfRange(f"node id {i} outside [0, {ens.n})")
    x = np.asarray(x, dtype=float)
    g = ens.node_curvature[i] * x - ens.offsets[i]
    if ens.sigma > 0:
        g = g + rng.standard_normal(ens.d) * (ens.sigma / math.sqrt(ens.d))
    return g


def grad_oracle_all(ens: QuadraticEnsemble, xs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Stochastic gradients for every node at once; row i uses node i's model.

    Draws one ``(n, d)`` noise block, so row i matches what the same stream
    would hand node i when the block is consumed in node order.
    """
    g = ens.local_grads(np.asarray(xs, dtype=float))
    if ens.sigma > 0:
        g = g + rng.standard_normal((ens.n, ens.d)) * (ens.sigma / math.sqrt(ens.d))
    return g


def global_grad(ens: QuadraticEnsemble, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return ens.mean_curvature * x - ens.offsets.mean(axis=0)


def global_loss(ens: QuadraticEnsemble, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    quad = 0.5 * float(np.sum(ens.mean_curvature * x * x))
    return quad - float(ens.offsets.mean(axis=0) @ x) + float(ens.constants.mean())


def optimum(ens: QuadraticEnsemble) -> tuple[np.ndarray, float]:
    """Closed-form minimizer and minimum value of the global objective."""
    a = ens.mean_curvature
    b = ens.offsets.mean(axis=0)
    x_star = b / a
    f_star = -0.5 * float(b @ x_star) + float(ens.constants.mean())
    return x_star, f_star


def _largest_remainder(total: int, shares: np.ndarray) -> np.ndarray:
    quotas = shares * total
    counts = np.floor(quotas).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort keeps ties in node order
        order = np.argsort(-(quotas - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(
    data: LabeledDataset,
    alpha: float,
    n: int,
    rng: np.random.Generator,
    min_size: int = 0,
    max_attempts: int = 1000,
) -> list[list[int]]:
    """Split item indices over n nodes with per-class Dirichlet shares.

    For every class a Dirichlet(alpha, ..., alpha) draw gives node shares;
    the class's shuffled items are dealt out by largest-remainder rounding of
    those shares. With ``min_size > 0`` the whole split is redrawn until every
    node holds at least that many items.

    Returns:
        n sorted index lists that together cover every item exactly once.
    """
    if not alpha > 0:
        raise InvalidParam(f"alpha must be positive, got {alpha}")
    if n < 1:
        raise InvalidParam(f"need n >= 1, got {n}")
    by_class = [np.flatnonzero(data.labels == c) for c in range(data.classes)]
    for c, idx in enumerate(by_class):
        if idx.size == 0:
            raise InvalidParam(f"class {c} has no items")
    if min_size * n > len(data):
        raise InvalidParam(f"cannot give {n} nodes {min_size} items each from {len(data)}")
    for _ in range(max_attempts):
        parts: list[list[int]] = [[] for _ in range(n)]
        for idx in by_class:
            idx = rng.permutation(idx)
            if n == 1:
                shares = np.ones(1)
            else:
                shares = rng.dirichlet(np.full(n, alpha))
                if not np.all(np.isfinite(shares)):
                    shares = np.zeros(n)
                    shares[int(rng.integers(n))] = 1.0
            counts = _largest_remainder(idx.size, shares)
            bounds = np.concatenate([[0], np.cumsum(counts)])
            for node in range(n):
                parts[node].extend(idx[bounds[node] : bounds[node + 1]].tolist())
        if min(len(p) for p in parts) >= min_size:
            return [sorted(p) for p in parts]
    raise InvalidParam(f"no split with {min_size} items per node after {max_attempts} attempts")


def make_blobs(
    classes: int,
    items_per_class: int,
    d: int,
    rng: np.random.Generator,
    spread: float = 1.0,
    noise: float = 0.1,
) -> LabeledDataset:
    """Gaussian class clusters: centre ~ N(0, spread^2 I), item = centre + N(0, noise^2 I)."""
    if classes < 1 or items_per_class < 1 or d < 1:
        raise InvalidParam("classes, items_per_class and d must be >= 1")
    centres = rng.standard_normal((classes, d)) * spread
    labels = np.repeat(np.arange(classes), items_per_class)
    feats = centres[labels] + rng.standard_normal((labels.size, d)) * noise
    return LabeledDataset(features=feats, labels=labels, classes=classes)


def make_dirichlet_quadratic(
    data: LabeledDataset,
    parts: list[list[int]],
    L: float,
    sigma: float,
    rng: np.random.Generator,
) -> QuadraticEnsemble:
    """Node objectives from a partitioned labeled dataset.

    Item (z, c) contributes ``1/2 sum_k a_{c,k} (x_k - z_k)^2`` where each
    class has its own curvature vector in ``[L/10, L]``. A node's objective
    is the mean over its items, so non-IID splits give nodes different
    curvature as well as different minimizers.
    """
    if not L > 0:
        raise InvalidParam(f"L must be positive, got {L}")
    if any(len(p) == 0 for p in parts):
        raise InvalidParam("every node needs at least one item")
    d = data.features.shape[1]
    class_curv = np.stack([_log_uniform_curvature(d, L, rng) for _ in range(data.classes)])
    item_curv = class_curv[data.labels]
    item_lin = item_curv * data.features
    item_const = 0.5 * np.sum(item_curv * data.features**2, axis=1)
    curv = np.stack([item_curv[p].mean(axis=0) for p in parts])
    offs = np.stack([item_lin[p].mean(axis=0) for p in parts])
    consts = np.array([item_const[p].mean() for p in parts])
    return QuadraticEnsemble(curvature=curv, offsets=offs, sigma=float(sigma), constants=consts)


def load_csv_dataset(path: str | Path) -> LabeledDataset:
    """Read a CSV with a header row; the last column is the integer label."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InvalidParam(f"{path}: empty file")
        rows = [r for r in reader if r]
    if not rows:
        raise InvalidParam(f"{path}: no data rows")
    try:
        feats = np.array([[float(v) for v in r[:-1]] for r in rows])
        labels = np.array([int(r[-1]) for r in rows])
    except ValueError as exc:
        raise InvalidParam(f"{path}: {exc}") from exc
    if feats.ndim != 2 or feats.shape[1] == 0:
        raise InvalidParam(f"{path}: need at least one feature column")
    if labels.min() < 0:
        raise InvalidParam(f"{path}: negative label")
    return LabeledDataset(features=feats, labels=labels, classes=int(labels.max()) + 1)
