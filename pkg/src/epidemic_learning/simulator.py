"""Synchronous round-based execution of Epidemic Learning and D-PSGD baselines.

One run draws a problem from the seed, then for each round t:

1. records metrics on the current models (every ``metrics_every`` rounds),
2. gets the round's graph (fresh for EL kinds, fixed for static kinds),
3. has every node take its local stochastic gradient step,
4. delivers each half-step model to the sender's out-neighbors,
5. lets every node aggregate its (optionally capped) inbox.

Randomness comes from labeled streams (see :mod:`epidemic_learning.streams`),
so two configs that differ only in topology see identical gradient noise.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np

from . import streams
from .errors import InvalidParam, MismatchedConfigs, NonFinite
from .mixing import contraction_factor
from .problems import (
    QuadraticEnsemble,
    dirichlet_partition,
    global_loss,
    grad_oracle_all,
    load_csv_dataset,
    make_blobs,
    make_dirichlet_quadratic,
    make_quadratic,
    optimum,
)
from .protocol import (
    ModelMessage,
    NodeState,
    aggregate,
    apply_indegree_cap,
    local_step,
    message_size,
)
from .topology import (
    RoundGraph,
    TopologyKind,
    build_static,
    sample_regular_random,
    sample_s_out,
    validate_kind,
)

log = logging.getLogger(__name__)

__all__ = [
    "METRIC_COLUMNS",
    "ProblemSpec",
    "ExperimentConfig",
    "RoundMetrics",
    "Comparison",
    "build_problem",
    "initial_models",
    "resolve_gamma",
    "run",
    "theoretical_stepsize",
    "drift_bound",
    "compare",
    "rounds_to_threshold",
]

METRIC_COLUMNS = (
    "round",
    "avg_grad_norm_sq",
    "consensus",
    "loss_at_avg",
    "gap_to_opt",
    "messages_sent",
    "bytes_sent",
)


@dataclass(frozen=True)
class ProblemSpec:
    """How to build the node objectives.

    ``kind="quadratic"`` uses ``L``, ``H`` and ``sigma`` with a shared
    curvature. ``kind="dirichlet"`` partitions a labeled dataset (a CSV at
    ``csv`` or synthetic Gaussian blobs) with concentration ``alpha`` and
    builds per-node quadratics from it.
    """

    kind: str = "quadratic"
    L: float = 1.0
    H: float = 1.0
    sigma: float = 1.0
    alpha: float = 0.1
    classes: int = 10
    items_per_class: int = 100
    spread: float = 1.0
    csv: str | None = None
    min_size: int = 1

    def __post_init__(self) -> None:
        if self.kind not in ("quadratic", "dirichlet"):
            raise InvalidParam(f"unknown problem kind {self.kind!r}")
        if not self.L > 0:
            raise InvalidParam(f"L must be positive, got {self.L}")
        if self.sigma < 0 or self.H < 0:
            raise InvalidParam("sigma and H must be >= 0")
        if self.kind == "dirichlet" and not self.alpha > 0:
            raise InvalidParam(f"alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class ExperimentConfig:
    topology: TopologyKind
    n: int
    d: int
    rounds: int
    gamma: float | str
    problem: ProblemSpec = field(default_factory=ProblemSpec)
    s: int | None = None
    seed: int = 0
    indegree_cap: int | None = None
    metrics_every: int = 1
    steps_per_round: int = 1
    x0: float = 0.0
    init_std: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "topology", TopologyKind.parse(self.topology))
        if self.rounds < 1:
            raise InvalidParam(f"rounds must be >= 1, got {self.rounds}")
        if self.d < 1:
            raise InvalidParam(f"d must be >= 1, got {self.d}")
        if self.metrics_every < 1:
            raise InvalidParam("metrics_every must be >= 1")
        if self.steps_per_round < 1:
            raise InvalidParam("steps_per_round must be >= 1")
        if self.indegree_cap is not None and self.indegree_cap < 0:
            raise InvalidParam("indegree_cap must be >= 0")
        if self.init_std < 0:
            raise InvalidParam("init_std must be >= 0")
        if isinstance(self.gamma, str):
            if self.gamma != "theoretical":
                raise InvalidParam(f"gamma must be a number or 'theoretical', got {self.gamma!r}")
            if not self.topology.is_epidemic:
                raise InvalidParam("theoretical step size is defined for EL kinds only")
        elif not self.gamma >= 0:
            raise InvalidParam(f"gamma must be >= 0, got {self.gamma}")
        validate_kind(self.topology, self.n, self.s)

    @property
    def label(self) -> str:
        if self.topology in (TopologyKind.RING, TopologyKind.TORUS, TopologyKind.FULLY_CONNECTED):
            return self.topology.value
        return f"{self.topology.value}(s={self.s})"

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["topology"] = self.topology.value
        return out

    def with_(self, **changes: Any) -> "ExperimentConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    avg_grad_norm_sq: float
    consensus: float
    loss_at_avg: float
    gap_to_opt: float
    messages_sent: int
    bytes_sent: int

    def as_row(self) -> dict[str, float | int]:
        return {name: getattr(self, name) for name in METRIC_COLUMNS}


def build_problem(spec: ProblemSpec, n: int, d: int, seed: int) -> QuadraticEnsemble:
    rng = streams.derive(seed, "problem")
    if spec.kind == "quadratic":
        return make_quadratic(n, d, spec.L, spec.H, spec.sigma, rng)
    if spec.csv:
        data = load_csv_dataset(spec.csv)
        if data.features.shape[1] != d:
            raise InvalidParam(f"dataset has {data.features.shape[1]} features, config says d={d}")
    else:
        data = make_blobs(spec.classes, spec.items_per_class, d, rng, spread=spec.spread)
    parts = dirichlet_partition(data, spec.alpha, n, rng, min_size=spec.min_size)
    return make_dirichlet_quadratic(data, parts, spec.L, spec.sigma, rng)


def initial_models(config: ExperimentConfig) -> np.ndarray:
    x = np.full((config.n, config.d), float(config.x0))
    if config.init_std > 0:
        x += streams.derive(config.seed, "init").standard_normal(x.shape) * config.init_std
    return x


def theoretical_stepsize(
    kind: TopologyKind,
    n: int,
    s: int,
    T: int,
    L: float,
    sigma: float,
    H: float,
    delta0: float,
) -> float:
    """Step size used by the convergence proof: the min of three terms.

    EL-Oracle: ``min{sqrt(n D/(T L sigma^2)), cbrt(D/(100 T lam L^2 (sigma^2+H^2))), 1/(20L)}``.
    EL-Local swaps ``sigma^2`` for ``211 sigma^2 + 332 alpha H^2`` in the first
    term and 100 for 250 in the second. A term whose denominator vanishes is
    treated as infinite.
    """
    kind = TopologyKind.parse(kind)
    if T < 1 or n < 2:
        raise InvalidParam("need T >= 1 and n >= 2")
    if not (L > 0 and delta0 > 0) or sigma < 0 or H < 0:
        raise InvalidParam("need L > 0, delta0 > 0, sigma >= 0, H >= 0")
    c = contraction_factor(kind, n, s)
    var = sigma**2 + H**2
    if kind is TopologyKind.EL_ORACLE:
        noise, drift_const = sigma**2, 100.0
    else:
        noise, drift_const = 211 * sigma**2 + 332 * c * H**2, 250.0
    first = math.inf if noise == 0 else math.sqrt(n * delta0 / (T * L * noise))
    drift_den = drift_const * T * c * L**2 * var
    second = math.inf if drift_den == 0 else (delta0 / drift_den) ** (1.0 / 3.0)
    return min(first, second, 1.0 / (20.0 * L))


def drift_bound(c: float, gamma: float, sigma: float, H: float) -> float:
    """Ceiling on the mean pairwise squared model distance for ``gamma <= 1/(20L)``."""
    if not 0 <= c < 1:
        raise InvalidParam(f"contraction factor must lie in [0, 1), got {c}")
    if gamma < 0:
        raise InvalidParam(f"gamma must be >= 0, got {gamma}")
    return 20.0 * (1 + 3 * c) / (1 - c) ** 2 * c * gamma**2 * (sigma**2 + H**2)


def resolve_gamma(config: ExperimentConfig, ens: QuadraticEnsemble) -> float:
    if not isinstance(config.gamma, str):
        return float(config.gamma)
    x0 = initial_models(config).mean(axis=0)
    delta0 = ens.delta0(x0)
    if ens.shared_curvature:
        H = ens.H
    else:
        H = math.sqrt(max(ens.heterogeneity_sq(x0), ens.heterogeneity_sq(optimum(ens)[0])))
    return theoretical_stepsize(
        config.topology, config.n, config.s, config.rounds, ens.L, ens.sigma, H, delta0
    )


def _measure(
    ens: QuadraticEnsemble, xs: np.ndarray, f_star: float
) -> tuple[float, float, float, float]:
    a = ens.mean_curvature
    b = ens.offsets.mean(axis=0)
    grads = xs * a - b
    avg_grad = float(np.mean(np.sum(grads**2, axis=1)))
    x_bar = xs.mean(axis=0)
    consensus = 2.0 * float(np.mean(np.sum((xs - x_bar) ** 2, axis=1)))
    loss = global_loss(ens, x_bar)
    return avg_grad, consensus, loss, loss - f_star


def _round_graph(
    config: ExperimentConfig, t: int, static: RoundGraph | None
) -> RoundGraph:
    if static is not None:
        return static
    rng = streams.derive(config.seed, "topology", t)
    if config.topology is TopologyKind.EL_ORACLE:
        return sample_regular_random(config.n, config.s, rng, round=t)
    return sample_s_out(config.n, config.s, rng, round=t)


def run(
    config: ExperimentConfig,
    on_round: Callable[[int, np.ndarray], None] | None = None,
    problem: QuadraticEnsemble | None = None,
) -> list[RoundMetrics]:
    """Execute ``config.rounds`` rounds and return the sampled metrics.

    Args:
        config: Full run description.
        on_round: Called as ``on_round(t, models)`` with the ``(n, d)`` models
            at the start of every round t, and once more with ``t = rounds``
            for the final models. The array must not be modified.
        problem: Use this ensemble instead of building one from the config.
    """
    ens = problem if problem is not None else build_problem(config.problem, config.n, config.d, config.seed)
    if ens.n != config.n or ens.d != config.d:
        raise InvalidParam(f"problem is {ens.n}x{ens.d}, config says {config.n}x{config.d}")
    gamma = resolve_gamma(config, ens)
    if config.steps_per_round > 1:
        log.warning("steps_per_round=%d departs from one step per round", config.steps_per_round)
    _, f_star = optimum(ens)
    static = None
    if not config.topology.is_epidemic:
        static = build_static(config.topology, config.n, config.s, streams.derive(config.seed, "topology"))
    msg_bytes = message_size(config.d)

    xs = initial_models(config)
    nodes = [NodeState(id=i, model=xs[i].copy()) for i in range(config.n)]
    history: list[RoundMetrics] = []

    for t in range(config.rounds):
        if on_round is not None:
            on_round(t, xs)
        graph = _round_graph(config, t, static)
        sent = graph.edge_count()
        if t % config.metrics_every == 0:
            avg_grad, consensus, loss, gap = _measure(ens, xs, f_star)
            history.append(
                RoundMetrics(t, avg_grad, consensus, loss, gap, sent, sent * msg_bytes)
            )

        halves = xs
        for step in range(config.steps_per_round):
            grads = grad_oracle_all(ens, halves, streams.derive(config.seed, "noise", t, step))
            try:
                halves = np.stack(
                    [
                        local_step(NodeState(i, halves[i], t), grads[i], gamma)
                        for i in range(config.n)
                    ]
                )
            except NonFinite as exc:
                raise NonFinite(f"round {t}: {exc}", t) from exc

        outbox = [ModelMessage(round=t, sender=i, model=halves[i]) for i in range(config.n)]
        inboxes = graph.in_adj()
        cap_rng = streams.derive(config.seed, "cap", t) if config.indegree_cap is not None else None
        new_xs = np.empty_like(xs)
        for node in nodes:
            inbox = [outbox[j] for j in inboxes[node.id]]
            if cap_rng is not None:
                inbox = apply_indegree_cap(inbox, config.indegree_cap, cap_rng)
            node.model = aggregate(halves[node.id], inbox, round=t)
            node.round = t + 1
            new_xs[node.id] = node.model
        if not np.all(np.isfinite(new_xs)):
            raise NonFinite(f"round {t}: non-finite model after aggregation", t)
        xs = new_xs

    if on_round is not None:
        on_round(config.rounds, xs)
    return history


def rounds_to_threshold(history: Sequence[RoundMetrics], target: float) -> int | None:
    """First recorded round whose optimality gap is below ``target``."""
    for m in history:
        if m.gap_to_opt < target:
            return m.round
    return None


@dataclass
class Comparison:
    labels: list[str]
    histories: list[list[RoundMetrics]]
    target: float | None

    def table(self, metric: str = "loss_at_avg") -> list[dict[str, float | int]]:
        """Per-round rows with one ``metric`` column per config, aligned on round."""
        by_round: dict[int, dict[str, float | int]] = {}
        for label, hist in zip(self.labels, self.histories):
            for m in hist:
                by_round.setdefault(m.round, {"round": m.round})[label] = getattr(m, metric)
        return [by_round[r] for r in sorted(by_round)]

    def summary(self) -> list[dict[str, Any]]:
        rows = []
        for label, hist in zip(self.labels, self.histories):
            last = hist[-1]
            row: dict[str, Any] = {"config": label, **last.as_row()}
            row["rounds_to_threshold"] = (
                rounds_to_threshold(hist, self.target) if self.target is not None else None
            )
            rows.append(row)
        return rows


def _unique_labels(configs: Sequence[ExperimentConfig]) -> list[str]:
    labels = [c.label for c in configs]
    seen: dict[str, int] = {}
    out = []
    for lab in labels:
        if labels.count(lab) > 1:
            seen[lab] = seen.get(lab, 0) + 1
            lab = f"{lab}#{seen[lab]}"
        out.append(lab)
    return out


def compare(
    configs: Sequence[ExperimentConfig],
    target: float | None = None,
    workers: int = 1,
) -> Comparison:
    """Run several configs on the same problem and line their metrics up."""
    if not configs:
        raise MismatchedConfigs("nothing to compare")
    first = configs[0]
    for c in configs[1:]:
        if (c.n, c.d, c.seed, c.problem) != (first.n, first.d, first.seed, first.problem):
            raise MismatchedConfigs(
                f"{c.label} differs from {first.label} in n, d, seed or problem"
            )
    ens = build_problem(first.problem, first.n, first.d, first.seed)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            histories = list(pool.map(lambda c: run(c, problem=ens), configs))
    else:
        histories = [run(c, problem=ens) for c in configs]
    return Comparison(labels=_unique_labels(configs), histories=histories, target=target)
