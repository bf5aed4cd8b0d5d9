"""Epidemic Learning: decentralized SGD over randomized per-round graphs.

Modules:
    topology: per-round graph samplers and static baselines.
    mixing: contraction factors, Monte Carlo checks, spectral gaps, rate terms.
    problems: quadratic objectives, stochastic gradient oracle, Dirichlet splits.
    protocol: per-node local step, message format and aggregation.
    simulator: synchronous round engine and multi-config comparison.
    cli: command-line front end.
"""

__version__ = "0.1.0"

from .errors import EpidemicError
from .mixing import alpha_local, lambda_oracle, spectral_gap, transient_crossing
from .simulator import ExperimentConfig, ProblemSpec, compare, run
from .topology import RoundGraph, TopologyKind, sample_regular_random, sample_s_out

__all__ = [
    "__version__",
    "EpidemicError",
    "ExperimentConfig",
    "ProblemSpec",
    "RoundGraph",
    "TopologyKind",
    "alpha_local",
    "compare",
    "lambda_oracle",
    "run",
    "sample_regular_random",
    "sample_s_out",
    "spectral_gap",
    "transient_crossing",
]
