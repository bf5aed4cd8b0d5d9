"""Command-line front end.

Subcommands read an INI-style config file::

    [experiment]
    topology = el-oracle
    n = 8
    d = 5
    s = 2
    rounds = 50
    gamma = 0.05
    seed = 0

    [problem]
    kind = quadratic
    L = 1
    H = 1
    sigma = 1

``compare`` additionally reads ``[run.NAME]`` sections whose keys override
``[experiment]``. ``verify-mixing`` reads ``[verify]`` (``grid = 8:2, 16:3``,
``kinds``, ``trials``, ``dim``, ``seed``), ``indegree`` reads ``[indegree]``
(``n``, ``s``, ``rounds``, ``seed``) and ``partition-stats`` reads
``[partition]`` (``n``, ``alpha``, ``seed`` plus either ``csv`` or
``classes``/``items_per_class``/``d``).

Exit codes: 0 on success, 1 on a runtime error or failed check, 2 on a bad
config.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from collections.abc import Callable, Sequence
from dataclasses import fields
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__, streams
from .errors import ConfigError, EpidemicError
from .mixing import (
    SE_BAND,
    check_average_preservation,
    indegree_cdf,
    mc_average_variance,
    mc_contraction,
)
from .problems import dirichlet_partition, load_csv_dataset, make_blobs
from .simulator import METRIC_COLUMNS, ExperimentConfig, ProblemSpec, compare, run
from .topology import TopologyKind, sample_s_out_batch

log = logging.getLogger("epidemic_learning.cli")

MIN_MEANINGFUL_TRIALS = 1000
_EXPERIMENT_FIELDS = {f.name for f in fields(ExperimentConfig)} - {"problem"}
_PROBLEM_FIELDS = {f.name for f in fields(ProblemSpec)}
_INT_FIELDS = {"n", "d", "rounds", "s", "seed", "indegree_cap", "metrics_every", "steps_per_round",
               "classes", "items_per_class", "min_size"}


# ---------------------------------------------------------------- file output


def atomic_write_text(path: Path, text: str) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header: Sequence[str], rows: Sequence[dict[str, Any]]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(header), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _jsonl_text(rows: Sequence[dict[str, Any]]) -> str:
    return "".join(json.dumps(r) + "\n" for r in rows)


def _manifest(command: str, config: dict[str, Any], seed: int, seed_override: bool) -> str:
    payload = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "seed_source": "override" if seed_override else "config",
        "config": config,
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- config parsing


def _read_config(path: str | None) -> configparser.ConfigParser:
    if path is None:
        raise ConfigError("no config file given (use --config PATH)")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep 'L' and 'H' as written
    try:
        parser.read(p)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {p}: {exc}") from exc
    return parser


def _coerce(key: str, raw: str) -> Any:
    raw = raw.strip()
    if raw.lower() in ("", "none"):
        return None
    if key in ("topology", "kind", "csv"):
        return raw
    if key == "gamma" and raw.lower() == "theoretical":
        return "theoretical"
    try:
        return int(raw) if key in _INT_FIELDS else float(raw)
    except ValueError:
        raise ConfigError(f"{key} = {raw!r} is not a number") from None


def _section(parser: configparser.ConfigParser, name: str, required: bool = True) -> dict[str, str]:
    if not parser.has_section(name):
        if required:
            raise ConfigError(f"config has no [{name}] section")
        return {}
    return dict(parser.items(name))


def _problem_from(raw: dict[str, str]) -> ProblemSpec:
    unknown = set(raw) - _PROBLEM_FIELDS
    if unknown:
        raise ConfigError(f"unknown [problem] keys: {', '.join(sorted(unknown))}")
    kind = raw.get("kind", "").strip()
    required = {"kind", "L", "sigma"} | ({"H"} if kind == "quadratic" else {"alpha"})
    missing = required - raw.keys()
    if missing:
        raise ConfigError(f"missing [problem] keys: {', '.join(sorted(missing))}")
    try:
        return ProblemSpec(**{k: _coerce(k, v) for k, v in raw.items()})
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid [problem]: {exc}") from exc


def _experiment_from(raw: dict[str, str], problem: ProblemSpec, seed: int | None) -> ExperimentConfig:
    unknown = set(raw) - _EXPERIMENT_FIELDS
    if unknown:
        raise ConfigError(f"unknown experiment keys: {', '.join(sorted(unknown))}")
    values = {k: _coerce(k, v) for k, v in raw.items()}
    missing = {"topology", "n", "d", "rounds", "gamma", "seed"} - values.keys()
    if seed is not None:
        missing.discard("seed")
    if missing:
        raise ConfigError(f"missing experiment keys: {', '.join(sorted(missing))}")
    if seed is not None:
        values["seed"] = seed
    try:
        return ExperimentConfig(problem=problem, **values)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid experiment: {exc}") from exc


def _load_experiment(parser, seed: int | None) -> ExperimentConfig:
    problem = _problem_from(_section(parser, "problem"))
    return _experiment_from(_section(parser, "experiment"), problem, seed)


def _parse_grid(text: str) -> list[tuple[int, int]]:
    grid = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            n, s = item.split(":")
            grid.append((int(n), int(s)))
        except ValueError:
            raise ConfigError(f"grid entry {item!r} is not of the form n:s") from None
    if not grid:
        raise ConfigError("verify grid is empty")
    return grid


def _get_int(raw: dict[str, str], key: str, default: int | None = None) -> int:
    if key not in raw:
        if default is None:
            raise ConfigError(f"missing key {key!r}")
        return default
    try:
        return int(raw[key])
    except ValueError:
        raise ConfigError(f"{key} = {raw[key]!r} is not an integer") from None


def _workers() -> int:
    raw = os.environ.get("EL_THREADS")
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        log.warning("ignoring EL_THREADS=%r", raw)
        return 1


def _emit(args: argparse.Namespace, text: str) -> None:
    if not args.quiet:
        print(text)


# ---------------------------------------------------------------- subcommands


def cmd_run(args: argparse.Namespace) -> int:
    """Run one experiment; write metrics.csv, metrics.jsonl and manifest.json."""
    config = _load_experiment(_read_config(args.config), args.seed)
    out = Path(args.out)
    history = run(config)
    rows = [m.as_row() for m in history]
    atomic_write_text(out / "metrics.csv", _csv_text(METRIC_COLUMNS, rows))
    atomic_write_text(out / "metrics.jsonl", _jsonl_text(rows))
    atomic_write_text(
        out / "manifest.json", _manifest("run", config.to_dict(), config.seed, args.seed is not None)
    )
    last = history[-1]
    _emit(args, f"{config.label}: {len(rows)} rows, final gap {last.gap_to_opt:.4g}, "
                f"consensus {last.consensus:.4g} -> {out}")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    """Run the ``[run.NAME]`` variants of one experiment on a shared problem."""
    parser = _read_config(args.config)
    problem = _problem_from(_section(parser, "problem"))
    base = _section(parser, "experiment")
    target = None
    if "target" in base:
        target = float(base.pop("target"))
    names = [sec for sec in parser.sections() if sec.startswith("run.")]
    if not names:
        raise ConfigError("compare needs at least one [run.NAME] section")
    configs = [_experiment_from({**base, **dict(parser.items(sec))}, problem, args.seed)
               for sec in names]
    result = compare(configs, target=target, workers=_workers())
    labels = [sec[len("run."):] for sec in names]
    out = Path(args.out)
    long_rows = []
    for label, hist in zip(labels, result.histories):
        long_rows.extend({"config": label, **m.as_row()} for m in hist)
    atomic_write_text(out / "metrics.csv", _csv_text(("config", *METRIC_COLUMNS), long_rows))
    atomic_write_text(out / "metrics.jsonl", _jsonl_text(long_rows))
    summary = result.summary()
    for label, row in zip(labels, summary):
        row["config"] = label
    atomic_write_text(out / "summary.json", json.dumps(summary, indent=2) + "\n")
    manifest_cfg = {"runs": {lab: c.to_dict() for lab, c in zip(labels, configs)}, "target": target}
    atomic_write_text(
        out / "manifest.json",
        _manifest("compare", manifest_cfg, configs[0].seed, args.seed is not None),
    )
    for row in summary:
        rtt = row["rounds_to_threshold"]
        _emit(args, f"{row['config']:>20}  gap {row['gap_to_opt']:.4g}  consensus "
                    f"{row['consensus']:.4g}  rounds-to-target {'-' if rtt is None else rtt}")
    return 0


def cmd_verify_mixing(args: argparse.Namespace) -> int:
    """Monte Carlo check of contraction, mean preservation and mean variance."""
    raw = _section(_read_config(args.config), "verify")
    grid = _parse_grid(raw.get("grid", ""))
    try:
        kinds = [TopologyKind.parse(k) for k in raw.get("kinds", "el-oracle, el-local").split(",")]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if any(not k.is_epidemic for k in kinds):
        raise ConfigError("verify-mixing supports el-oracle and el-local only")
    trials = args.trials if args.trials is not None else _get_int(raw, "trials", 100_000)
    dim = _get_int(raw, "dim", 3)
    seed = args.seed if args.seed is not None else _get_int(raw, "seed", 0)
    if trials < MIN_MEANINGFUL_TRIALS:
        print(f"warning: {trials} trials give standard errors too wide to be meaningful "
              f"(use at least {MIN_MEANINGFUL_TRIALS})", file=sys.stderr)

    header = f"{'kind':<10} {'check':<9} {'n':>5} {'s':>4} {'closed-form':>12} {'estimate':>12} {'std-error':>10}  result"
    _emit(args, header)
    rows = []
    all_ok = True
    for case, (kind, (n, s)) in enumerate((k, g) for k in kinds for g in grid):
        vectors = streams.derive(seed, "init", case).standard_normal((n, dim))
        rng = streams.derive(seed, "topology", case)
        est = mc_contraction(kind, n, s, vectors, trials, rng)
        checks = [("contract", est.target, est.mean_ratio, est.std_error, est.agrees())]
        avg = check_average_preservation(kind, n, s, vectors, trials, rng)
        if kind is TopologyKind.EL_ORACLE:
            ok = avg.max_residual <= 1e-12 * max(1.0, avg.reference_norm)
            checks.append(("mean", 0.0, avg.max_residual, 0.0, ok))
        else:
            ok = avg.mean_residual_vector_norm <= avg.band
            checks.append(("mean", 0.0, avg.mean_residual_vector_norm, avg.band / SE_BAND, ok))
            var = mc_average_variance(n, s, vectors, trials, rng)
            checks.append(("variance", var.bound, var.estimate, var.std_error, var.holds()))
        for name, target, value, se, ok in checks:
            all_ok &= bool(ok)
            verdict = "PASS" if ok else "FAIL"
            rows.append({"kind": kind.value, "check": name, "n": n, "s": s, "closed_form": target,
                         "estimate": value, "std_error": se, "result": verdict})
            _emit(args, f"{kind.value:<10} {name:<9} {n:>5} {s:>4} {target:>12.6g} "
                        f"{value:>12.6g} {se:>10.3g}  {verdict}")
    if args.out:
        out = Path(args.out)
        atomic_write_text(out / "verify.csv", _csv_text(list(rows[0]), rows))
        atomic_write_text(
            out / "manifest.json",
            _manifest("verify-mixing", {"grid": grid, "kinds": [k.value for k in kinds],
                                        "trials": trials, "dim": dim}, seed, args.seed is not None),
        )
    return 0 if all_ok else 1


def simulate_indegrees(n: int, s: int, rounds: int, seed: int) -> np.ndarray:
    """Pooled EL-Local indegree counts: ``counts[k]`` node-rounds saw indegree k."""
    counts = np.zeros(n, dtype=np.int64)
    per_chunk = max(1, 2_000_000 // (n * s))
    done = 0
    chunk = 0
    while done < rounds:
        size = min(per_chunk, rounds - done)
        adj = sample_s_out_batch(n, s, size, streams.derive(seed, "topology", chunk))
        flat = (np.arange(size)[:, None, None] * n + adj).ravel()
        indeg = np.bincount(flat, minlength=size * n)
        counts += np.bincount(indeg, minlength=n)[:n]
        done += size
        chunk += 1
    return counts


def percentile_indegree(counts: np.ndarray, q: float = 0.99) -> int:
    """Smallest k whose empirical CDF reaches ``q``."""
    cdf = np.cumsum(counts) / counts.sum()
    return int(np.searchsorted(cdf, q - 1e-12))


def cmd_indegree(args: argparse.Namespace) -> int:
    """Empirical EL-Local indegree CDF next to the exact binomial CDF."""
    raw = _section(_read_config(args.config), "indegree")
    n, s = _get_int(raw, "n"), _get_int(raw, "s")
    rounds = args.trials if args.trials is not None else _get_int(raw, "rounds", 5000)
    seed = args.seed if args.seed is not None else _get_int(raw, "seed", 0)
    counts = simulate_indegrees(n, s, rounds, seed)
    empirical = np.cumsum(counts) / counts.sum()
    exact = indegree_cdf(n, s)
    p99 = percentile_indegree(counts)
    ks = float(np.max(np.abs(empirical - exact)))
    last = min(n - 1, int(np.flatnonzero(counts).max()) + 1)
    rows = [{"k": k, "empirical_cdf": float(empirical[k]), "binomial_cdf": float(exact[k])}
            for k in range(last + 1)]
    out = Path(args.out)
    atomic_write_text(out / "indegree.csv", _csv_text(("k", "empirical_cdf", "binomial_cdf"), rows))
    atomic_write_text(
        out / "manifest.json",
        _manifest("indegree", {"n": n, "s": s, "rounds": rounds, "p99": p99, "ks_distance": ks},
                  seed, args.seed is not None),
    )
    _emit(args, f"n={n} s={s} rounds={rounds}: 99th-percentile indegree {p99}, "
                f"KS distance to binomial {ks:.3g}")
    return 0


def cmd_partition_stats(args: argparse.Namespace) -> int:
    """Per-node class counts and dominant-class share of a Dirichlet partition."""
    raw = _section(_read_config(args.config), "partition")
    n = _get_int(raw, "n")
    try:
        alpha = float(raw.get("alpha", "0.1"))
    except ValueError:
        raise ConfigError(f"alpha = {raw['alpha']!r} is not a number") from None
    seed = args.seed if args.seed is not None else _get_int(raw, "seed", 0)
    rng = streams.derive(seed, "problem")
    if raw.get("csv"):
        data = load_csv_dataset(raw["csv"])
    else:
        data = make_blobs(_get_int(raw, "classes", 10), _get_int(raw, "items_per_class", 100),
                          _get_int(raw, "d", 2), rng)
    parts = dirichlet_partition(data, alpha, n, rng, min_size=_get_int(raw, "min_size", 0))
    rows = []
    for i, part in enumerate(parts):
        hist = np.bincount(data.labels[np.asarray(part, dtype=np.int64)], minlength=data.classes)
        size = int(hist.sum())
        share = float(hist.max() / size) if size else math.nan
        rows.append({"node": i, "size": size, "dominant_share": share,
                     **{f"class_{c}": int(h) for c, h in enumerate(hist)}})
    out = Path(args.out)
    atomic_write_text(out / "partition.csv", _csv_text(list(rows[0]), rows))
    atomic_write_text(
        out / "manifest.json",
        _manifest("partition-stats", {"n": n, "alpha": alpha, "items": len(data)}, seed,
                  args.seed is not None),
    )
    shares = [r["dominant_share"] for r in rows if r["size"]]
    _emit(args, f"n={n} alpha={alpha}: median dominant-class share {np.median(shares):.3f}")
    return 0


COMMANDS: dict[str, Callable[[argparse.Namespace], int]] = {
    "run": cmd_run,
    "compare": cmd_compare,
    "verify-mixing": cmd_verify_mixing,
    "indegree": cmd_indegree,
    "partition-stats": cmd_partition_stats,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="epidemic", description="Epidemic Learning simulator and verification suites"
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").splitlines()[0])
        p.add_argument("--config", metavar="PATH", help="INI config file")
        p.add_argument("--out", metavar="DIR", default="out" if name != "verify-mixing" else None,
                       help="output directory")
        p.add_argument("--seed", type=int, metavar="U64", help="override the config seed")
        p.add_argument("--trials", type=int, metavar="N",
                       help="override trials (verify-mixing) or rounds (indegree)")
        p.add_argument("--quiet", action="store_true", help="suppress stdout summaries")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print(f"epidemic_learning.cli: seed {args.seed} is not a u64", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"epidemic_learning.cli: config error: {exc}", file=sys.stderr)
        return 2
    except (EpidemicError, ValueError, OSError) as exc:
        print(f"epidemic_learning.cli: {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
