"""Command-line harness: benchmark sweeps, feature-file post-processing, reports.

Subcommands::

    isr run-benchmark --example 3p --scrambled --E 2..10 --seeds 50 --algos isr-mean,oracle --out r.csv
    isr make-features --train-out train.csv --test-out test.csv --seed 0
    isr postprocess-features --train train.csv --test test.csv --out metrics.csv
    isr report r.csv

Every output file is written atomically and accompanied by ``<out>.config.json``
holding the resolved configuration. Exit codes: 0 success, 1 runtime failure,
2 usage error; failures print one JSON line ``{"status": "error", ...}`` to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from isr import __version__
from isr.benchmarks import (
    ALGORITHMS,
    BASELINE_SOLVER,
    BENCHMARKS,
    BenchmarkSpec,
    SweepOptions,
    SweepRecord,
    SweepResult,
    run_sweep,
    worst_group_accuracy,
)
from isr.classify import (
    SolverConfig,
    fit_logistic,
    fit_one_vs_rest,
    predict,
    shrink_spurious,
)
from isr.datamodel import Dataset, derive_rng, random_orthonormal_transform
from isr.errors import DomainError, FeatureFileError
from isr.subspace import (
    SubspaceBasis,
    class_conditional_covariances,
    class_conditional_means,
    isr_cov_from_covariances,
    isr_mean_from_means,
)

log = logging.getLogger(__name__)

EXAMPLE_ALIASES = {"2": "example2", "3": "example3", "3p": "example3p"}
SWEEP_COLUMNS = ("algorithm", "E", "seed", "mean_error", "env_errors", "failure")
METRIC_COLUMNS = (
    "head", "average_accuracy", "worst_group_accuracy", "group_accuracies",
    "n_test", "feature_dim", "spurious_dim",
)


class UsageError(ValueError):
    """Invalid command-line configuration (exit code 2)."""


def fmt(x) -> str:
    """Render a number with 6 significant digits; integers stay integers."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return format(float(x), ".6g")


# -- parsing helpers ----------------------------------------------------------


def parse_int_range(text: str) -> list[int]:
    """``"2..10"`` (inclusive), ``"3"`` or ``"2,4,6"`` -> list of ints."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = (int(t) for t in text.split("..", 1))
            if hi < lo:
                raise UsageError(f"empty range {text!r}")
            return list(range(lo, hi + 1))
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"cannot parse integer list {text!r}") from None
    if not vals:
        raise UsageError("empty integer list")
    return vals


def parse_seeds(count: int | None, listed: str | None) -> list[int]:
    if listed is not None:
        try:
            seeds = [int(s) for s in listed.split(",") if s.strip()]
        except ValueError:
            raise UsageError(f"cannot parse seed list {listed!r}") from None
    else:
        seeds = list(range(count if count is not None else 1))
    if not seeds:
        raise UsageError("seed list is empty")
    if any(s < 0 for s in seeds):
        raise UsageError("seeds must be non-negative")
    if len(set(seeds)) != len(seeds):
        raise UsageError("seed list has duplicates")
    return seeds


def resolve_example(name: str) -> str:
    key = EXAMPLE_ALIASES.get(name, name)
    if key not in BENCHMARKS:
        raise UsageError(f"unknown benchmark {name!r}; expected one of {sorted(EXAMPLE_ALIASES)}")
    return key


def resolve_algorithms(text: str) -> list[str]:
    algos = [a.strip() for a in text.split(",") if a.strip()]
    unknown = [a for a in algos if a not in ALGORITHMS]
    if unknown:
        raise UsageError(f"unknown algorithms {unknown}; expected a subset of {list(ALGORITHMS)}")
    if not algos:
        raise UsageError("algorithm list is empty")
    if len(set(algos)) != len(algos):
        raise UsageError("algorithm list has duplicates")
    return algos


# -- run configuration --------------------------------------------------------


@dataclass
class RunConfig:
    """Fully resolved settings of one CLI invocation; echoed to the JSON sidecar."""

    command: str
    out: str | None = None
    # run-benchmark
    benchmark: str = "example3"
    scrambled: bool = False
    E_values: list[int] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    algorithms: list[str] = field(default_factory=list)
    d_inv: int = 5
    d_spu: int | None = None
    n_per_env: int = 10_000
    env_label_fraction: float = 1.0
    label: int | None = 1
    max_pairs: int = 45
    irm_penalty: float = 100.0
    include_wall_time: bool = False
    workers: int | None = None
    solver: dict = field(default_factory=lambda: asdict(SolverConfig()))
    baseline_solver: dict = field(default_factory=lambda: asdict(BASELINE_SOLVER))
    # postprocess-features / make-features / report
    train: str | None = None
    test: str | None = None
    method: str = "isr-mean"
    shrink: float = 0.0
    pca_variance: float | None = 0.999
    skip_recovery: bool = False
    multiclass: bool = False
    l2: float = 1e-4
    n: int = 5000
    dim: int = 64
    seed: int = 0
    inputs: list[str] = field(default_factory=list)

    def resolved(self) -> dict:
        """The fields that influence this command's output."""
        keep = _COMMAND_FIELDS[self.command]
        return {k: v for k, v in asdict(self).items() if k in keep}

    def validate(self):
        """Range checks and path checks, done before any work starts."""
        if self.command == "run-benchmark":
            if not self.E_values or not self.seeds or not self.algorithms:
                raise UsageError("E values, seeds and algorithms must be non-empty")
            if min(self.E_values) < 2:
                raise UsageError("every E must be >= 2")
            if self.benchmark == "example2" and self.d_spu not in (None, 5):
                raise UsageError("example2 has fixed d_spu=5")
            if self.d_inv < 1 or (self.d_spu is not None and self.d_spu < 1):
                raise UsageError("d_inv and d_spu must be >= 1")
            if self.n_per_env < 2:
                raise UsageError("n_per_env must be >= 2")
            if not 0 < self.env_label_fraction <= 1:
                raise UsageError("env-label fraction must lie in (0, 1]")
            if self.max_pairs < 1 or self.irm_penalty < 0:
                raise UsageError("max_pairs must be >= 1 and irm_penalty >= 0")
            if self.workers is not None and self.workers < 1:
                raise UsageError("workers must be >= 1")
        if self.command == "postprocess-features":
            if self.method not in ("isr-mean", "isr-cov"):
                raise UsageError("method must be isr-mean or isr-cov")
            if not 0 <= self.shrink <= 1:
                raise UsageError("shrink factor must lie in [0, 1]")
            if self.pca_variance is not None and not 0 < self.pca_variance <= 1:
                raise UsageError("pca variance fraction must lie in (0, 1]")
            if self.d_spu is not None and self.d_spu < 1:
                raise UsageError("d_spu must be >= 1")
            if self.l2 < 0:
                raise UsageError("l2 must be non-negative")
            for p in (self.train, self.test):
                _check_input(p)
        if self.command == "make-features":
            if self.n < 8 or self.dim < 2:
                raise UsageError("make-features needs n >= 8 and d >= 2")
            _check_output(self.test)
        if self.command == "report":
            if not self.inputs:
                raise UsageError("report needs at least one CSV")
            for p in self.inputs:
                _check_input(p)
        if self.out is not None:
            _check_output(self.out)
        try:
            SolverConfig(**self.solver)
            SolverConfig(**self.baseline_solver)
        except DomainError as err:
            raise UsageError(str(err)) from None
        return self


_COMMAND_FIELDS = {
    "run-benchmark": {
        "command", "out", "benchmark", "scrambled", "E_values", "seeds", "algorithms", "d_inv",
        "d_spu", "n_per_env", "env_label_fraction", "label", "max_pairs", "irm_penalty",
        "include_wall_time", "solver", "baseline_solver",
    },
    "make-features": {"command", "out", "test", "n", "dim", "seed"},
    "postprocess-features": {
        "command", "out", "train", "test", "method", "d_spu", "shrink", "pca_variance",
        "skip_recovery", "multiclass", "l2",
    },
    "report": {"command", "out", "inputs"},
}


def _check_input(path: str | None):
    if path is None:
        raise UsageError("missing input path")
    if not Path(path).is_file():
        raise UsageError(f"input file not found: {path}")


def _check_output(path: str | None):
    if path is None:
        raise UsageError("missing output path")
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise UsageError(f"output directory does not exist: {parent}")
    if not os.access(parent, os.W_OK):
        raise UsageError(f"output directory is not writable: {parent}")


# -- atomic output -------------------------------------------------------------


def atomic_write_text(path: str | os.PathLike, text: str):
    """Write via a temp file in the same directory and rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.resolve().parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sidecar_path(out: str | os.PathLike) -> Path:
    return Path(f"{out}.config.json")


def write_sidecar(out, cfg: RunConfig, extra: dict | None = None):
    payload = {"version": __version__, "config": cfg.resolved()}
    if extra:
        payload.update(extra)
    atomic_write_text(sidecar_path(out), json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


@dataclass(frozen=True)
class HeadMetrics:
    """Test metrics of one classifier head from ``postprocess-features``."""

    head: str
    average_accuracy: float
    worst_group_accuracy: float
    group_accuracies: dict[int, float]
    n_test: int
    feature_dim: int
    spurious_dim: int


def sweep_rows(records: Sequence[SweepRecord], include_wall_time: bool = False):
    header = list(SWEEP_COLUMNS) + (["wall_time"] if include_wall_time else [])
    ordered = sorted(records, key=lambda r: (r.algorithm, r.E, r.seed))
    rows = []
    for r in ordered:
        row = [r.algorithm, fmt(r.E), fmt(r.seed), fmt(r.mean_error),
               ";".join(fmt(e) for e in r.env_errors), r.failure]
        if include_wall_time:
            row.append(fmt(r.wall_time))
        rows.append(row)
    return header, rows


def metric_rows(metrics: Sequence[HeadMetrics]):
    rows = []
    for m in metrics:
        groups = ";".join(f"{g}:{fmt(a)}" for g, a in sorted(m.group_accuracies.items()))
        rows.append([m.head, fmt(m.average_accuracy), fmt(m.worst_group_accuracy), groups,
                     fmt(m.n_test), fmt(m.feature_dim), fmt(m.spurious_dim)])
    return list(METRIC_COLUMNS), rows


def write_results_csv(results, path, include_wall_time: bool = False):
    """Write sweep records (sorted by algorithm, E, seed) or head metrics as CSV.

    ``results`` is a :class:`SweepResult`, a sequence of :class:`SweepRecord`, or
    a sequence of :class:`HeadMetrics`. An empty sequence gives the sweep header.
    """
    if isinstance(results, SweepResult):
        results = results.records
    results = list(results)
    if results and all(isinstance(r, HeadMetrics) for r in results):
        header, rows = metric_rows(results)
    elif all(isinstance(r, SweepRecord) for r in results):
        header, rows = sweep_rows(results, include_wall_time)
    else:
        raise DomainError("results must be all SweepRecord or all HeadMetrics")
    atomic_write_text(path, _csv_text(header, rows))


# -- feature files ---------------------------------------------------------------


def _parse_int(tok: str, what: str, line: int) -> int:
    try:
        v = float(tok)
    except ValueError:
        raise FeatureFileError(f"{what} {tok!r} is not a number", line) from None
    if not v.is_integer():
        raise FeatureFileError(f"{what} {tok!r} is not an integer", line)
    return int(v)


def load_feature_file(path: str | os.PathLike, multiclass: bool = False) -> Dataset:
    """Parse a feature table ``f0,...,f{d-1},label,env[,group]`` into a Dataset.

    Binary labels in {0, 1} or {-1, +1} are mapped to -1/+1. With ``multiclass``
    any non-negative integer labels are kept as class indices.
    """
    path = Path(path)
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as err:
        raise FeatureFileError(f"cannot open {path}: {err.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise FeatureFileError("file is empty", 1) from None
        for col in ("label", "env"):
            if col not in header:
                raise FeatureFileError(f"header is missing the {col!r} column", 1)
        d = header.index("label")
        if d == 0:
            raise FeatureFileError("header has no feature columns", 1)
        expected = [f"f{i}" for i in range(d)] + ["label", "env"]
        has_group = len(header) == d + 3
        if has_group:
            expected.append("group")
        if header != expected:
            raise FeatureFileError(
                f"malformed header; expected {','.join(expected[:2])},...,{','.join(expected[d:])}", 1
            )
        width = len(header)
        feats, labels, envs, groups = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != width:
                raise FeatureFileError(f"expected {width} fields, found {len(row)}", lineno)
            try:
                x = [float(t) for t in row[:d]]
            except ValueError:
                bad = next(t for t in row[:d] if not _is_float(t))
                raise FeatureFileError(f"non-numeric feature value {bad!r}", lineno) from None
            if not all(math.isfinite(v) for v in x):
                raise FeatureFileError("feature value is NaN or infinite", lineno)
            lab = _parse_int(row[d], "label", lineno)
            if multiclass:
                if lab < 0:
                    raise FeatureFileError(f"label {lab} is negative", lineno)
            elif lab not in (-1, 0, 1):
                raise FeatureFileError(f"label {lab} is outside {{0, 1}} / {{-1, +1}}", lineno)
            env = _parse_int(row[d + 1], "env", lineno)
            if env < 0:
                raise FeatureFileError(f"env {env} is negative", lineno)
            if has_group:
                g = _parse_int(row[d + 2], "group", lineno)
                if g < 0:
                    raise FeatureFileError(f"group {g} is negative", lineno)
                groups.append(g)
            feats.append(x)
            labels.append(lab)
            envs.append(env)
    if not feats:
        raise FeatureFileError("file has a header but no rows")
    y = np.asarray(labels, dtype=np.int64)
    if not multiclass:
        seen = set(np.unique(y).tolist())
        if seen == {-1, 0, 1} or (0 in seen and -1 in seen):
            raise FeatureFileError("labels mix the {0, 1} and {-1, +1} conventions")
        if 0 in seen:
            y = np.where(y == 0, -1, 1)
    data = Dataset(
        np.asarray(feats, dtype=np.float64).reshape(len(feats), d),
        y,
        np.asarray(envs, dtype=np.int64),
        group_ids=np.asarray(groups, dtype=np.int64) if has_group else None,
    )
    log.info("loaded %s: n=%d, d=%d", path, data.n, data.dim)
    return data


def _is_float(tok: str) -> bool:
    try:
        float(tok)
        return True
    except ValueError:
        return False


def write_feature_file(path: str | os.PathLike, data: Dataset):
    """Inverse of :func:`load_feature_file`; floats are written round-trip exact."""
    header = [f"f{i}" for i in range(data.dim)] + ["label", "env"]
    if data.group_ids is not None:
        header.append("group")
    rows = []
    for i in range(data.n):
        row = [repr(float(v)) for v in data.features[i]]
        row += [str(int(data.labels[i])), str(int(data.env_ids[i]))]
        if data.group_ids is not None:
            row.append(str(int(data.group_ids[i])))
        rows.append(row)
    atomic_write_text(path, _csv_text(header, rows))


def make_planted_features(
    n: int = 5000,
    d: int = 64,
    seed: int = 0,
    agreement: Sequence[float] = (0.95, 0.75),
    core_margin: float = 2.0,
    spurious_margin: float = 2.0,
    spurious_noise: float = 0.25,
) -> tuple[Dataset, Dataset]:
    """Train/test feature tables with one planted spurious direction.

    Each row has a label ``y`` and an attribute ``a`` that equals ``y`` with an
    environment-dependent probability ``agreement[e]``. One latent coordinate
    carries ``core_margin * y`` plus unit noise, another ``spurious_margin * a``
    plus small noise, the rest is unit noise; a random rotation hides the axes.
    Groups are ``2 * (y > 0) + (a > 0)``. The test table repeats the training
    environment mixture with fresh draws.
    """
    if d < 2:
        raise DomainError("need d >= 2")
    R = random_orthonormal_transform(d, seed)
    n_envs = len(agreement)

    def draw(split):
        rng = derive_rng(seed, "planted", split)
        env = np.repeat(np.arange(n_envs), -(-n // n_envs))[:n]
        y = np.where(rng.random(n) < 0.5, 1, -1)
        p = np.asarray(agreement)[env]
        a = np.where(rng.random(n) < p, y, -y)
        z = rng.standard_normal((n, d))
        z[:, 0] += core_margin * y
        z[:, 1] = spurious_margin * a + spurious_noise * z[:, 1]
        groups = 2 * (y > 0) + (a > 0)
        return Dataset(z @ R.T, y, env, group_ids=groups)

    return draw("train"), draw("test")


# -- post-processing -------------------------------------------------------------


@dataclass(frozen=True)
class Pca:
    mean: np.ndarray
    components: np.ndarray  # k x d, orthonormal rows

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) @ self.components.T


def fit_pca(x: np.ndarray, variance: float) -> Pca:
    """Smallest set of leading principal components explaining ``variance``."""
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    energy = s**2
    total = energy.sum()
    if total == 0:
        k = 1
    else:
        cum = np.cumsum(energy) / total
        k = int(np.searchsorted(cum, variance - 1e-12) + 1)
    k = min(k, vt.shape[0])
    return Pca(mean, vt[:k])


def _class_relabel(data: Dataset, cls: int) -> Dataset:
    return data.replace(labels=np.where(data.labels == cls, 1, -1))


def spurious_subspace(data: Dataset, method: str, d_spu: int | None) -> SubspaceBasis:
    """Spurious directions of training features, averaged over every class.

    ISR-Mean can identify at most ``E - 1`` directions, so it uses
    ``min(E - 1, d_spu)``; ISR-Cov uses ``d_spu`` (default 1).
    """
    E = data.environments.size
    if E < 2:
        raise DomainError("the training file has a single environment; no spurious subspace can be recovered")
    classes = [int(c) for c in np.unique(data.labels)]
    if classes == [-1, 1]:
        per_class = [data, _class_relabel(data, -1)]
    else:
        per_class = [_class_relabel(data, c) for c in classes]
    if method == "isr-mean":
        k = min(E - 1, d_spu if d_spu is not None else E - 1, data.dim)
        means = [class_conditional_means(p, 1).rows for p in per_class]
        return isr_mean_from_means(means, k, largest=True)
    k = d_spu if d_spu is not None else 1
    covs = [class_conditional_covariances(p, 1) for p in per_class]
    pooled = [sum(c[e] for c in covs) / len(covs) for e in range(E)]
    counts = [int(np.sum(data.known_mask & (data.env_ids == e))) for e in data.environments]
    return isr_cov_from_covariances(pooled, k, counts=counts, largest=True)


def _fit_head(x, labels, l2: float):
    cfg = SolverConfig(l2_penalty=l2)
    if set(np.unique(labels).tolist()) <= {-1, 1}:
        return fit_logistic(x, labels, cfg)
    return fit_one_vs_rest(x, labels, cfg)


def _head_metrics(name, head, x, test: Dataset, k_spu, warnings) -> HeadMetrics:
    probe = test.replace(features=x)
    if test.group_ids is None:
        avg = float(np.mean(predict(head, x) == test.labels))
        return HeadMetrics(name, avg, float("nan"), {}, test.n, x.shape[1], k_spu)
    acc = worst_group_accuracy(head, probe)
    warnings.extend(acc.warnings)
    return HeadMetrics(name, acc.average, acc.worst, acc.per_group, test.n, x.shape[1], k_spu)


def postprocess_features(train: Dataset, test: Dataset, cfg: RunConfig):
    """Fit a plain logistic head and an ISR head; returns ``(metrics, info)``."""
    if train.dim != test.dim:
        raise DomainError(f"train has {train.dim} features, test has {test.dim}")
    warnings: list[str] = []
    if test.group_ids is None:
        warnings.append("test file has no group column; reporting average accuracy only")
    xtr, xte = train.features, test.features
    pca_rank = train.dim
    if cfg.pca_variance is not None:
        pca = fit_pca(xtr, cfg.pca_variance)
        xtr, xte = pca.apply(xtr), pca.apply(xte)
        pca_rank = pca.components.shape[0]
    reduced = train.replace(features=xtr)

    plain = _fit_head(xtr, train.labels, cfg.l2)
    metrics = [_head_metrics("plain", plain, xte, test, 0, warnings)]

    k_spu = 0
    if cfg.skip_recovery:
        xtr_isr, xte_isr = xtr, xte
    else:
        basis = spurious_subspace(reduced, cfg.method, cfg.d_spu)
        k_spu = basis.k
        xtr_isr = shrink_spurious(xtr, basis, cfg.shrink)
        xte_isr = shrink_spurious(xte, basis, cfg.shrink)
    isr_head = _fit_head(xtr_isr, train.labels, cfg.l2)
    metrics.append(_head_metrics(cfg.method, isr_head, xte_isr, test, k_spu, warnings))
    info = {"pca_rank": pca_rank, "spurious_dim": k_spu, "n_train": train.n,
            "train_environments": [int(e) for e in train.environments],
            "warnings": sorted(set(warnings))}
    return metrics, info


# -- report ----------------------------------------------------------------------


def read_sweep_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("algorithm", "E", "seed", "mean_error") if c not in (reader.fieldnames or [])]
        if missing:
            raise FeatureFileError(f"{path}: missing columns {missing}", 1)
        return list(reader)


def summarize(rows: Sequence[dict]):
    """Per ``(algorithm, E)``: seed count, failures, mean/std/min/max of test error."""
    cells: dict[tuple[str, int], list] = {}
    for r in rows:
        cells.setdefault((r["algorithm"], int(r["E"])), []).append(r)
    header = ["algorithm", "E", "n_seeds", "n_failed", "mean_error", "std_error", "min_error", "max_error"]
    out = []
    for (algo, E), rs in sorted(cells.items()):
        errs = np.array([float(r["mean_error"]) for r in rs if not r.get("failure")])
        stats = [errs.mean(), errs.std(), errs.min(), errs.max()] if errs.size else [math.nan] * 4
        out.append([algo, fmt(E), fmt(len(rs)), fmt(len(rs) - errs.size)] + [fmt(s) for s in stats])
    return header, out


# -- CLI -------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_solver_flags(p):
    g = p.add_argument_group("solver")
    g.add_argument("--max-iters", type=int, default=50_000, help="ISR head solver iterations")
    g.add_argument("--grad-tol", type=float, default=1e-8)
    g.add_argument("--step-rule", default="newton", help="newton, backtracking, fixed or adam")
    g.add_argument("--step-size", type=float, default=1.0)
    g.add_argument("--baseline-iters", type=int, default=BASELINE_SOLVER.max_iters,
                   help="Adam steps for the ERM/IRMv1 baselines")
    g.add_argument("--baseline-lr", type=float, default=BASELINE_SOLVER.step_size)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="isr", description="Invariant-subspace recovery benchmarks and feature post-processing.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    rb = sub.add_parser("run-benchmark", help="environment-complexity sweep on a linear benchmark")
    rb.add_argument("--example", required=True, help="2, 3 or 3p")
    rb.add_argument("--scrambled", action="store_true", help="mix latents with a random orthonormal R")
    rb.add_argument("--E", dest="E", default="2..10", help="e.g. 2..10, 3, or 2,4,6")
    seeds = rb.add_mutually_exclusive_group()
    seeds.add_argument("--seeds", type=int, help="use seeds 0..N-1 (default 1)")
    seeds.add_argument("--seed-list", help="comma-separated explicit seeds")
    rb.add_argument("--algos", default="isr-mean,isr-cov,erm,oracle")
    rb.add_argument("--d-inv", type=int, default=5)
    rb.add_argument("--d-spu", type=int, default=None)
    rb.add_argument("--n-per-env", type=int, default=10_000)
    rb.add_argument("--env-label-fraction", type=float, default=1.0)
    rb.add_argument("--label", choices=("1", "-1", "both"), default="1",
                    help="class whose conditional moments ISR uses")
    rb.add_argument("--max-pairs", type=int, default=45)
    rb.add_argument("--irm-penalty", type=float, default=100.0)
    rb.add_argument("--workers", type=int, default=None, help="threads (default: $ISR_NUM_THREADS or 1)")
    rb.add_argument("--include-wall-time", action="store_true",
                    help="add a wall_time column (breaks byte-level determinism)")
    rb.add_argument("--out", required=True)
    _add_solver_flags(rb)

    mf = sub.add_parser("make-features", help="write a planted-spurious train/test feature pair")
    mf.add_argument("--train-out", required=True)
    mf.add_argument("--test-out", required=True)
    mf.add_argument("--n", type=int, default=5000)
    mf.add_argument("--d", type=int, default=64)
    mf.add_argument("--seed", type=int, default=0)

    pp = sub.add_parser("postprocess-features", help="ISR post-processing of extracted features")
    pp.add_argument("--train", required=True)
    pp.add_argument("--test", required=True)
    pp.add_argument("--method", choices=("isr-mean", "isr-cov"), default="isr-mean")
    pp.add_argument("--d-spu", type=int, default=None,
                    help="spurious dimension (isr-mean caps it at E-1; isr-cov default 1)")
    pp.add_argument("--shrink", type=float, default=0.0, help="scale of the spurious component (0 removes it)")
    pca = pp.add_mutually_exclusive_group()
    pca.add_argument("--pca-variance", type=float, default=0.999)
    pca.add_argument("--no-pca", action="store_true")
    pp.add_argument("--skip-recovery", action="store_true", help="fit the ISR head on unmodified features")
    pp.add_argument("--multiclass", action="store_true", help="accept integer class labels")
    pp.add_argument("--l2", type=float, default=1e-4)
    pp.add_argument("--out", required=True)

    rp = sub.add_parser("report", help="summarize sweep CSVs per algorithm and E")
    rp.add_argument("inputs", nargs="+")
    rp.add_argument("--out", default=None, help="write the summary CSV here instead of stdout")
    return parser


def config_from_args(args) -> RunConfig:
    cmd = args.command
    if cmd == "run-benchmark":
        label = None if args.label == "both" else int(args.label)
        return RunConfig(
            command=cmd, out=args.out, benchmark=resolve_example(args.example),
            scrambled=args.scrambled, E_values=parse_int_range(args.E),
            seeds=parse_seeds(args.seeds, args.seed_list), algorithms=resolve_algorithms(args.algos),
            d_inv=args.d_inv, d_spu=args.d_spu, n_per_env=args.n_per_env,
            env_label_fraction=args.env_label_fraction, label=label, max_pairs=args.max_pairs,
            irm_penalty=args.irm_penalty, include_wall_time=args.include_wall_time,
            workers=args.workers,
            solver=dict(max_iters=args.max_iters, grad_tol=args.grad_tol, l2_penalty=0.0,
                        step_rule=args.step_rule, step_size=args.step_size),
            baseline_solver=dict(max_iters=args.baseline_iters, grad_tol=BASELINE_SOLVER.grad_tol,
                                 l2_penalty=0.0, step_rule="adam", step_size=args.baseline_lr),
        )
    if cmd == "make-features":
        return RunConfig(command=cmd, out=args.train_out, test=args.test_out, n=args.n,
                         dim=args.d, seed=args.seed)
    if cmd == "postprocess-features":
        return RunConfig(
            command=cmd, out=args.out, train=args.train, test=args.test, method=args.method,
            d_spu=args.d_spu, shrink=args.shrink,
            pca_variance=None if args.no_pca else args.pca_variance,
            skip_recovery=args.skip_recovery, multiclass=args.multiclass, l2=args.l2,
        )
    return RunConfig(command=cmd, out=args.out, inputs=list(args.inputs))


def cmd_run_benchmark(cfg: RunConfig):
    template = BenchmarkSpec(
        cfg.benchmark, n_envs=max(cfg.E_values), scrambled=cfg.scrambled, d_inv=cfg.d_inv,
        d_spu=cfg.d_spu if cfg.d_spu is not None else 5, n_per_env=cfg.n_per_env,
    )
    baseline = SolverConfig(**cfg.baseline_solver)
    opts = SweepOptions(
        solver=SolverConfig(**cfg.solver), erm_solver=baseline, irm_solver=baseline,
        irm_penalty=cfg.irm_penalty, max_pairs=cfg.max_pairs, label=cfg.label,
        env_label_fraction=cfg.env_label_fraction,
    )
    result = run_sweep(template, cfg.algorithms, cfg.E_values, cfg.seeds, opts, cfg.workers)
    write_results_csv(result, cfg.out, cfg.include_wall_time)
    failures = sum(not r.ok for r in result.records)
    write_sidecar(cfg.out, cfg, {"rows": len(result.records), "failed_records": failures})
    print(f"wrote {len(result.records)} rows to {cfg.out} ({failures} algorithm failures)")


def cmd_make_features(cfg: RunConfig):
    train, test = make_planted_features(cfg.n, cfg.dim, cfg.seed)
    write_feature_file(cfg.out, train)
    write_feature_file(cfg.test, test)
    write_sidecar(cfg.out, cfg)
    print(f"wrote {train.n} training rows to {cfg.out} and {test.n} test rows to {cfg.test}")


def cmd_postprocess(cfg: RunConfig):
    train = load_feature_file(cfg.train, cfg.multiclass)
    test = load_feature_file(cfg.test, cfg.multiclass)
    metrics, info = postprocess_features(train, test, cfg)
    for w in info["warnings"]:
        print(f"warning: {w}", file=sys.stderr)
    write_results_csv(metrics, cfg.out)
    write_sidecar(cfg.out, cfg, info)
    for m in metrics:
        print(f"{m.head}: average accuracy {m.average_accuracy:.4f}, "
              f"worst-group accuracy {m.worst_group_accuracy:.4f}")


def cmd_report(cfg: RunConfig):
    rows = [r for p in cfg.inputs for r in read_sweep_csv(p)]
    header, out = summarize(rows)
    text = _csv_text(header, out)
    if cfg.out is None:
        sys.stdout.write(text)
    else:
        atomic_write_text(cfg.out, text)
        write_sidecar(cfg.out, cfg)


COMMANDS = {
    "run-benchmark": cmd_run_benchmark,
    "make-features": cmd_make_features,
    "postprocess-features": cmd_postprocess,
    "report": cmd_report,
}


def _fail(kind: str, err: BaseException, code: int) -> int:
    line = {"status": "error", "kind": kind, "type": type(err).__name__, "message": str(err), "exit_code": code}
    print(json.dumps(line), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = config_from_args(args).validate()
    except UsageError as err:
        return _fail("usage", err, 2)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        COMMANDS[cfg.command](cfg)
    except UsageError as err:
        return _fail("usage", err, 2)
    except (ValueError, OSError, np.linalg.LinAlgError) as err:
        return _fail("runtime", err, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
