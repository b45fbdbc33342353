"""Linear Unit-Test classification benchmarks and environment-complexity sweeps.

Example-2 is a cow/camel style structural model whose label is a deterministic
function of the invariant latents; Example-3 is the Gaussian model with
``sigma_c = sigma_e = 0.1``; Example-3' draws ``sigma_e ~ Unif(0.1, 0.3)``. The
scrambled variants mix latents with a random orthonormal ``R``.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from isr.classify import (
    SolverConfig,
    compose_predictor,
    evaluate_error,
    fit_logistic,
    irmv1_fit,
    predict,
    project_features,
)
from isr.datamodel import (
    Dataset,
    EnvironmentSpec,
    EnvParams,
    LinearPredictor,
    concat,
    derive_rng,
    derive_seed,
    oracle_predictor,
    random_orthonormal_transform,
    sample_environment,
)
from isr.errors import DomainError
from isr.subspace import isr_cov, isr_cov_robust, isr_mean

log = logging.getLogger(__name__)

BENCHMARKS = ("example2", "example3", "example3p")
ALGORITHMS = ("isr-mean", "isr-cov", "isr-cov-robust", "erm", "irmv1", "oracle")

# Example-2 constants
EX2_P = (0.95, 0.97, 0.99)
EX2_S = (0.3, 0.5, 0.7)
EX2_NU_INV = 0.02
EX2_NU_SPU = 1.0
EX2_NOISE = 0.1
# Example-3 constants
EX3_GAMMA = 0.1
EX3_SIGMA = 0.1
EX3P_SIGMA_RANGE = (0.1, 0.3)


@dataclass(frozen=True)
class BenchmarkSpec:
    name: str
    n_envs: int
    seed: int = 0
    scrambled: bool = False
    d_inv: int = 5
    d_spu: int = 5
    n_per_env: int = 10_000

    def __post_init__(self):
        if self.name not in BENCHMARKS:
            raise DomainError(f"unknown benchmark {self.name!r}; expected one of {BENCHMARKS}")
        if self.n_envs < 2:
            raise DomainError(f"n_envs must be >= 2, got {self.n_envs}")
        if self.d_inv < 1 or self.d_spu < 1 or self.n_per_env < 0 or self.seed < 0:
            raise DomainError("dimensions must be positive and n_per_env, seed non-negative")

    @property
    def d(self) -> int:
        return self.d_inv + self.d_spu

    def transform(self) -> np.ndarray:
        if self.scrambled:
            return random_orthonormal_transform(self.d, derive_seed(self.seed, "scramble"))
        return np.eye(self.d)


def _with_groups(data: Dataset) -> Dataset:
    return data.replace(group_ids=2 * data.env_ids + (data.labels > 0))


# -- Example-2 ---------------------------------------------------------------


def example2_env_params(spec: BenchmarkSpec) -> list[tuple[float, float]]:
    """``(p, s)`` per environment: background and animal probabilities."""
    params = []
    for e in range(spec.n_envs):
        if e < len(EX2_P):
            params.append((EX2_P[e], EX2_S[e]))
        else:
            rng = derive_rng(spec.seed, "example2-env", e)
            params.append((float(rng.uniform(0.9, 1.0)), float(rng.uniform(0.3, 0.7))))
    return params


def _sample_example2(spec, R, p, s, e, n, seed):
    rng = derive_rng(seed, e)
    probs = [p * s, (1 - p) * s, p * (1 - s), (1 - p) * (1 - s)]
    j = rng.choice(4, size=n, p=probs) + 1
    sign_inv = np.where(j <= 2, 1.0, -1.0)
    sign_spu = np.where((j == 1) | (j == 4), 1.0, -1.0)
    noise_inv = rng.normal(0.0, EX2_NOISE, (n, spec.d_inv))
    noise_spu = rng.normal(0.0, EX2_NOISE, (n, spec.d_spu))
    z_inv = sign_inv[:, None] * (1.0 + noise_inv) * EX2_NU_INV
    z_spu = sign_spu[:, None] * (1.0 + noise_spu) * EX2_NU_SPU
    y = np.where(z_inv.sum(axis=1) > 0, 1, -1)
    z = np.hstack([z_inv, z_spu])
    return Dataset(
        features=z @ R.T,
        labels=y,
        env_ids=np.full(n, e),
        latents=z,
        transform=R,
        d_inv=spec.d_inv,
    )


def make_example2(spec: BenchmarkSpec) -> tuple[Dataset, Dataset]:
    if spec.name != "example2":
        raise DomainError(f"make_example2 called with benchmark {spec.name!r}")
    R = spec.transform()
    out = []
    for split in ("train", "test"):
        seed = derive_seed(spec.seed, split)
        parts = [
            _sample_example2(spec, R, p, s, e, spec.n_per_env, seed)
            for e, (p, s) in enumerate(example2_env_params(spec))
        ]
        out.append(_with_groups(concat(parts)))
    return out[0], out[1]


# -- Example-3 / 3' ----------------------------------------------------------


def example3_environment_spec(spec: BenchmarkSpec, primed: bool | None = None) -> EnvironmentSpec:
    """Example-3 (or 3') as an :class:`EnvironmentSpec`.

    Label +1 corresponds to the source's ``y = 1`` class, whose invariant mean is
    ``-gamma`` and spurious mean ``-mu_e``.
    """
    if primed is None:
        primed = spec.name == "example3p"
    params = []
    for e in range(spec.n_envs):
        rng = derive_rng(spec.seed, "example3-env", e)
        mu = rng.standard_normal(spec.d_spu)
        sigma = rng.uniform(*EX3P_SIGMA_RANGE)
        params.append(EnvParams(-mu, sigma if primed else EX3_SIGMA))
    return EnvironmentSpec(
        d_inv=spec.d_inv,
        d_spu=spec.d_spu,
        mu_inv=np.full(spec.d_inv, -EX3_GAMMA),
        sigma_inv=EX3_SIGMA,
        env_params=tuple(params),
        transform=spec.transform(),
        class_prior=0.5,
    )


def make_example3(spec: BenchmarkSpec, primed: bool | None = None) -> tuple[Dataset, Dataset]:
    if spec.name not in ("example3", "example3p"):
        raise DomainError(f"make_example3 called with benchmark {spec.name!r}")
    env_spec = example3_environment_spec(spec, primed)
    out = []
    for split in ("train", "test"):
        seed = derive_seed(spec.seed, split)
        parts = [sample_environment(env_spec, e, spec.n_per_env, seed) for e in range(spec.n_envs)]
        out.append(_with_groups(concat(parts)))
    return out[0], out[1]


def make_benchmark(spec: BenchmarkSpec) -> tuple[Dataset, Dataset]:
    if spec.name == "example2":
        return make_example2(spec)
    return make_example3(spec)


def benchmark_oracle(spec: BenchmarkSpec) -> LinearPredictor:
    """The invariant oracle for a benchmark, in observation space.

    Example-2 labels are the sign of ``1 . z_c``, so its oracle is that direction
    pulled back through ``R``. Example-3/3' use the Gaussian closed form.
    """
    if spec.name == "example2":
        latent_w = np.concatenate([np.ones(spec.d_inv), np.zeros(spec.d_spu)])
        return LinearPredictor(np.linalg.solve(spec.transform().T, latent_w), 0.0)
    return oracle_predictor(example3_environment_spec(spec))


# -- test protocol -----------------------------------------------------------


def shuffle_spurious_test(
    spec: BenchmarkSpec,
    test: Dataset,
    seed: int,
    permutation: Callable[[np.random.Generator, int], np.ndarray] | None = None,
) -> Dataset:
    """Permute the spurious latents across rows within each environment.

    Latents are taken from the dataset when stored, otherwise recovered as
    ``R^{-1} x``; the result is recomposed as ``x = R z``. Labels and invariant
    latents are untouched.
    """
    if test.transform is None:
        raise DomainError("test set carries no generator transform; cannot shuffle latents")
    R = test.transform
    d_inv = test.d_inv if test.d_inv is not None else spec.d_inv
    if test.latents is not None:
        z = np.array(test.latents, copy=True)
    else:
        z = np.linalg.solve(R, test.features.T).T
    perm_fn = permutation or (lambda rng, n: rng.permutation(n))
    for e in test.environments:
        rows = np.flatnonzero(test.env_ids == e)
        perm = perm_fn(derive_rng(seed, "shuffle", int(e)), rows.size)
        z[rows, d_inv:] = z[rows[perm], d_inv:]
    return test.replace(features=z @ R.T, latents=z)


def subsample_env_labels(data: Dataset, fraction: float, seed: int) -> Dataset:
    """Keep environment labels on a uniformly random ``ceil(fraction * n)`` rows."""
    if not 0.0 < fraction <= 1.0:
        raise DomainError(f"fraction must lie in (0, 1], got {fraction}")
    n = data.n
    k = math.ceil(fraction * n)
    mask = np.zeros(n, dtype=bool)
    mask[derive_rng(seed, "env-labels").choice(n, size=k, replace=False)] = True
    return data.replace(env_known=mask)


@dataclass
class GroupAccuracy:
    average: float
    per_group: dict[int, float]
    worst: float
    warnings: list[str] = field(default_factory=list)


def worst_group_accuracy(pred, data: Dataset, groups: Sequence[int] | None = None) -> GroupAccuracy:
    """Average accuracy, accuracy per group, and the minimum over groups.

    ``groups`` lists the groups expected; empty ones are reported and skipped.
    """
    if data.group_ids is None:
        raise DomainError("dataset has no group ids")
    correct = predict(pred, data.features) == data.labels
    expected = np.unique(data.group_ids) if groups is None else groups
    per_group, warnings = {}, []
    for g in expected:
        mask = data.group_ids == g
        if not mask.any():
            warnings.append(f"group {int(g)} has no rows; excluded")
            continue
        per_group[int(g)] = float(correct[mask].mean())
    worst = min(per_group.values()) if per_group else float("nan")
    avg = float(correct.mean()) if data.n else float("nan")
    return GroupAccuracy(avg, per_group, worst, warnings)


# -- sweeps ------------------------------------------------------------------


# Baselines follow the linear unit-test protocol: a fixed budget of full-batch
# Adam steps rather than a converged solve. 1000 steps at 1e-2 covers the same
# parameter distance as 10K steps at 1e-3 and gives the same test errors.
BASELINE_SOLVER = SolverConfig(max_iters=1000, step_rule="adam", step_size=1e-2)


@dataclass(frozen=True)
class SweepOptions:
    """Fitting choices shared by every cell of a sweep.

    ``solver`` fits the ISR heads (a convex problem, solved to ``grad_tol``);
    ``erm_solver`` and ``irm_solver`` train the baselines.
    """

    solver: SolverConfig = SolverConfig()
    erm_solver: SolverConfig = BASELINE_SOLVER
    irm_penalty: float = 100.0
    irm_solver: SolverConfig = BASELINE_SOLVER
    max_pairs: int = 45
    label: int | None = 1
    env_label_fraction: float = 1.0


@dataclass(frozen=True)
class SweepRecord:
    algorithm: str
    E: int
    seed: int
    env_errors: tuple[float, ...]
    mean_error: float
    wall_time: float
    failure: str = ""

    @property
    def ok(self) -> bool:
        return not self.failure


@dataclass
class SweepResult:
    records: list[SweepRecord]

    def sort(self) -> "SweepResult":
        self.records.sort(key=lambda r: (r.algorithm, r.E, r.seed))
        return self

    def select(self, algorithm: str, E: int | None = None) -> list[SweepRecord]:
        return [r for r in self.records if r.algorithm == algorithm and (E is None or r.E == E)]

    def mean_error(self, algorithm: str, E: int | None = None) -> float:
        errs = [r.mean_error for r in self.select(algorithm, E) if r.ok]
        return float(np.mean(errs)) if errs else float("nan")


def _isr_head(basis, train: Dataset, cfg: SolverConfig) -> LinearPredictor:
    proj = project_features(basis, train)
    low = fit_logistic(proj.data.features, proj.data.labels, cfg)
    return compose_predictor(basis, low)


def fit_algorithm(
    algorithm: str, spec: BenchmarkSpec, train: Dataset, opts: SweepOptions = SweepOptions()
) -> LinearPredictor:
    """Train one named algorithm on benchmark training data."""
    if algorithm == "oracle":
        return benchmark_oracle(spec)
    if algorithm == "erm":
        return fit_logistic(train.features, train.labels, opts.erm_solver)
    if algorithm == "irmv1":
        return irmv1_fit(train, opts.irm_penalty, opts.irm_solver)
    moments = train
    if opts.env_label_fraction < 1.0:
        moments = subsample_env_labels(train, opts.env_label_fraction, derive_seed(spec.seed, "mask"))
    if algorithm == "isr-mean":
        basis = isr_mean(moments, spec.d_inv, opts.label)
    elif algorithm == "isr-cov":
        basis = isr_cov(moments, spec.d_inv, opts.label)
    elif algorithm == "isr-cov-robust":
        basis = isr_cov_robust(moments, spec.d_inv, opts.label, opts.max_pairs)
    else:
        raise DomainError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")
    # step IV uses every training row, labelled environment or not
    return _isr_head(basis, train, opts.solver)


def run_cell(
    template: BenchmarkSpec, algorithms: Sequence[str], E: int, seed: int, opts: SweepOptions
) -> list[SweepRecord]:
    spec = dataclasses.replace(template, n_envs=E, seed=seed)
    train, test = make_benchmark(spec)
    test = shuffle_spurious_test(spec, test, derive_seed(seed, "shuffle"))
    records = []
    for algo in algorithms:
        t0 = time.perf_counter()
        try:
            pred = fit_algorithm(algo, spec, train, opts)
            report = evaluate_error(pred, test, envs=range(E))
            errors = tuple(report.per_env[e] for e in sorted(report.per_env))
            rec = SweepRecord(algo, E, seed, errors, report.mean, time.perf_counter() - t0)
        except (ValueError, np.linalg.LinAlgError) as err:
            reason = f"{type(err).__name__}: {err}"
            log.info("%s failed at E=%d seed=%d: %s", algo, E, seed, reason)
            rec = SweepRecord(algo, E, seed, (), float("nan"), time.perf_counter() - t0, reason)
        records.append(rec)
    return records


def _num_workers() -> int:
    raw = os.environ.get("ISR_NUM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise DomainError(f"ISR_NUM_THREADS must be an integer, got {raw!r}") from None


def run_sweep(
    benchmark: BenchmarkSpec,
    algorithms: Sequence[str],
    E_values: Sequence[int],
    seeds: Sequence[int],
    opts: SweepOptions = SweepOptions(),
    workers: int | None = None,
) -> SweepResult:
    """Fit and evaluate every algorithm for every ``(E, seed)`` cell.

    ``benchmark`` is a template whose ``n_envs`` and ``seed`` are overridden per
    cell. Test errors are measured on spurious-shuffled test environments.
    Algorithm failures become records with a ``failure`` reason.
    """
    unknown = [a for a in algorithms if a not in ALGORITHMS]
    if unknown:
        raise DomainError(f"unknown algorithms {unknown}; expected a subset of {ALGORITHMS}")
    if not algorithms or not E_values or not seeds:
        raise DomainError("algorithms, E_values and seeds must be non-empty")
    cells = [(E, s) for E in E_values for s in seeds]
    workers = workers or _num_workers()
    if workers == 1:
        chunks = [run_cell(benchmark, algorithms, E, s, opts) for E, s in cells]
    else:
        with ThreadPoolExecutor(workers) as pool:
            chunks = list(pool.map(lambda c: run_cell(benchmark, algorithms, c[0], c[1], opts), cells))
    return SweepResult([r for chunk in chunks for r in chunk]).sort()
