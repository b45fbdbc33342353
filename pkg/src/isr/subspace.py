"""Invariant-feature subspace recovery from class-conditional moments.

ISR-Mean runs PCA on the matrix of per-environment class-conditional means and keeps
the directions of least variance. ISR-Cov eigendecomposes the difference of two
environments' class-conditional covariances and keeps the directions whose
eigenvalues are smallest in magnitude. Both have ``*_from_*`` variants that take
moments directly, which is how exact (population) moments are fed in.
"""

from __future__ import annotations

import itertools
import logging
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg, stats

from isr.datamodel import Dataset
from isr.errors import DistinctnessError, DomainError, MomentError

log = logging.getLogger(__name__)

ZERO_RTOL = 1e-10
DISTINCT_RTOL = 1e-8
DISTINCT_ALPHA = 1e-6
ORTHO_ATOL = 1e-8


@dataclass(frozen=True, eq=False)
class SubspaceBasis:
    """Orthonormal rows spanning a subspace of feature space.

    ``eigenvalues`` is the full spectrum the rows were selected from, in the
    selection order (ascending value for ISR-Mean, ascending magnitude for ISR-Cov).
    """

    rows: np.ndarray
    eigenvalues: np.ndarray | None = None

    def __post_init__(self):
        rows = np.atleast_2d(np.asarray(self.rows, dtype=np.float64))
        if rows.shape[0] > rows.shape[1]:
            raise DomainError(f"basis has {rows.shape[0]} rows in dimension {rows.shape[1]}")
        if not np.allclose(rows @ rows.T, np.eye(rows.shape[0]), rtol=0.0, atol=ORTHO_ATOL):
            raise DomainError("basis rows are not orthonormal")
        object.__setattr__(self, "rows", rows)
        if self.eigenvalues is not None:
            object.__setattr__(self, "eigenvalues", np.asarray(self.eigenvalues, dtype=np.float64))

    @property
    def k(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def projector(self) -> np.ndarray:
        return self.rows.T @ self.rows

    def complement(self) -> "SubspaceBasis":
        """Orthonormal basis of the orthogonal complement."""
        _, _, vt = np.linalg.svd(self.rows, full_matrices=True)
        return SubspaceBasis(_sign_normalize(vt[self.k :].T).T)


@dataclass(frozen=True, eq=False)
class MeanMatrix:
    rows: np.ndarray  # E x d, one class-conditional mean per environment
    envs: np.ndarray  # environment id of each row


def _sign_normalize(vectors: np.ndarray) -> np.ndarray:
    """Flip columns so their first non-negligible component is positive."""
    v = np.array(vectors, dtype=np.float64)
    for j in range(v.shape[1]):
        col = v[:, j]
        tol = 1e-12 * np.abs(col).max(initial=0.0)
        nz = np.flatnonzero(np.abs(col) > tol)
        if nz.size and col[nz[0]] < 0:
            v[:, j] = -col
    return v


def eigendecompose_symmetric(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (ascending) and orthonormal eigenvectors (columns) of a symmetric matrix."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DomainError(f"expected a square matrix, got shape {m.shape}")
    scale = np.abs(m).max(initial=0.0)
    asym = np.abs(m - m.T).max(initial=0.0)
    if asym > 1e-8 * max(scale, 1.0):
        raise DomainError(f"matrix is not symmetric (max asymmetry {asym:.3g})")
    values, vectors = np.linalg.eigh((m + m.T) / 2)
    return values, _sign_normalize(vectors)


def eigengap_report(eigenvalues: np.ndarray) -> np.ndarray:
    """Ratios ``|lambda_{i+1}| / |lambda_i|`` of a selection-ordered spectrum.

    Diagnostic only; a large ratio after position ``k`` suggests ``k`` invariant
    directions. Zero denominators give ``inf``.
    """
    lam = np.abs(np.asarray(eigenvalues, dtype=np.float64))
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(lam[:-1] > 0, lam[1:] / lam[:-1], np.inf)


def _label_rows(data: Dataset, label: int) -> dict[int, np.ndarray]:
    if label not in (1, -1):
        raise DomainError(f"label must be +1 or -1, got {label}")
    known = data.known_mask
    out = {}
    for e in data.environments:
        mask = known & (data.env_ids == e) & (data.labels == label)
        out[int(e)] = data.features[mask]
    return out


def class_conditional_means(data: Dataset, label: int = 1) -> MeanMatrix:
    rows, envs = [], []
    for e, x in _label_rows(data, label).items():
        if x.shape[0] == 0:
            raise MomentError(
                f"environment {e} has no rows with label {label:+d} and a known environment label"
            )
        rows.append(x.mean(axis=0))
        envs.append(e)
    return MeanMatrix(np.array(rows).reshape(len(rows), data.dim), np.array(envs, dtype=np.int64))


def class_conditional_covariances(data: Dataset, label: int = 1) -> list[np.ndarray]:
    """Per-environment covariance (divided by ``n_e``), in ascending environment order."""
    return _covariances_with_counts(data, label)[0]


def _covariances_with_counts(data: Dataset, label: int):
    covs, counts, envs = [], [], []
    for e, x in _label_rows(data, label).items():
        n = x.shape[0]
        if n < 2:
            raise MomentError(
                f"environment {e} has {n} row(s) with label {label:+d} and a known "
                "environment label; a covariance needs at least 2"
            )
        xc = x - x.mean(axis=0)
        c = xc.T @ xc / n
        covs.append((c + c.T) / 2)
        counts.append(n)
        envs.append(e)
    return covs, counts, envs


def _select(values: np.ndarray, vectors: np.ndarray, k: int, by_abs: bool, largest=False):
    key = np.abs(values) if by_abs else values
    order = np.argsort(key, kind="stable")
    values, vectors = values[order], vectors[:, order]
    chosen = vectors[:, -k:][:, ::-1] if largest else vectors[:, :k]
    return SubspaceBasis(chosen.T, values)


def _check_k(k: int, d: int, what: str):
    if not 1 <= k <= d:
        raise DomainError(f"{what} must lie in [1, {d}], got {k}")


def mean_scatter(means: np.ndarray) -> np.ndarray:
    """``(1/E) M~^T M~`` for the column-centred mean matrix ``M~``."""
    m = np.asarray(means, dtype=np.float64)
    centered = m - m.mean(axis=0)
    s = centered.T @ centered / m.shape[0]
    return (s + s.T) / 2


def isr_mean_from_means(
    means: np.ndarray | Sequence[np.ndarray], d_inv: int, largest: bool = False
) -> SubspaceBasis:
    """ISR-Mean on an explicit ``E x d`` matrix of class-conditional means.

    ``means`` may also be a list of such matrices (one per class); their scatter
    matrices are averaged. With ``largest`` the top-``d_inv`` directions (the
    spurious subspace) are returned instead.
    """
    mats = [np.atleast_2d(m) for m in (means if isinstance(means, (list, tuple)) else [means])]
    E, d = mats[0].shape
    if E < 2:
        raise DomainError(f"ISR-Mean needs at least 2 environments, got {E}")
    _check_k(d_inv, d, "subspace dimension")
    scatter = sum(mean_scatter(m) for m in mats) / len(mats)
    values, vectors = eigendecompose_symmetric(scatter)
    return _select(values, vectors, d_inv, by_abs=False, largest=largest)


def _labels_for(label: int | None) -> tuple[int, ...]:
    return (1, -1) if label is None else (label,)


def isr_mean(data: Dataset, d_inv: int, label: int | None = 1) -> SubspaceBasis:
    """Recover a ``d_inv``-dimensional invariant subspace with ISR-Mean.

    ``label=None`` averages the mean-scatter matrices of both classes.
    """
    _check_k(d_inv, data.dim, "d_inv")
    mats = [class_conditional_means(data, y).rows for y in _labels_for(label)]
    return isr_mean_from_means(mats, d_inv)


def isr_mean_spurious(data: Dataset, d_spu: int, label: int | None = 1) -> SubspaceBasis:
    """The ``d_spu`` directions of largest mean variation across environments."""
    _check_k(d_spu, data.dim, "d_spu")
    mats = [class_conditional_means(data, y).rows for y in _labels_for(label)]
    return isr_mean_from_means(mats, d_spu, largest=True)


def box_m_pvalue(cov1: np.ndarray, n1: int, cov2: np.ndarray, n2: int) -> float:
    """p-value of Box's M test that two Gaussian populations share a covariance.

    ``cov1``/``cov2`` are the ``1/n``-normalised sample covariances. Returns ``nan``
    when a covariance is singular and the test is undefined.
    """
    d = cov1.shape[0]
    if n1 <= d or n2 <= d:
        return float("nan")
    s1 = cov1 * n1 / (n1 - 1)
    s2 = cov2 * n2 / (n2 - 1)
    pooled = ((n1 - 1) * s1 + (n2 - 1) * s2) / (n1 + n2 - 2)
    logdets = []
    for s in (s1, s2, pooled):
        sign, ld = np.linalg.slogdet(s)
        if sign <= 0:
            return float("nan")
        logdets.append(ld)
    m_stat = (n1 + n2 - 2) * logdets[2] - (n1 - 1) * logdets[0] - (n2 - 1) * logdets[1]
    c = (2 * d * d + 3 * d - 1) / (6.0 * (d + 1)) * (
        1.0 / (n1 - 1) + 1.0 / (n2 - 1) - 1.0 / (n1 + n2 - 2)
    )
    dof = d * (d + 1) / 2
    return float(stats.chi2.sf(max(m_stat * (1 - c), 0.0), dof))


@dataclass(frozen=True)
class PairScore:
    i: int  # positions in the covariance list
    j: int
    norm: float
    pvalue: float


def rank_pairs(
    covs: Sequence[np.ndarray],
    counts: Sequence[int] | None = None,
    alpha: float = DISTINCT_ALPHA,
) -> tuple[list[PairScore], list[PairScore]]:
    """Score all environment pairs by ``||Sigma_i - Sigma_j||_F``, descending.

    Returns ``(all_pairs, distinct_pairs)``. A pair is distinct when its norm exceeds
    ``1e-8 * max_e ||Sigma_e||_F`` and, if sample counts are given, Box's M rejects
    equal covariances at level ``alpha`` (Bonferroni-corrected over all pairs).
    """
    if len(covs) < 2:
        raise DomainError(f"ISR-Cov needs at least 2 environments, got {len(covs)}")
    scale = max(np.linalg.norm(c, "fro") for c in covs)
    pairs = list(itertools.combinations(range(len(covs)), 2))
    scored = []
    for i, j in pairs:
        norm = float(np.linalg.norm(covs[i] - covs[j], "fro"))
        p = float("nan") if counts is None else box_m_pvalue(covs[i], counts[i], covs[j], counts[j])
        scored.append(PairScore(i, j, norm, p))
    # stable sort keeps combinations() order among ties
    scored.sort(key=lambda s: -s.norm)
    level = alpha / len(pairs)

    def distinct(s: PairScore) -> bool:
        if not s.norm > DISTINCT_RTOL * scale:
            return False
        return np.isnan(s.pvalue) or s.pvalue < level

    return scored, [s for s in scored if distinct(s)]


def _distinctness_error(scored: list[PairScore], envs) -> DistinctnessError:
    best = scored[0]
    detail = f"largest ||dSigma||_F = {best.norm:.3g} (environments {envs[best.i]}, {envs[best.j]}"
    if not np.isnan(best.pvalue):
        detail += f", Box's M p = {best.pvalue:.3g}"
    detail += ")"
    return DistinctnessError(
        "no pair of training environments has distinct class-conditional covariances; "
        f"ISR-Cov requires two environments with different spurious variances ({detail})"
    )


def _cov_difference_basis(delta: np.ndarray, k: int, largest: bool) -> SubspaceBasis:
    values, vectors = eigendecompose_symmetric(delta)
    return _select(values, vectors, k, by_abs=True, largest=largest)


def isr_cov_from_covariances(
    covs: Sequence[np.ndarray],
    d_inv: int,
    pair: tuple[int, int] | None = None,
    counts: Sequence[int] | None = None,
    largest: bool = False,
    alpha: float = DISTINCT_ALPHA,
) -> SubspaceBasis:
    """ISR-Cov on explicit covariances. ``pair`` indexes into ``covs``."""
    d = covs[0].shape[0]
    _check_k(d_inv, d, "subspace dimension")
    scored, distinct = rank_pairs(covs, counts, alpha)
    envs = list(range(len(covs)))
    if pair is None:
        if not distinct:
            raise _distinctness_error(scored, envs)
        chosen = distinct[0]
    else:
        i, j = pair
        if i == j or not (0 <= i < len(covs) and 0 <= j < len(covs)):
            raise DomainError(f"invalid environment pair {pair}")
        key = (min(i, j), max(i, j))
        hit = [s for s in distinct if (s.i, s.j) == key]
        if not hit:
            raise _distinctness_error([s for s in scored if (s.i, s.j) == key], envs)
        chosen = PairScore(i, j, hit[0].norm, hit[0].pvalue)
    return _cov_difference_basis(covs[chosen.i] - covs[chosen.j], d_inv, largest)


def _pooled_covs(data: Dataset, label: int | None):
    per_label = [_covariances_with_counts(data, y) for y in _labels_for(label)]
    envs = per_label[0][2]
    if len(per_label) == 1:
        return per_label[0]
    # pooled mode: average the per-class covariances, counts add
    covs = [sum(p[0][k] for p in per_label) / len(per_label) for k in range(len(envs))]
    counts = [sum(p[1][k] for p in per_label) for k in range(len(envs))]
    return covs, counts, envs


def _env_positions(envs: list[int], pair: tuple[int, int] | None):
    if pair is None:
        return None
    try:
        return envs.index(pair[0]), envs.index(pair[1])
    except ValueError:
        raise DomainError(f"pair {pair} references environments not in the data {envs}") from None


def isr_cov(
    data: Dataset,
    d_inv: int,
    label: int | None = 1,
    pair: tuple[int, int] | None = None,
    alpha: float = DISTINCT_ALPHA,
) -> SubspaceBasis:
    """Recover a ``d_inv``-dimensional invariant subspace with ISR-Cov.

    ``pair`` names two environment ids; by default the pair with the largest
    covariance difference is used. Raises :class:`DistinctnessError` when no pair
    of environments has distinguishable covariances.
    """
    _check_k(d_inv, data.dim, "d_inv")
    covs, counts, envs = _pooled_covs(data, label)
    if len(envs) < 2:
        raise DomainError(f"ISR-Cov needs at least 2 environments, got {len(envs)}")
    try:
        return isr_cov_from_covariances(
            covs, d_inv, _env_positions(envs, pair), counts, alpha=alpha
        )
    except DistinctnessError as err:
        raise DistinctnessError(_rename_envs(str(err), envs)) from None


def isr_cov_spurious(
    data: Dataset,
    d_spu: int,
    label: int | None = 1,
    pair: tuple[int, int] | None = None,
    alpha: float = DISTINCT_ALPHA,
) -> SubspaceBasis:
    """The ``d_spu`` eigen-directions of ``dSigma`` with the largest magnitude."""
    _check_k(d_spu, data.dim, "d_spu")
    covs, counts, envs = _pooled_covs(data, label)
    return isr_cov_from_covariances(
        covs, d_spu, _env_positions(envs, pair), counts, largest=True, alpha=alpha
    )


def _rename_envs(message: str, envs: list[int]) -> str:
    # error text is built with list positions; the dataset's ids are what users know
    if envs == list(range(len(envs))):
        return message

    def sub(m):
        a, b = int(m.group(1)), int(m.group(2))
        return f"environments {envs[a]}, {envs[b]}"

    return re.sub(r"environments (\d+), (\d+)", sub, message)


def isr_cov_robust_from_covariances(
    covs: Sequence[np.ndarray],
    d_inv: int,
    max_pairs: int,
    counts: Sequence[int] | None = None,
    alpha: float = DISTINCT_ALPHA,
) -> SubspaceBasis:
    if max_pairs < 1:
        raise DomainError(f"max_pairs must be >= 1, got {max_pairs}")
    d = covs[0].shape[0]
    _check_k(d_inv, d, "subspace dimension")
    scored, distinct = rank_pairs(covs, counts, alpha)
    if not distinct:
        raise _distinctness_error(scored, list(range(len(covs))))
    kept = distinct[:max_pairs]
    bases = [_cov_difference_basis(covs[s.i] - covs[s.j], d_inv, False) for s in kept]
    if len(bases) == 1:
        return bases[0]
    return flag_mean(bases, d_inv)


def isr_cov_robust(
    data: Dataset,
    d_inv: int,
    label: int | None = 1,
    max_pairs: int = 45,
    alpha: float = DISTINCT_ALPHA,
) -> SubspaceBasis:
    """ISR-Cov over up to ``max_pairs`` distinct environment pairs, averaged by flag mean.

    Pairs are taken in descending order of ``||dSigma||_F`` and weighted equally.
    """
    _check_k(d_inv, data.dim, "d_inv")
    covs, counts, envs = _pooled_covs(data, label)
    if len(envs) < 2:
        raise DomainError(f"ISR-Cov needs at least 2 environments, got {len(envs)}")
    try:
        return isr_cov_robust_from_covariances(covs, d_inv, max_pairs, counts, alpha)
    except DistinctnessError as err:
        raise DistinctnessError(_rename_envs(str(err), envs)) from None


def flag_mean(bases: Sequence[SubspaceBasis], k: int) -> SubspaceBasis:
    """Subspace average: top-``k`` left singular vectors of the stacked basis vectors.

    The returned ``eigenvalues`` are the squared singular values, descending.
    """
    if not bases:
        raise DomainError("flag_mean needs at least one basis")
    d = bases[0].dim
    if any(b.dim != d for b in bases):
        raise DomainError("all bases must share the ambient dimension")
    _check_k(k, d, "k")
    stacked = np.hstack([b.rows.T for b in bases])
    u, s, _ = np.linalg.svd(stacked, full_matrices=False)
    if k > u.shape[1]:
        raise DomainError(f"k={k} exceeds the {u.shape[1]} stacked directions")
    return SubspaceBasis(_sign_normalize(u[:, :k]).T, s**2)


def principal_angles(a: SubspaceBasis, b: SubspaceBasis) -> np.ndarray:
    """Principal angles (radians, ascending) between two subspaces.

    Small angles come from sines rather than ``arccos`` of cosines, which cannot
    resolve angles much below 1e-8.
    """
    if a.dim != b.dim:
        raise DomainError(f"ambient dimensions differ: {a.dim} vs {b.dim}")
    return np.sort(linalg.subspace_angles(a.rows.T, b.rows.T))


def count_zero_eigenvalues(eigenvalues: np.ndarray, rtol: float = ZERO_RTOL) -> int:
    lam = np.abs(np.asarray(eigenvalues))
    return int(np.sum(lam < rtol * lam.max(initial=0.0)))
