"""Linear Gaussian environment model: sampling, exact moments, and the invariant oracle.

Each environment ``e`` draws a label ``y`` in {+1, -1} with probability ``class_prior``
of being +1, invariant latents ``z_c ~ N(y mu_inv, sigma_inv^2 I)``, spurious latents
``z_e ~ N(y mu_e, sigma_e^2 I)`` and observes ``x = R z = A z_c + B z_e``.
"""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from isr.errors import DomainError

RANK_RTOL = 1e-10


def derive_rng(seed: int, *keys: int | str) -> np.random.Generator:
    """Independent counter-based stream for ``(seed, *keys)``.

    String keys are hashed with CRC32 so call sites can tag streams by purpose.
    """
    if seed < 0:
        raise DomainError(f"seed must be non-negative, got {seed}")
    entropy = [int(seed)]
    for k in keys:
        entropy.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *keys: int | str) -> int:
    """A 32-bit integer seed derived from ``(seed, *keys)``."""
    return int(derive_rng(seed, *keys).integers(0, 2**32 - 1))


def _readonly(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class EnvParams:
    mu_spu: np.ndarray
    sigma_spu: float

    def __post_init__(self):
        object.__setattr__(self, "mu_spu", _readonly(np.atleast_1d(self.mu_spu)))
        object.__setattr__(self, "sigma_spu", float(self.sigma_spu))


@dataclass(frozen=True, eq=False)
class EnvironmentSpec:
    """Generative parameters shared by all training environments.

    ``transform`` is ``R = [A, B]``; its first ``d_inv`` columns map the invariant
    latents. Construction rejects rank-deficient ``R``, non-positive standard
    deviations and a class prior outside (0, 1).
    """

    d_inv: int
    d_spu: int
    mu_inv: np.ndarray
    sigma_inv: float
    env_params: tuple[EnvParams, ...]
    transform: np.ndarray
    class_prior: float = 0.5

    def __post_init__(self):
        self._normalize()
        self._validate(allow_degenerate=False)

    @classmethod
    def _unchecked(cls, **kwargs) -> "EnvironmentSpec":
        # Zero-noise specs for unit tests only; skips the sigma > 0 check.
        obj = cls.__new__(cls)
        for f in dataclasses.fields(cls):
            object.__setattr__(obj, f.name, kwargs.get(f.name, f.default))
        obj._normalize()
        obj._validate(allow_degenerate=True)
        return obj

    def _normalize(self):
        params = tuple(
            p if isinstance(p, EnvParams) else EnvParams(*p) for p in self.env_params
        )
        object.__setattr__(self, "env_params", params)
        object.__setattr__(self, "mu_inv", _readonly(np.atleast_1d(self.mu_inv)))
        object.__setattr__(self, "transform", _readonly(np.atleast_2d(self.transform)))
        object.__setattr__(self, "sigma_inv", float(self.sigma_inv))
        object.__setattr__(self, "class_prior", float(self.class_prior))
        object.__setattr__(self, "d_inv", int(self.d_inv))
        object.__setattr__(self, "d_spu", int(self.d_spu))

    def _validate(self, allow_degenerate: bool):
        if self.d_inv < 1 or self.d_spu < 1:
            raise DomainError("d_inv and d_spu must be positive")
        d = self.d
        if self.mu_inv.shape != (self.d_inv,):
            raise DomainError(f"mu_inv must have length {self.d_inv}")
        if not self.env_params:
            raise DomainError("env_params must contain at least one environment")
        for e, p in enumerate(self.env_params):
            if p.mu_spu.shape != (self.d_spu,):
                raise DomainError(f"environment {e}: mu_spu must have length {self.d_spu}")
        sigmas = [self.sigma_inv] + [p.sigma_spu for p in self.env_params]
        bad = [s for s in sigmas if not (s >= 0 if allow_degenerate else s > 0)]
        if bad or not all(np.isfinite(sigmas)):
            raise DomainError(f"standard deviations must be positive, got {sigmas}")
        if not 0.0 < self.class_prior < 1.0:
            raise DomainError(f"class_prior must lie in (0, 1), got {self.class_prior}")
        if self.transform.shape != (d, d):
            raise DomainError(f"transform must be {d}x{d}, got {self.transform.shape}")
        if not np.all(np.isfinite(self.transform)):
            raise DomainError("transform has non-finite entries")
        sv = np.linalg.svd(self.transform, compute_uv=False)
        if sv[-1] <= RANK_RTOL * sv[0]:
            raise DomainError(
                f"transform is not full rank (singular values {sv[0]:.3g} .. {sv[-1]:.3g})"
            )

    @property
    def d(self) -> int:
        return self.d_inv + self.d_spu

    @property
    def n_envs(self) -> int:
        return len(self.env_params)

    @property
    def A(self) -> np.ndarray:
        return self.transform[:, : self.d_inv]

    @property
    def B(self) -> np.ndarray:
        return self.transform[:, self.d_inv :]

    def check_env(self, env_index: int) -> EnvParams:
        if not 0 <= env_index < self.n_envs:
            raise DomainError(f"env_index {env_index} outside [0, {self.n_envs})")
        return self.env_params[env_index]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observations with labels and environment ids.

    ``latents`` / ``transform`` / ``d_inv`` are generator metadata, present only on
    synthetic data; the spurious-shuffle test protocol needs them. ``env_known``
    marks rows whose environment label may be used for moment estimation.
    """

    features: np.ndarray
    labels: np.ndarray
    env_ids: np.ndarray
    group_ids: np.ndarray | None = None
    env_known: np.ndarray | None = None
    latents: np.ndarray | None = None
    transform: np.ndarray | None = None
    d_inv: int | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2:
            raise DomainError(f"features must be 2-D, got shape {x.shape}")
        n = x.shape[0]
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        env = np.asarray(self.env_ids, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "env_ids", env)
        if self.group_ids is not None:
            object.__setattr__(
                self, "group_ids", np.asarray(self.group_ids, dtype=np.int64).reshape(-1)
            )
        if self.env_known is not None:
            object.__setattr__(
                self, "env_known", np.asarray(self.env_known, dtype=bool).reshape(-1)
            )
        for name in ("labels", "env_ids", "group_ids", "env_known"):
            v = getattr(self, name)
            if v is not None and v.shape[0] != n:
                raise DomainError(f"{name} has length {v.shape[0]}, expected {n}")
        if n and env.min() < 0:
            raise DomainError("environment ids must be non-negative")
        if self.latents is not None and np.shape(self.latents) != x.shape:
            raise DomainError("latents must match the feature matrix shape")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def environments(self) -> np.ndarray:
        return np.unique(self.env_ids)

    @property
    def known_mask(self) -> np.ndarray:
        if self.env_known is None:
            return np.ones(self.n, dtype=bool)
        return self.env_known

    def replace(self, **changes) -> "Dataset":
        return dataclasses.replace(self, **changes)

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)

        def take(v):
            return None if v is None else v[mask]

        return dataclasses.replace(
            self,
            features=self.features[mask],
            labels=self.labels[mask],
            env_ids=self.env_ids[mask],
            group_ids=take(self.group_ids),
            env_known=take(self.env_known),
            latents=take(self.latents),
        )


def concat(parts: Sequence[Dataset]) -> Dataset:
    """Stack datasets row-wise. Generator metadata is kept only if all parts share it."""
    if not parts:
        raise DomainError("nothing to concatenate")
    first = parts[0]

    def cat(name):
        vals = [getattr(p, name) for p in parts]
        if any(v is None for v in vals):
            return None
        return np.concatenate(vals)

    same_transform = all(
        p.transform is not None
        and first.transform is not None
        and np.array_equal(p.transform, first.transform)
        for p in parts
    )
    return Dataset(
        features=np.concatenate([p.features for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
        env_ids=np.concatenate([p.env_ids for p in parts]),
        group_ids=cat("group_ids"),
        env_known=cat("env_known"),
        latents=cat("latents") if same_transform else None,
        transform=first.transform if same_transform else None,
        d_inv=first.d_inv if same_transform else None,
    )


@dataclass(frozen=True, eq=False)
class LinearPredictor:
    weights: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        w = _readonly(np.atleast_1d(self.weights))
        if w.ndim != 1:
            raise DomainError("weights must be a vector")
        if not (np.all(np.isfinite(w)) and np.isfinite(self.bias)):
            raise DomainError("predictor weights and bias must be finite")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))

    def scores(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features, dtype=np.float64) @ self.weights + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        # ties go to the positive class
        return np.where(self.scores(features) >= 0.0, 1, -1)


def sample_environment(spec: EnvironmentSpec, env_index: int, n: int, seed: int) -> Dataset:
    params = spec.check_env(env_index)
    if n < 0:
        raise DomainError(f"n must be non-negative, got {n}")
    rng = derive_rng(seed, env_index)
    y = np.where(rng.random(n) < spec.class_prior, 1, -1)
    z_c = y[:, None] * spec.mu_inv + spec.sigma_inv * rng.standard_normal((n, spec.d_inv))
    z_e = y[:, None] * params.mu_spu + params.sigma_spu * rng.standard_normal((n, spec.d_spu))
    z = np.hstack([z_c, z_e])
    return Dataset(
        features=z @ spec.transform.T,
        labels=y,
        env_ids=np.full(n, env_index, dtype=np.int64),
        latents=z,
        transform=spec.transform,
        d_inv=spec.d_inv,
    )


def population_moments(
    spec: EnvironmentSpec, env_index: int, label: int
) -> tuple[np.ndarray, np.ndarray]:
    """Exact class-conditional mean and covariance of ``x`` in one environment."""
    params = spec.check_env(env_index)
    if label not in (1, -1):
        raise DomainError(f"label must be +1 or -1, got {label}")
    A, B = spec.A, spec.B
    mean = label * (A @ spec.mu_inv + B @ params.mu_spu)
    cov = spec.sigma_inv**2 * (A @ A.T) + params.sigma_spu**2 * (B @ B.T)
    return mean, (cov + cov.T) / 2


def oracle_predictor(spec: EnvironmentSpec) -> LinearPredictor:
    """The optimal invariant predictor, expressed in observation space.

    In latent space it scores ``2 mu_inv . z_c / sigma_inv^2 + log(eta / (1 - eta))``.
    """
    latent_w = np.zeros(spec.d)
    latent_w[: spec.d_inv] = 2.0 * spec.mu_inv / spec.sigma_inv**2
    # w.x = latent_w . z  with x = R z  =>  w = R^{-T} latent_w
    w = np.linalg.solve(spec.transform.T, latent_w)
    eta = spec.class_prior
    return LinearPredictor(w, np.log(eta / (1.0 - eta)))


def random_orthonormal_transform(d: int, seed: int) -> np.ndarray:
    """Orthogonal factor of a QR decomposition of a standard Gaussian ``d x d`` draw.

    Columns are sign-flipped so the triangular factor has a positive diagonal.
    """
    if d < 1:
        raise DomainError(f"dimension must be >= 1, got {d}")
    g = derive_rng(seed, "orthonormal").standard_normal((d, d))
    q, r = np.linalg.qr(g)
    signs = np.where(np.diag(r) < 0, -1.0, 1.0)
    return q * signs
