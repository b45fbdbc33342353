"""Linear classifiers: logistic ERM, IRMv1, and subspace projection/composition."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import expit

from isr.datamodel import Dataset, LinearPredictor
from isr.errors import DomainError, SolverError
from isr.subspace import SubspaceBasis

log = logging.getLogger(__name__)

STEP_RULES = ("fixed", "backtracking", "newton", "adam")


@dataclass(frozen=True)
class SolverConfig:
    """Full-batch solver settings.

    ``step_rule`` is ``"newton"`` (damped Newton with Armijo backtracking),
    ``"backtracking"`` (gradient descent with Armijo backtracking), ``"fixed"``
    (gradient descent with step ``step_size``) or ``"adam"`` (full-batch Adam with
    learning rate ``step_size``; the protocol the linear unit-test baselines use).
    """

    max_iters: int = 50_000
    grad_tol: float = 1e-8
    l2_penalty: float = 0.0
    step_rule: str = "newton"
    step_size: float = 1.0

    def __post_init__(self):
        if self.max_iters < 1:
            raise DomainError("max_iters must be >= 1")
        if not self.grad_tol > 0:
            raise DomainError("grad_tol must be positive")
        if self.l2_penalty < 0:
            raise DomainError("l2_penalty must be non-negative")
        if self.step_rule not in STEP_RULES:
            raise DomainError(f"step_rule must be one of {STEP_RULES}, got {self.step_rule!r}")
        if not self.step_size > 0:
            raise DomainError("step_size must be positive")


@dataclass(frozen=True)
class FitInfo:
    iterations: int
    grad_norm: float
    loss: float
    converged: bool


def _augment(x: np.ndarray) -> np.ndarray:
    return np.hstack([x, np.ones((x.shape[0], 1))])


def _check_inputs(features, labels):
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if x.ndim != 2:
        raise SolverError(f"features must be 2-D, got shape {x.shape}")
    if x.shape[0] == 0:
        raise SolverError("cannot fit a classifier on zero rows")
    if x.shape[0] != y.shape[0]:
        raise SolverError("features and labels differ in length")
    if not np.all(np.isfinite(x)):
        raise SolverError("features contain NaN or Inf")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise SolverError("labels must be +1 or -1")
    return x, y


def logistic_objective(theta, xa, y, l2=0.0, sample_weight=None):
    """Mean logistic loss plus ``(l2/2) ||w||^2`` and its gradient.

    ``theta`` is ``[w, b]`` and ``xa`` the features with a trailing column of ones;
    the bias is not penalised.
    """
    m = y * (xa @ theta)
    sw = np.full(len(y), 1.0 / len(y)) if sample_weight is None else sample_weight
    loss = float(sw @ np.logaddexp(0.0, -m))
    r = -expit(-m) * y * sw
    grad = xa.T @ r
    if l2:
        w = theta[:-1]
        loss += 0.5 * l2 * float(w @ w)
        grad[:-1] += l2 * w
    return loss, grad


def _logistic_hessian(theta, xa, y, l2, sw):
    s = xa @ theta
    # expit(s) * expit(-s) is p(1-p) without cancellation, and exactly even in s
    h = (xa * (sw * expit(s) * expit(-s))[:, None]).T @ xa
    if l2:
        h[:-1, :-1] += l2 * np.eye(len(theta) - 1)
    return h


def _armijo(f, theta, loss, grad, direction, t0=1.0, shrink=0.5, c=1e-4, max_halvings=60):
    slope = float(grad @ direction)
    t = t0
    for _ in range(max_halvings):
        cand = theta + t * direction
        new_loss, new_grad = f(cand)
        if np.isfinite(new_loss) and new_loss <= loss + c * t * slope:
            return cand, new_loss, new_grad, t
        t *= shrink
    return None


def _adam(f, theta, cfg: SolverConfig, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    loss, grad = f(theta)
    for it in range(1, cfg.max_iters + 1):
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= cfg.grad_tol:
            return theta, FitInfo(it - 1, gnorm, loss, True)
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        m_hat = m / (1 - b1**it)
        v_hat = v / (1 - b2**it)
        theta = theta - cfg.step_size * m_hat / (np.sqrt(v_hat) + eps)
        loss, grad = f(theta)
    gnorm = float(np.linalg.norm(grad))
    return theta, FitInfo(cfg.max_iters, gnorm, loss, gnorm <= cfg.grad_tol)


def _minimize(f, theta, cfg: SolverConfig, hessian=None):
    if cfg.step_rule == "adam":
        return _adam(f, theta, cfg)
    loss, grad = f(theta)
    step = cfg.step_size
    for it in range(cfg.max_iters):
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= cfg.grad_tol:
            return theta, FitInfo(it, gnorm, loss, True)
        if cfg.step_rule == "fixed":
            theta = theta - cfg.step_size * grad
            loss, grad = f(theta)
            if not np.isfinite(loss):
                raise SolverError("fixed-step gradient descent diverged; reduce step_size")
            continue
        if cfg.step_rule == "newton" and hessian is not None:
            h = hessian(theta)
            try:
                direction = -np.linalg.solve(h, grad)
            except np.linalg.LinAlgError:
                direction = -np.linalg.lstsq(h, grad, rcond=None)[0]
            if not (np.all(np.isfinite(direction)) and grad @ direction < 0):
                direction = -grad
            res = _armijo(f, theta, loss, grad, direction)
        else:
            # warm-start the step length from the last accepted one
            res = _armijo(f, theta, loss, grad, -grad, t0=min(step * 2.0, 1e6))
        if res is None:
            # no decrease representable in floating point: as stationary as we can get
            return theta, FitInfo(it, gnorm, loss, False)
        theta, loss, grad, step = res
    gnorm = float(np.linalg.norm(grad))
    return theta, FitInfo(cfg.max_iters, gnorm, loss, gnorm <= cfg.grad_tol)


def fit_logistic(
    features,
    labels,
    cfg: SolverConfig = SolverConfig(),
    sample_weight=None,
    init=None,
    return_info: bool = False,
):
    """Minimise mean logistic loss + ``(l2/2)||w||^2`` over ``(w, b)``.

    Labels are +1/-1. With no penalty both classes must be present, otherwise the
    optimum is unbounded. ``sample_weight`` (non-negative) turns the mean into a
    weighted mean.
    """
    x, y = _check_inputs(features, labels)
    if cfg.l2_penalty == 0 and np.unique(y).size < 2:
        raise SolverError("only one class present and l2_penalty is 0: optimum is unbounded")
    sw = None
    if sample_weight is not None:
        sw = np.asarray(sample_weight, dtype=np.float64).reshape(-1)
        if sw.shape[0] != y.shape[0] or np.any(sw < 0) or sw.sum() <= 0:
            raise SolverError("sample_weight must be non-negative with positive sum")
        sw = sw / sw.sum()
    xa = _augment(x)
    theta0 = np.zeros(xa.shape[1]) if init is None else np.array(init, dtype=np.float64)
    weights = np.full(len(y), 1.0 / len(y)) if sw is None else sw

    def f(theta):
        return logistic_objective(theta, xa, y, cfg.l2_penalty, weights)

    def hess(theta):
        return _logistic_hessian(theta, xa, y, cfg.l2_penalty, weights)

    theta, info = _minimize(f, theta0, cfg, hess)
    if not info.converged:
        log.debug("logistic fit stopped before grad_tol: %s", info)
    pred = LinearPredictor(theta[:-1], theta[-1])
    return (pred, info) if return_info else pred


@dataclass(frozen=True)
class OneVsRest:
    """Multiclass head built from one binary logistic fit per class."""

    classes: tuple[int, ...]
    heads: tuple[LinearPredictor, ...]

    def scores(self, features) -> np.ndarray:
        return np.column_stack([h.scores(features) for h in self.heads])

    def predict(self, features) -> np.ndarray:
        return np.asarray(self.classes)[np.argmax(self.scores(features), axis=1)]


def fit_one_vs_rest(features, labels, cfg: SolverConfig = SolverConfig()) -> OneVsRest:
    labels = np.asarray(labels)
    classes = tuple(int(c) for c in np.unique(labels))
    heads = tuple(fit_logistic(features, np.where(labels == c, 1, -1), cfg) for c in classes)
    return OneVsRest(classes, heads)


def predict(pred, features) -> np.ndarray:
    return pred.predict(features)


@dataclass(frozen=True, eq=False)
class ProjectedDataset:
    data: Dataset
    basis: SubspaceBasis


def project_features(basis: SubspaceBasis, data: Dataset) -> ProjectedDataset:
    if basis.dim != data.dim:
        raise DomainError(f"basis dimension {basis.dim} != feature dimension {data.dim}")
    projected = data.replace(
        features=data.features @ basis.rows.T, latents=None, transform=None, d_inv=None
    )
    return ProjectedDataset(projected, basis)


def compose_predictor(basis: SubspaceBasis, low_dim: LinearPredictor) -> LinearPredictor:
    """Full-space predictor ``x -> w.(P x) + b``."""
    if low_dim.weights.shape[0] != basis.k:
        raise DomainError(f"predictor has {low_dim.weights.shape[0]} weights, basis has {basis.k} rows")
    return LinearPredictor(basis.rows.T @ low_dim.weights, low_dim.bias)


def shrink_spurious(features, spurious_basis: SubspaceBasis, factor: float) -> np.ndarray:
    """Scale the component of each row lying in ``spurious_basis`` by ``factor``."""
    if not 0.0 <= factor <= 1.0:
        raise DomainError(f"shrink factor must lie in [0, 1], got {factor}")
    x = np.asarray(features, dtype=np.float64)
    if x.shape[1] != spurious_basis.dim:
        raise DomainError("spurious basis dimension does not match the features")
    p = spurious_basis.rows
    x_spu = (x @ p.T) @ p
    return x - (1.0 - factor) * x_spu


def _irmv1_objective(theta, parts, penalty):
    """Mean over environments of ``R_e + penalty * g_e^2``.

    ``g_e`` is the derivative of ``R_e`` with respect to a scalar multiplier of the
    logits, evaluated at 1.
    """
    total, grad = 0.0, np.zeros_like(theta)
    for xa, y in parts:
        n = len(y)
        m = y * (xa @ theta)
        s_neg = expit(-m)
        risk = float(np.mean(np.logaddexp(0.0, -m)))
        g_risk = xa.T @ (-s_neg * y) / n
        g_e = -float(np.mean(s_neg * m))
        # d/dm [s(-m) m] = s(-m) - m s(-m) s(m)
        dg = -(xa.T @ ((s_neg - m * s_neg * expit(m)) * y)) / n
        total += risk + penalty * g_e**2
        grad += g_risk + 2.0 * penalty * g_e * dg
    k = len(parts)
    return total / k, grad / k


def irmv1_penalty_terms(pred: LinearPredictor, data: Dataset) -> dict[int, float]:
    """Squared dummy-classifier gradient ``g_e^2`` per environment."""
    theta = np.append(pred.weights, pred.bias)
    out = {}
    for e in data.environments:
        mask = data.env_ids == e
        m = data.labels[mask] * (_augment(data.features[mask]) @ theta)
        out[int(e)] = float(np.mean(expit(-m) * m)) ** 2
    return out


def irmv1_fit(
    data: Dataset, penalty: float, cfg: SolverConfig = SolverConfig(), init=None
) -> LinearPredictor:
    """IRMv1 with a linear featurizer and the scalar dummy classifier fixed at 1.

    The objective is non-convex; the result is a stationary point, not a certified
    global minimum. ``step_rule="newton"`` uses L-BFGS since no Hessian is formed.
    """
    if penalty < 0:
        raise DomainError("penalty must be non-negative")
    x, y = _check_inputs(data.features, data.labels)
    parts = []
    for e in data.environments:
        mask = data.env_ids == e
        parts.append((_augment(x[mask]), y[mask]))
    if not any(np.unique(py).size == 2 for _, py in parts):
        raise SolverError("IRMv1 needs at least one environment containing both classes")
    theta0 = np.zeros(x.shape[1] + 1) if init is None else np.asarray(init, dtype=np.float64)

    def f(theta):
        loss, grad = _irmv1_objective(theta, parts, penalty)
        if cfg.l2_penalty:
            w = theta[:-1]
            loss += 0.5 * cfg.l2_penalty * float(w @ w)
            grad = grad.copy()
            grad[:-1] += cfg.l2_penalty * w
        return loss, grad

    if cfg.step_rule == "newton":
        res = optimize.minimize(
            f, theta0, jac=True, method="L-BFGS-B",
            options={"maxiter": cfg.max_iters, "gtol": cfg.grad_tol, "ftol": 0.0, "maxcor": 20},
        )
        theta = res.x
        gnorm = float(np.linalg.norm(f(theta)[1]))
        if gnorm > cfg.grad_tol:
            # L-BFGS stalls on line-search precision; finish with gradient steps
            theta, _ = _minimize(f, theta, SolverConfig(
                max_iters=cfg.max_iters, grad_tol=cfg.grad_tol, step_rule="backtracking"))
    else:
        theta, _ = _minimize(f, theta0, cfg)
    return LinearPredictor(theta[:-1], theta[-1])


@dataclass
class ErrorReport:
    per_env: dict[int, float]
    mean: float
    warnings: list[str] = field(default_factory=list)


def evaluate_error(pred, data: Dataset, envs=None) -> ErrorReport:
    """Per-environment 0-1 error and its unweighted mean over environments.

    ``envs`` lists the environments expected; any with no rows is reported in
    ``warnings`` and left out of the mean.
    """
    weights = getattr(pred, "weights", None)
    if weights is not None and weights.shape[0] != data.dim:
        raise DomainError(f"predictor dimension {weights.shape[0]} != data dimension {data.dim}")
    expected = data.environments if envs is None else np.asarray(envs)
    wrong = predict(pred, data.features) != data.labels
    per_env, warnings = {}, []
    for e in expected:
        mask = data.env_ids == e
        if not mask.any():
            warnings.append(f"environment {int(e)} has no rows; excluded from the mean")
            continue
        per_env[int(e)] = float(wrong[mask].mean())
    mean = float(np.mean(list(per_env.values()))) if per_env else float("nan")
    return ErrorReport(per_env, mean, warnings)
