"""Relevance Vector Machine regression.

Sparse Bayesian kernel regression with one precision hyperparameter per
weight (automatic relevance determination). Training alternates between the
Gaussian weight posterior and MacKay's fixed-point re-estimation of the
weight precisions ``alpha`` and the noise precision ``beta``; weights whose
precision runs off to infinity are pruned, leaving the relevance vectors.

The design matrix carries an explicit bias column of ones in front of the
kernel columns, and the bias weight gets its own ``alpha`` like any other.

References
----------
Tipping, M. E. (2001). Sparse Bayesian learning and the relevance vector
machine. JMLR 1, 211-244.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist, pdist

from .errors import (
    AllWeightsPruned,
    ConvergenceWarning,
    DimensionMismatch,
    NoConvergence,
    NotPositiveDefinite,
)

__all__ = [
    "DesignMatrix",
    "Hyperparameters",
    "KernelSpec",
    "Posterior",
    "RvmModel",
    "TrainConfig",
    "build_design",
    "default_gamma_grid",
    "fit_hyperparameters",
    "kernel_eval",
    "kernel_matrix",
    "log_evidence",
    "posterior",
    "scan_hyperparameters",
    "predict",
    "train",
    "train_rbf_grid",
    "update_hyperparameters",
]

log = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class KernelSpec:
    """``kind`` is ``"linear"`` (dot product) or ``"rbf"``.

    For rbf, ``rbf_gamma`` is a length scale: ``exp(-|x - y|^2 / (2 gamma^2))``.
    """

    kind: str = "linear"
    rbf_gamma: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("linear", "rbf"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "rbf" and not (self.rbf_gamma is not None and self.rbf_gamma > 0):
            raise ValueError("rbf kernel needs rbf_gamma > 0")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "rbf_gamma": self.rbf_gamma}

    @classmethod
    def from_dict(cls, d: Mapping) -> "KernelSpec":
        g = d.get("rbf_gamma")
        return cls(d["kind"], None if g is None else float(g))


def _as_2d(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise DimensionMismatch(f"inputs must be 1-d or 2-d, got shape {x.shape}")
    return x


def kernel_matrix(spec: KernelSpec, X, Y) -> np.ndarray:
    X, Y = _as_2d(X), _as_2d(Y)
    if X.shape[1] != Y.shape[1]:
        raise DimensionMismatch(f"input dimensions differ: {X.shape[1]} vs {Y.shape[1]}")
    if spec.kind == "linear":
        return X @ Y.T
    return np.exp(-cdist(X, Y, "sqeuclidean") / (2.0 * spec.rbf_gamma**2))


def kernel_eval(spec: KernelSpec, x, y) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionMismatch(f"vectors differ in shape: {x.shape} vs {y.shape}")
    return float(kernel_matrix(spec, x[None, :], y[None, :])[0, 0])


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray
    centers: np.ndarray


def build_design(spec: KernelSpec, rows, centers) -> DesignMatrix:
    """``[1, K(row, c_1), ..., K(row, c_M)]`` for every row."""
    rows, centers = _as_2d(rows), _as_2d(centers)
    if rows.shape[0] < 1 or centers.shape[0] < 1:
        raise ValueError("need at least one row and one center")
    k = kernel_matrix(spec, rows, centers)
    return DesignMatrix(np.hstack([np.ones((rows.shape[0], 1)), k]), centers)


def _values(phi) -> np.ndarray:
    return phi.values if isinstance(phi, DesignMatrix) else np.asarray(phi, dtype=float)


@dataclass(frozen=True)
class Hyperparameters:
    """Weight precisions ``alpha`` (``inf`` marks a pruned weight) and noise precision ``beta``."""

    alpha: np.ndarray
    beta: float

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(np.isfinite(self.alpha))


@dataclass(frozen=True)
class Posterior:
    mu: np.ndarray
    sigma: np.ndarray
    # log-determinant of the posterior precision beta Phi^T Phi + diag(alpha)
    logdet_precision: float


def posterior(phi, t, hp: Hyperparameters) -> Posterior:
    """Gaussian weight posterior for fixed hyperparameters.

    ``Sigma = (beta Phi^T Phi + diag(alpha))^-1`` and
    ``mu = beta Sigma Phi^T t``. ``mu`` comes from a Cholesky solve of the
    Jacobi-scaled precision matrix with one step of iterative refinement;
    every ``alpha`` passed in must be finite (slice pruned columns out first).
    """
    phi = _values(phi)
    t = np.asarray(t, dtype=float)
    alpha = np.asarray(hp.alpha, dtype=float)
    if phi.shape[1] != alpha.size or phi.shape[0] != t.size:
        raise DimensionMismatch(f"design {phi.shape}, alpha {alpha.size}, targets {t.size}")
    if not (np.all(np.isfinite(alpha)) and np.all(alpha > 0)):
        raise NotPositiveDefinite("alpha must be finite and positive on active columns")
    if not (math.isfinite(hp.beta) and hp.beta > 0):
        raise NotPositiveDefinite(f"beta must be finite and positive, got {hp.beta}")
    m = alpha.size
    if m == 0:
        return Posterior(np.zeros(0), np.zeros((0, 0)), 0.0)

    precision = hp.beta * (phi.T @ phi)
    precision[np.diag_indices(m)] += alpha
    rhs = hp.beta * (phi.T @ t)

    d = 1.0 / np.sqrt(np.diag(precision))
    scaled = precision * d[:, None] * d[None, :]
    try:
        chol = linalg.cholesky(scaled, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError) as exc:
        raise NotPositiveDefinite(f"posterior precision is not positive definite: {exc}") from None

    mu = d * linalg.cho_solve((chol, True), d * rhs)
    mu += d * linalg.cho_solve((chol, True), d * (rhs - precision @ mu))

    chol_inv = linalg.solve_triangular(chol, np.eye(m), lower=True)
    sigma = (chol_inv.T @ chol_inv) * d[:, None] * d[None, :]
    sigma = 0.5 * (sigma + sigma.T)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol)))) - 2.0 * float(np.sum(np.log(d)))
    return Posterior(mu, sigma, logdet)


@dataclass(frozen=True)
class TrainConfig:
    tol: float = 1e-6
    max_iter: int = 1000
    # "scan": start from the best shared (alpha, beta) on a log grid; "fixed": alpha_init, 100 / var(t)
    init: str = "scan"
    alpha_init: float = 1e-3
    scan_points: int = 33
    alpha_prune: float = 1e9
    mu_floor: float = 1e-12
    beta_cap: float = 1e12
    residual_floor: float = 1e-12
    # None: standardize inputs for rbf, keep raw inputs for linear
    standardize: Optional[bool] = None
    # an all-pruned fit becomes the zero predictor instead of raising
    allow_empty: bool = True
    strict: bool = False


def update_hyperparameters(
    phi, t, hp: Hyperparameters, post: Posterior, cfg: TrainConfig = TrainConfig()
) -> Hyperparameters:
    """One MacKay fixed-point step.

    ``gamma_i = 1 - alpha_i Sigma_ii`` (clamped to [0, 1]),
    ``alpha_i <- gamma_i / mu_i^2`` and
    ``1 / beta <- |t - Phi mu|^2 / (N - sum gamma)``.
    Weights with ``mu_i^2`` below ``cfg.mu_floor`` come back as ``inf``.
    The squared residual is floored at ``cfg.residual_floor`` and ``beta`` is
    capped at ``cfg.beta_cap`` so that interpolating fits stay finite.
    """
    phi = _values(phi)
    t = np.asarray(t, dtype=float)
    alpha = np.asarray(hp.alpha, dtype=float)
    gamma = np.clip(1.0 - alpha * np.diag(post.sigma), 0.0, 1.0)
    mu2 = post.mu**2

    with np.errstate(divide="ignore"):
        new_alpha = np.where(mu2 < cfg.mu_floor, np.inf, gamma / np.where(mu2 > 0, mu2, 1.0))
    # gamma == 0 means the data say nothing about the weight: prior-only, prune
    new_alpha[new_alpha == 0.0] = np.inf

    resid2 = max(float(np.sum((t - phi @ post.mu) ** 2)), cfg.residual_floor)
    dof = t.size - float(gamma.sum())
    new_beta = cfg.beta_cap if dof <= 0 else min(dof / resid2, cfg.beta_cap)

    if alpha.size and not np.any(np.isfinite(new_alpha)):
        raise AllWeightsPruned("every weight's posterior mean underflowed")
    return Hyperparameters(new_alpha, new_beta)


def log_evidence(phi, t, hp: Hyperparameters) -> float:
    """``log N(t | 0, beta^-1 I + Phi diag(alpha)^-1 Phi^T)``.

    Evaluated through the weight-space posterior (Woodbury / determinant
    lemma), so only an ``M x M`` factorization is needed. Columns with
    infinite ``alpha`` are dropped, which is the exact limit.
    """
    phi = _values(phi)
    t = np.asarray(t, dtype=float)
    active = hp.active
    phi_a = phi[:, active]
    alpha_a = np.asarray(hp.alpha, dtype=float)[active]
    post = posterior(phi_a, t, Hyperparameters(alpha_a, hp.beta))
    return _log_evidence_from_posterior(phi_a, t, alpha_a, hp.beta, post)


def _log_evidence_from_posterior(phi, t, alpha, beta, post: Posterior) -> float:
    n = t.size
    data_fit = beta * float(np.sum((t - phi @ post.mu) ** 2)) + float(np.sum(alpha * post.mu**2))
    logdet_c = -n * math.log(beta) - float(np.sum(np.log(alpha))) + post.logdet_precision
    return -0.5 * (n * _LOG_2PI + logdet_c + data_fit)


def scan_hyperparameters(phi, t, n: int = 33):
    """Best ``(alpha, beta)`` when every weight shares one ``alpha``.

    With a shared ``alpha`` the evidence only needs the eigenvalues of
    ``Phi Phi^T``, so an ``n x n`` log grid costs one eigendecomposition.
    ``alpha`` spans 1e-4..1e4 times the signal scale, ``beta`` 1e-1..1e8
    times ``1 / var(t)``.
    """
    phi = _values(phi)
    t = np.asarray(t, dtype=float)
    n_obs = t.size
    var_t = float(np.var(t)) or 1.0
    lam, u = linalg.eigh(phi @ phi.T)
    lam = np.maximum(lam, 0.0)
    z2 = (u.T @ t) ** 2
    scale = max(float(lam.sum()) / n_obs, 1e-300) / var_t
    alphas = scale * np.logspace(-4.0, 4.0, n)
    betas = np.logspace(-1.0, 8.0, n) / var_t
    best = (-np.inf, alphas[0], betas[0])
    for a in alphas:
        c = lam[None, :] / a + 1.0 / betas[:, None]
        ev = -0.5 * (np.sum(np.log(c), axis=1) + np.sum(z2 / c, axis=1))
        j = int(np.argmax(ev))
        if ev[j] > best[0]:
            best = (ev[j], a, betas[j])
    return float(best[1]), float(best[2])


def fit_hyperparameters(phi, t, cfg: TrainConfig = TrainConfig(), alpha0=None, beta0=None):
    """Run the evidence-maximization loop on a fixed design matrix.

    Returns ``(hp, post, n_iter, converged)`` where ``hp.alpha`` spans every
    column of ``phi`` (``inf`` for pruned ones) and ``post`` covers only the
    active columns, in column order.
    """
    phi = _values(phi)
    t = np.asarray(t, dtype=float)
    n, m = phi.shape
    if n != t.size:
        raise DimensionMismatch(f"design has {n} rows but {t.size} targets")

    if cfg.init not in ("scan", "fixed"):
        raise ValueError(f"unknown init {cfg.init!r}")
    if cfg.init == "scan" and alpha0 is None and beta0 is None:
        a, beta0 = scan_hyperparameters(phi, t, cfg.scan_points)
        alpha0 = np.full(m, a)
    alpha = np.full(m, cfg.alpha_init) if alpha0 is None else np.array(alpha0, dtype=float)
    if beta0 is None:
        var_t = float(np.var(t))
        beta0 = min(100.0 / var_t, cfg.beta_cap) if var_t > 0 else 1.0
    beta = float(beta0)
    active = np.flatnonzero(np.isfinite(alpha))

    converged = False
    n_iter = 0
    for n_iter in range(1, cfg.max_iter + 1):
        sub = phi[:, active]
        post = posterior(sub, t, Hyperparameters(alpha[active], beta))
        try:
            new = update_hyperparameters(sub, t, Hyperparameters(alpha[active], beta), post, cfg)
        except AllWeightsPruned:
            new = Hyperparameters(np.full(active.size, np.inf), beta)
        keep = np.isfinite(new.alpha) & (new.alpha <= cfg.alpha_prune)

        delta = abs(math.log(new.beta) - math.log(beta))
        if keep.any():
            delta = max(delta, float(np.max(np.abs(np.log(new.alpha[keep]) - np.log(alpha[active][keep])))))

        alpha[active] = np.where(keep, new.alpha, np.inf)
        active = active[keep]
        beta = new.beta
        if active.size == 0:
            # the zero predictor: its beta maximizes N(t | 0, 1/beta)
            resid2 = max(float(np.sum(t**2)), cfg.residual_floor)
            beta = min(n / resid2, cfg.beta_cap)
            converged = True
            break
        if keep.all() and delta < cfg.tol:
            converged = True
            break

    post = posterior(phi[:, active], t, Hyperparameters(alpha[active], beta))
    return Hyperparameters(alpha, beta), post, n_iter, converged


@dataclass(frozen=True)
class RvmModel:
    """A trained relevance vector regressor.

    ``relevance_vectors`` are stored in raw input units; when
    ``input_mean``/``input_scale`` are set, inputs and relevance vectors are
    z-scored with them before the kernel is evaluated. ``weights[0]`` is the
    bias weight iff ``has_bias``.
    """

    kernel: KernelSpec
    relevance_vectors: np.ndarray
    relevance_indices: np.ndarray
    has_bias: bool
    weights: np.ndarray
    sigma: np.ndarray
    beta: float
    n_features: int
    input_mean: Optional[np.ndarray] = None
    input_scale: Optional[np.ndarray] = None
    training_meta: dict = field(default_factory=dict)

    @property
    def n_relevance(self) -> int:
        return int(self.relevance_vectors.shape[0])

    def _standardize(self, x: np.ndarray) -> np.ndarray:
        if self.input_mean is None:
            return x
        return (x - self.input_mean) / self.input_scale

    def design(self, X) -> np.ndarray:
        X = _as_2d(X)
        if X.shape[1] != self.n_features:
            raise DimensionMismatch(f"model expects {self.n_features} inputs, got {X.shape[1]}")
        cols = []
        if self.has_bias:
            cols.append(np.ones((X.shape[0], 1)))
        if self.n_relevance:
            cols.append(
                kernel_matrix(self.kernel, self._standardize(X), self._standardize(self.relevance_vectors))
            )
        if not cols:
            return np.zeros((X.shape[0], 0))
        return np.hstack(cols)

    def to_dict(self) -> dict:
        return {
            "kernel": self.kernel.to_dict(),
            "n_features": self.n_features,
            "standardization": None
            if self.input_mean is None
            else {"mean": self.input_mean.tolist(), "scale": self.input_scale.tolist()},
            "relevance_vectors": self.relevance_vectors.tolist(),
            "relevance_indices": self.relevance_indices.tolist(),
            "has_bias": self.has_bias,
            "weights": self.weights.tolist(),
            "sigma": self.sigma.tolist(),
            "beta": self.beta,
            "training_meta": dict(self.training_meta),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RvmModel":
        std = d["standardization"]
        n_features = int(d["n_features"])
        weights = np.asarray(d["weights"], dtype=float)
        return cls(
            kernel=KernelSpec.from_dict(d["kernel"]),
            relevance_vectors=np.asarray(d["relevance_vectors"], dtype=float).reshape(-1, n_features),
            relevance_indices=np.asarray(d["relevance_indices"], dtype=int),
            has_bias=bool(d["has_bias"]),
            weights=weights,
            sigma=np.asarray(d["sigma"], dtype=float).reshape(weights.size, weights.size),
            beta=float(d["beta"]),
            n_features=n_features,
            input_mean=None if std is None else np.asarray(std["mean"], dtype=float),
            input_scale=None if std is None else np.asarray(std["scale"], dtype=float),
            training_meta=dict(d["training_meta"]),
        )


def predict(model: RvmModel, X):
    """Posterior-mean prediction and predictive variance.

    ``mean = phi(x) @ weights`` and ``var = 1/beta + phi(x) Sigma phi(x)^T``.
    A 1-d ``X`` is one input vector and gives scalars back.
    """
    x = np.asarray(X, dtype=float)
    single = x.ndim == 1 and (model.n_features > 1 or x.size == 1)
    rows = x[None, :] if single else _as_2d(x)
    phi = model.design(rows)
    mean = phi @ model.weights
    quad = np.einsum("ij,jk,ik->i", phi, model.sigma, phi) if phi.shape[1] else np.zeros(rows.shape[0])
    var = 1.0 / model.beta + np.maximum(quad, 0.0)
    if single:
        return float(mean[0]), float(var[0])
    return mean, var


def _standardization(X: np.ndarray):
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    return mean, scale


def train(spec: KernelSpec, X, t, cfg: TrainConfig = TrainConfig()) -> RvmModel:
    """Fit an RVM with every training input as a candidate basis center."""
    X = _as_2d(X)
    t = np.asarray(t, dtype=float).ravel()
    if X.shape[0] != t.size:
        raise DimensionMismatch(f"{X.shape[0]} inputs but {t.size} targets")
    if t.size < 2:
        raise ValueError("need at least 2 training samples")
    if not np.all(np.isfinite(t)) or not np.all(np.isfinite(X)):
        raise ValueError("training data must be finite")

    standardize = cfg.standardize if cfg.standardize is not None else spec.kind == "rbf"
    mean = scale = None
    Z = X
    if standardize:
        mean, scale = _standardization(X)
        Z = (X - mean) / scale

    phi = build_design(spec, Z, Z).values
    hp, post, n_iter, converged = fit_hyperparameters(phi, t, cfg)
    active = hp.active
    if active.size == 0 and not cfg.allow_empty:
        raise AllWeightsPruned("evidence maximization pruned every weight")

    evidence = log_evidence(phi, t, hp)
    has_bias = bool(active.size and active[0] == 0)
    centers = active[1:] - 1 if has_bias else active - 1
    model = RvmModel(
        kernel=spec,
        relevance_vectors=X[centers].copy(),
        relevance_indices=centers.astype(int),
        has_bias=has_bias,
        weights=post.mu.copy(),
        sigma=post.sigma.copy(),
        beta=hp.beta,
        n_features=X.shape[1],
        input_mean=mean,
        input_scale=scale,
        training_meta={
            "iterations": n_iter,
            "converged": converged,
            "log_evidence": evidence,
            "n_train": int(t.size),
        },
    )
    log.debug(
        "rvm %s: %d iterations, %d relevance vectors, log evidence %.6g",
        spec.kind, n_iter, model.n_relevance, evidence,
    )
    if not converged:
        msg = f"RVM did not converge in {cfg.max_iter} iterations"
        if cfg.strict:
            raise NoConvergence(msg, model=model)
        warnings.warn(msg, ConvergenceWarning, stacklevel=2)
    return model


def default_gamma_grid(X, n: int = 7, standardize: bool = True) -> np.ndarray:
    """Log-spaced rbf length scales from 0.1x to 10x the median pairwise distance."""
    X = _as_2d(X)
    Z = (X - X.mean(axis=0)) / np.where(X.std(axis=0) == 0, 1.0, X.std(axis=0)) if standardize else X
    dists = pdist(Z)
    med = float(np.median(dists[dists > 0])) if np.any(dists > 0) else 1.0
    return med * np.logspace(-1.0, 1.0, n)


def train_rbf_grid(X, t, gammas: Optional[Sequence[float]] = None, cfg: TrainConfig = TrainConfig()) -> RvmModel:
    """Train one rbf RVM per length scale and keep the one with the highest log evidence."""
    standardize = True if cfg.standardize is None else cfg.standardize
    if gammas is None:
        gammas = default_gamma_grid(X, standardize=standardize)
    best = None
    failures = []
    for g in gammas:
        try:
            model = train(KernelSpec("rbf", float(g)), X, t, cfg)
        except (NotPositiveDefinite, AllWeightsPruned) as exc:
            failures.append((g, exc))
            continue
        if best is None or model.training_meta["log_evidence"] > best.training_meta["log_evidence"]:
            best = model
    if best is None:
        raise failures[-1][1]
    meta = dict(best.training_meta, gamma_grid=[float(g) for g in gammas])
    return replace(best, training_meta=meta)
