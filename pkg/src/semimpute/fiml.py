"""Multivariate-normal estimation under missing data.

EM over missingness patterns maximizes the observed-data (marginalized)
log-likelihood; conditional expectation under the fitted parameters provides
the initial imputation that attention training later refines.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .dataset import Dataset, pairwise_stats
from .errors import InputError, NumericalError

LOG_2PI = float(np.log(2.0 * np.pi))

# Log-likelihood is asserted monotone up to this slack (floating-point noise
# in the per-pattern solves).
MONOTONE_SLACK = 1e-8


@dataclass(frozen=True)
class MvnParams:
    """Mean vector and symmetric positive-definite covariance."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if mu.ndim != 1 or sigma.shape != (mu.size, mu.size):
            raise InputError("mu must be a d-vector and sigma d x d")
        if not np.allclose(sigma, sigma.T, atol=1e-10):
            raise InputError("sigma must be symmetric within 1e-10")
        object.__setattr__(self, "mu", mu.copy())
        object.__setattr__(self, "sigma", 0.5 * (sigma + sigma.T))
        self.mu.setflags(write=False)
        self.sigma.setflags(write=False)

    @property
    def d(self) -> int:
        return self.mu.size


@dataclass(frozen=True)
class EmConfig:
    max_iter: int = 500
    tol: float = 1e-6
    ridge: float = 1e-6

    def __post_init__(self):
        if self.max_iter < 1:
            raise InputError("max_iter must be at least 1")
        if self.tol <= 0:
            raise InputError("tol must be positive")
        if self.ridge < 0:
            raise InputError("ridge must be non-negative")


class EmResult(NamedTuple):
    params: MvnParams
    iterations: int
    loglik: float
    warnings: list[str]


def _chol_with_ridge(sigma: np.ndarray, ridge: float, warnings: list[str], label: str):
    """Cholesky factor of sigma, retrying once with a diagonal ridge."""
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        pass
    if ridge > 0:
        try:
            chol = np.linalg.cholesky(sigma + ridge * np.eye(sigma.shape[0]))
            warnings.append(f"ridge {ridge} added to {label} for factorization")
            return chol
        except np.linalg.LinAlgError:
            pass
    raise NumericalError(f"{label} is not positive definite even after ridge")


def _patterns(mask: np.ndarray):
    """Group row indices by missingness pattern (observed-column tuple)."""
    groups: dict[tuple[int, ...], list[int]] = {}
    for i, row in enumerate(mask):
        key = tuple(np.nonzero(row)[0].tolist())
        groups.setdefault(key, []).append(i)
    return sorted(groups.items())


def loglik_observed(params: MvnParams, ds: Dataset) -> float:
    value, _ = _loglik_observed(params, ds, ridge=1e-6)
    return value


def _loglik_observed(params: MvnParams, ds: Dataset, ridge: float):
    """Sum of log N(x_obs; mu_obs, sigma_obs,obs) over rows, by pattern."""
    warnings: list[str] = []
    total = 0.0
    for obs, rows in _patterns(ds.mask):
        if not obs:
            warnings.append(f"{len(rows)} fully-missing row(s) contribute 0")
            continue
        idx = np.array(obs)
        mu_o = params.mu[idx]
        sig_oo = params.sigma[np.ix_(idx, idx)]
        chol = _chol_with_ridge(sig_oo, ridge, warnings, "pattern submatrix")
        logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        x = ds.values[np.ix_(rows, idx)] - mu_o
        z = np.linalg.solve(chol, x.T)
        quad = np.sum(z * z, axis=0)
        total += float(np.sum(-0.5 * (len(obs) * LOG_2PI + logdet + quad)))
    return total, warnings


def _conditional_beta(sigma: np.ndarray, o: np.ndarray, m: np.ndarray, ridge, warnings):
    """Regression matrix Sigma_mo Sigma_oo^{-1} plus the oo Cholesky factor."""
    sig_oo = sigma[np.ix_(o, o)]
    sig_mo = sigma[np.ix_(m, o)]
    chol = _chol_with_ridge(sig_oo, ridge, warnings, "conditioning block")
    beta = np.linalg.solve(chol.T, np.linalg.solve(chol, sig_mo.T)).T
    return beta, sig_mo


def em_fit(ds: Dataset, cfg: EmConfig = EmConfig(), init: MvnParams | None = None) -> EmResult:
    """EM for (mu, sigma) of a multivariate normal with ignorable missingness.

    E-step: per missingness pattern, fill conditional means and accumulate
    the conditional covariance of the missing block.  M-step: ML update with
    denominator n.  Initialization comes from pairwise-complete moments
    unless ``init`` is given.  The observed-data log-likelihood is checked to
    be non-decreasing across iterations.
    """
    n, d = ds.values.shape
    for j, spec in enumerate(ds.specs):
        if int(ds.mask[:, j].sum()) < 2:
            raise InputError(f"column {spec.name!r} needs at least 2 observed cells")

    warnings: list[str] = []
    if init is None:
        start = pairwise_stats(ds)
        warnings.extend(start.warnings)
        mu = start.mean.copy()
        sigma = _ensure_pd(0.5 * (start.cov + start.cov.T), cfg.ridge, warnings)
    else:
        mu = init.mu.copy()
        sigma = _ensure_pd(init.sigma.copy(), cfg.ridge, warnings)

    groups = _patterns(ds.mask)
    prev_ll, ll_warn = _loglik_observed(MvnParams(mu, sigma), ds, cfg.ridge)
    warnings.extend(ll_warn)

    iterations = 0
    ll = prev_ll
    for iteration in range(1, cfg.max_iter + 1):
        iterations = iteration
        filled = ds.values.copy()
        correction = np.zeros((d, d))
        for obs, rows in groups:
            if len(obs) == d:
                continue
            if not obs:
                filled[rows, :] = mu
                correction += len(rows) * sigma
                continue
            o = np.array(obs)
            m = np.array([j for j in range(d) if j not in set(obs)])
            beta, sig_mo = _conditional_beta(sigma, o, m, cfg.ridge, warnings)
            resid = ds.values[np.ix_(rows, o)] - mu[o]
            filled[np.ix_(rows, m)] = mu[m] + resid @ beta.T
            cond_cov = sigma[np.ix_(m, m)] - beta @ sig_mo.T
            correction[np.ix_(m, m)] += len(rows) * cond_cov

        mu = filled.mean(axis=0)
        centered = filled - mu
        sigma = (centered.T @ centered + correction) / n
        sigma = _ensure_pd(0.5 * (sigma + sigma.T), cfg.ridge, warnings)

        ll, _ = _loglik_observed(MvnParams(mu, sigma), ds, cfg.ridge)
        if ll < prev_ll - MONOTONE_SLACK:
            raise NumericalError(f"log-likelihood decreased ({prev_ll!r} -> {ll!r})")
        if abs(ll - prev_ll) / max(abs(prev_ll), 1.0) < cfg.tol:
            prev_ll = ll
            break
        prev_ll = ll

    return EmResult(
        params=MvnParams(mu, sigma),
        iterations=iterations,
        loglik=float(ll),
        warnings=warnings,
    )


def _ensure_pd(sigma: np.ndarray, ridge: float, warnings: list[str] | None = None):
    try:
        np.linalg.cholesky(sigma)
        return sigma
    except np.linalg.LinAlgError:
        pass
    if warnings is not None:
        warnings.append(f"ridge {ridge} added to covariance diagonal")
    out = sigma + max(ridge, 1e-12) * np.eye(sigma.shape[0])
    try:
        np.linalg.cholesky(out)
        return out
    except np.linalg.LinAlgError:
        pass
    # Pairwise-complete starts can be indefinite beyond any small ridge:
    # floor the spectrum instead.
    if warnings is not None:
        warnings.append("indefinite covariance; eigenvalues floored")
    vals, vecs = np.linalg.eigh(0.5 * (sigma + sigma.T))
    floor = max(ridge, 1e-12)
    out = (vecs * np.maximum(vals, floor)) @ vecs.T
    out = 0.5 * (out + out.T)
    try:
        np.linalg.cholesky(out)
    except np.linalg.LinAlgError:
        raise NumericalError("covariance not positive definite after repair") from None
    return out


def conditional_impute(params: MvnParams, ds: Dataset) -> tuple[Dataset, np.ndarray]:
    """Fill missing cells with conditional means under ``params``.

    Returns the imputed dataset (mask unchanged) and a boolean provenance
    matrix flagging exactly the filled cells.  Observed cells pass through
    bit-identical; fully-missing rows get the unconditional mean.
    """
    values = ds.values.copy()
    provenance = ~np.asarray(ds.mask)
    warnings: list[str] = []
    for obs, rows in _patterns(ds.mask):
        if len(obs) == ds.d:
            continue
        if not obs:
            values[rows, :] = params.mu
            continue
        o = np.array(obs)
        m = np.array([j for j in range(ds.d) if j not in set(obs)])
        beta, _ = _conditional_beta(params.sigma, o, m, 1e-6, warnings)
        resid = ds.values[np.ix_(rows, o)] - params.mu[o]
        values[np.ix_(rows, m)] = params.mu[m] + resid @ beta.T
    return ds.with_values(values), provenance
