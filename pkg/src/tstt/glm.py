"""Generalized linear models fit by iteratively reweighted least squares.

Two families are supported: ``gaussian`` (identity link) and ``binomial``
(logit link). Binomial responses may be fractional in [0, 1], which gives the
quasi-likelihood fit used when regressing predicted probabilities.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg
from scipy.special import expit, xlogy

from .errors import ConfigError, ConvergenceError, DataError, RankDeficiencyError, SeparationError

FAMILIES = {"gaussian": "identity", "binomial": "logit"}
TOLERANCE = 1e-8
MAX_ITER = 50
# probabilities beyond these bounds count as pinned when checking separation
PIN_LO, PIN_HI = 1e-10, 1.0 - 1e-10


@dataclass(frozen=True)
class GlmFit:
    family: str
    coefficients: pd.Series
    n_obs: int
    deviance: float
    converged: bool
    iterations: int
    deviance_history: tuple = field(default=(), repr=False)

    @property
    def link(self) -> str:
        return FAMILIES[self.family]

    @property
    def columns(self) -> list[str]:
        return list(self.coefficients.index)


def _as_design(design, names=None) -> tuple[np.ndarray, list[str]]:
    if isinstance(design, pd.DataFrame):
        return design.to_numpy(dtype=float), [str(c) for c in design.columns]
    X = np.asarray(design, dtype=float)
    if X.ndim != 2:
        raise DataError("design must be two-dimensional")
    if names is None:
        names = [f"x{j}" for j in range(X.shape[1])]
    return X, list(names)


def check_rank(X: np.ndarray, names, rtol=1e-10):
    """Raise :class:`RankDeficiencyError` unless ``X`` has full column rank.

    Uses a column-pivoted QR decomposition; the columns pivoted past the
    numerical rank are reported as collinear.
    """
    if X.shape[1] == 0:
        return
    if X.shape[0] < X.shape[1]:
        raise RankDeficiencyError(names, f"design has {X.shape[0]} rows but {X.shape[1]} columns")
    _, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > rtol * max(diag[0], 1e-300) * max(X.shape)))
    if rank < X.shape[1]:
        raise RankDeficiencyError([names[j] for j in piv[rank:]])


def _deviance(family, y, mu):
    if family == "gaussian":
        return float(np.sum((y - mu) ** 2))
    return float(2.0 * np.sum(xlogy(y, y) - xlogy(y, mu) + xlogy(1 - y, 1 - y) - xlogy(1 - y, 1 - mu)))


def fit_glm(design, response, family="binomial", *, names=None, tol=TOLERANCE, max_iter=MAX_ITER) -> GlmFit:
    """Maximum-likelihood GLM coefficients by IRLS.

    Parameters
    ----------
    design : DataFrame or 2-D array
        Model matrix, including an intercept column if one is wanted.
    response : array-like
        Outcome; for ``binomial`` every value must lie in [0, 1].
    family : {"binomial", "gaussian"}
    names : optional column names when ``design`` is a plain array.

    Iterates until the relative deviance change ``|D - D_old| / (|D| + 0.1)``
    falls below ``tol`` or ``max_iter`` iterations have run.

    Raises
    ------
    RankDeficiencyError, SeparationError, ConvergenceError
    """
    if family not in FAMILIES:
        raise ConfigError(f"unsupported family {family!r}; choose from {sorted(FAMILIES)}")
    X, names = _as_design(design, names)
    y = np.asarray(response, dtype=float).ravel()
    if X.shape[0] != y.shape[0]:
        raise DataError(f"design has {X.shape[0]} rows but response has {y.shape[0]}")
    if not np.isfinite(X).all() or not np.isfinite(y).all():
        raise DataError("design and response must be finite")
    if family == "binomial" and ((y < 0) | (y > 1)).any():
        raise DataError("binomial responses must lie in [0, 1]")
    check_rank(X, names)

    if family == "gaussian":
        mu = y.copy()
        eta = mu
    else:
        mu = (y + 0.5) / 2.0
        eta = np.log(mu / (1.0 - mu))
    beta = np.zeros(X.shape[1])
    dev_old = _deviance(family, y, mu)
    history = []
    converged = False
    step = np.full(X.shape[1], np.inf)
    it = 0
    for it in range(1, max_iter + 1):
        if family == "gaussian":
            w = np.ones_like(y)
            z = y
        else:
            w = np.maximum(mu * (1.0 - mu), 1e-300)
            z = eta + (y - mu) / w
        sw = np.sqrt(w)
        beta_new = scipy.linalg.lstsq(X * sw[:, None], z * sw, lapack_driver="gelsd")[0]
        step = beta_new - beta
        beta = beta_new
        eta = X @ beta
        mu = eta if family == "gaussian" else expit(eta)
        dev = _deviance(family, y, mu)
        history.append(dev)
        if abs(dev - dev_old) / (abs(dev) + 0.1) < tol:
            converged = True
            break
        dev_old = dev

    if family == "binomial":
        pinned = (mu < PIN_LO) | (mu > PIN_HI)
        if pinned.any() and np.linalg.norm(step) > 1e-3:
            raise SeparationError(
                f"complete or quasi-complete separation: {int(pinned.sum())} fitted probabilities pinned at 0/1 "
                f"and coefficients still growing (|step|={np.linalg.norm(step):.3g}, |beta|={np.linalg.norm(beta):.3g})")
    if not converged:
        raise ConvergenceError(
            f"IRLS did not converge in {max_iter} iterations",
            {"deviance_history": history[-5:], "coefficients": dict(zip(names, beta))})
    return GlmFit(family, pd.Series(beta, index=names), X.shape[0], dev, converged, it, tuple(history))


def _aligned(fit: GlmFit, design) -> np.ndarray:
    if isinstance(design, pd.DataFrame):
        cols = [str(c) for c in design.columns]
        if sorted(cols) != sorted(fit.columns):
            raise DataError(f"design columns {cols} do not match fitted coefficients {fit.columns}")
        return design.loc[:, fit.columns].to_numpy(dtype=float)
    X = np.asarray(design, dtype=float)
    if X.ndim != 2 or X.shape[1] != len(fit.columns):
        raise DataError(f"design needs {len(fit.columns)} columns ({fit.columns})")
    return X


def predict(fit: GlmFit, design, scale="response") -> np.ndarray:
    """Linear predictor (``scale="link"``) or mean (``scale="response"``)."""
    if scale not in ("link", "response"):
        raise ConfigError(f"scale must be 'link' or 'response', got {scale!r}")
    eta = _aligned(fit, design) @ fit.coefficients.to_numpy()
    if scale == "link" or fit.family == "gaussian":
        return eta
    return expit(eta)


def log_likelihood(family, X, y, beta) -> float:
    """Log-likelihood kernel (gaussian: unit-variance, up to a constant)."""
    eta = np.asarray(X, dtype=float) @ np.asarray(beta, dtype=float)
    y = np.asarray(y, dtype=float)
    if family == "gaussian":
        return float(-0.5 * np.sum((y - eta) ** 2))
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def score(fit: GlmFit, design, response) -> np.ndarray:
    """Score vector ``X'(y - mu)`` at the fitted coefficients."""
    X = _aligned(fit, design)
    return X.T @ (np.asarray(response, dtype=float) - predict(fit, X))
