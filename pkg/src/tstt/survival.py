"""Cox proportional hazards with a Breslow baseline, Kaplan-Meier, and RMST.

Time is continuous (minutes in this package); nothing is discretized.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.interpolate import CubicSpline

from .errors import ConvergenceError, DataError, MonotoneLikelihoodError
from .glm import check_rank

TOLERANCE = 1e-8
MAX_ITER = 50


@dataclass(frozen=True)
class SurvivalCurve:
    """Right-continuous step function.

    ``survival[i]`` holds on ``[times[i], times[i+1])``; the last value
    holds from ``times[-1]`` onwards. ``times[0]`` is 0.
    """

    times: np.ndarray
    survival: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        s = np.asarray(self.survival, dtype=float)
        if t.shape != s.shape or t.ndim != 1 or len(t) == 0:
            raise DataError("times and survival must be matching non-empty vectors")
        if t[0] != 0 or (np.diff(t) <= 0).any():
            raise DataError("times must start at 0 and increase strictly")
        if ((s < 0) | (s > 1)).any() or (np.diff(s) > 0).any():
            raise DataError("survival must lie in [0, 1] and be non-increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "survival", s)

    def __call__(self, t):
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right") - 1
        return self.survival[np.clip(idx, 0, None)]


@dataclass(frozen=True)
class CoxFit:
    coefficients: pd.Series
    event_times: np.ndarray
    hazard_increments: np.ndarray
    n_obs: int
    n_events: int
    log_likelihood: float
    converged: bool
    iterations: int
    loglik_history: tuple = field(default=(), repr=False)

    @property
    def columns(self) -> list[str]:
        return list(self.coefficients.index)

    @property
    def baseline_hazard(self) -> pd.DataFrame:
        """Breslow increments and cumulative baseline hazard at each event time."""
        return pd.DataFrame({"time": self.event_times, "increment": self.hazard_increments,
                             "cumulative": np.cumsum(self.hazard_increments)})

    def cumulative_hazard(self, t) -> np.ndarray:
        H = np.concatenate([[0.0], np.cumsum(self.hazard_increments)])
        return H[np.searchsorted(self.event_times, np.asarray(t, dtype=float), side="right")]


def _as_design(design, n):
    if design is None:
        return np.zeros((n, 0)), []
    if isinstance(design, pd.DataFrame):
        return design.to_numpy(dtype=float), [str(c) for c in design.columns]
    X = np.asarray(design, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X, [f"x{j}" for j in range(X.shape[1])]


class _RiskSets:
    """Sorted layout for Breslow risk-set sums.

    Rows are sorted by decreasing duration so that the risk set of the j-th
    distinct event time is a prefix of the sorted rows.
    """

    def __init__(self, duration, event):
        order = np.argsort(-duration, kind="mergesort")
        self.order = order
        d = duration[order]
        e = event[order]
        self.times = np.unique(duration[event])
        # index of the last sorted row with duration >= t, for each event time
        self.ends = np.searchsorted(-d, -self.times, side="right") - 1
        self.deaths = np.bincount(np.searchsorted(self.times, d[e]), minlength=len(self.times)).astype(float)
        self.event_sorted = e

    def sums(self, X, eta):
        """Return S0, S1, S2 evaluated at each distinct event time (shift-stabilized) and the shift."""
        c = eta.max() if len(eta) else 0.0
        w = np.exp(eta - c)
        Xs = X[self.order]
        ws = w[self.order]
        S0 = np.cumsum(ws)[self.ends]
        S1 = np.cumsum(ws[:, None] * Xs, axis=0)[self.ends]
        S2 = np.cumsum(ws[:, None, None] * Xs[:, :, None] * Xs[:, None, :], axis=0)[self.ends]
        return S0, S1, S2, c


def partial_log_likelihood(X, duration, event, beta) -> float:
    """Breslow-ties log partial likelihood, computed directly from risk sets."""
    X = np.asarray(X, dtype=float).reshape(len(duration), -1)
    duration = np.asarray(duration, dtype=float)
    event = np.asarray(event, dtype=bool)
    eta = X @ np.asarray(beta, dtype=float)
    total = 0.0
    for t in np.unique(duration[event]):
        at = event & (duration == t)
        risk = duration >= t
        m = eta[risk].max()
        total += eta[at].sum() - at.sum() * (m + np.log(np.exp(eta[risk] - m).sum()))
    return float(total)


def _loglik_grad_hess(rs, X, eta, deaths):
    S0, S1, S2, c = rs.sums(X, eta)
    Xe = X[rs.order][rs.event_sorted]
    ll = float(eta[rs.order][rs.event_sorted].sum() - np.sum(deaths * (np.log(S0) + c)))
    grad = Xe.sum(axis=0) - (deaths[:, None] * S1 / S0[:, None]).sum(axis=0)
    mean = S1 / S0[:, None]
    hess = -np.einsum("j,jab->ab", deaths, S2 / S0[:, None, None] - mean[:, :, None] * mean[:, None, :])
    return ll, grad, hess


def fit_cox(design, duration, event, *, tol=TOLERANCE, max_iter=MAX_ITER) -> CoxFit:
    """Maximize the Breslow partial likelihood by Newton's method.

    ``design`` carries no intercept. The baseline hazard increments are
    ``d_j / sum_{risk set} exp(x beta)`` at each distinct event time.
    Converges when the log partial likelihood changes by less than ``tol``.
    """
    duration = np.asarray(duration, dtype=float).ravel()
    event = np.asarray(event).astype(bool).ravel()
    n = len(duration)
    X, names = _as_design(design, n)
    if X.shape[0] != n or len(event) != n:
        raise DataError("design, duration and event lengths differ")
    if not np.isfinite(duration).all() or (duration <= 0).any():
        raise DataError("durations must be positive and finite")
    if not event.any():
        raise DataError("at least one event is required")
    if not np.isfinite(X).all():
        raise DataError("design must be finite")
    p = X.shape[1]
    if p:
        # Cox has no intercept, so a constant column is not identifiable
        check_rank(np.column_stack([np.ones(n), X]), ["(baseline)", *names])

    rs = _RiskSets(duration, event)
    deaths = rs.deaths
    beta = np.zeros(p)
    eta = X @ beta
    ll, grad, hess = _loglik_grad_hess(rs, X, eta, deaths)
    history = [ll]
    converged = p == 0
    it = 0
    step = np.zeros(p)
    while not converged and it < max_iter:
        it += 1
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            raise MonotoneLikelihoodError("information matrix is singular; partial likelihood has no finite maximum")
        halvings = 0
        while True:
            cand = beta + step
            eta_c = X @ cand
            ll_c, grad_c, hess_c = _loglik_grad_hess(rs, X, eta_c, deaths)
            if np.isfinite(ll_c) and ll_c >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            step = step / 2.0
            halvings += 1
            if halvings > 30:
                raise ConvergenceError("step halving failed to increase the partial likelihood",
                                       {"loglik_history": history[-5:]})
        change = ll_c - ll
        beta, eta, ll, grad, hess = cand, eta_c, ll_c, grad_c, hess_c
        history.append(ll)
        if abs(change) < tol:
            converged = True

    if p:
        # one more Newton step to tell a true optimum from a diverging ridge
        try:
            final = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            final = np.full(p, np.inf)
        if not np.all(np.isfinite(final)) or np.max(np.abs(final)) > 1e-3 * (1.0 + np.max(np.abs(beta))):
            raise MonotoneLikelihoodError(
                f"partial likelihood appears monotone: coefficients {dict(zip(names, np.round(beta, 3)))} "
                f"still moving after convergence of the log-likelihood")
        if np.max(np.abs(final)) < 1e-2:
            cand = beta + final
            eta_c = X @ cand
            ll_c, grad_c, hess_c = _loglik_grad_hess(rs, X, eta_c, deaths)
            if ll_c >= ll - 1e-12 * max(1.0, abs(ll)):
                beta, eta, ll = cand, eta_c, ll_c
    if not converged:
        raise ConvergenceError(f"Newton iterations did not converge in {max_iter} iterations",
                               {"loglik_history": history[-5:], "coefficients": dict(zip(names, beta))})

    S0, _, _, c = rs.sums(X, eta)
    increments = deaths / S0 * np.exp(-c)
    return CoxFit(pd.Series(beta, index=names, dtype=float), rs.times, increments, n, int(event.sum()),
                  ll, True, it, tuple(history))


def cox_score(fit: CoxFit, design, duration, event) -> np.ndarray:
    """Partial-likelihood score at the fitted coefficients."""
    duration = np.asarray(duration, dtype=float)
    X, _ = _as_design(design, len(duration))
    rs = _RiskSets(duration, np.asarray(event, dtype=bool))
    _, grad, _ = _loglik_grad_hess(rs, X, X @ fit.coefficients.to_numpy(), rs.deaths)
    return grad


def linear_predictor(fit: CoxFit, covariates) -> np.ndarray:
    """``x beta`` for a row (mapping / Series) or a frame of rows, matched by name."""
    if isinstance(covariates, pd.DataFrame):
        frame = covariates
    elif isinstance(covariates, (pd.Series, dict)):
        frame = pd.DataFrame([dict(covariates)])
    else:
        raise DataError("covariates must be a mapping, Series or DataFrame")
    cols = [str(c) for c in frame.columns]
    if sorted(cols) != sorted(fit.columns):
        raise DataError(f"covariates {cols} do not match fitted coefficients {fit.columns}")
    if not fit.columns:
        return np.zeros(len(frame))
    return frame.loc[:, fit.columns].to_numpy(dtype=float) @ fit.coefficients.to_numpy()


def predict_survival(fit: CoxFit, covariates) -> SurvivalCurve:
    """``S(t | x) = exp(-H0(t) exp(x beta))`` as a step function over the event times."""
    eta = linear_predictor(fit, covariates)
    if len(eta) != 1:
        raise DataError("predict_survival takes a single covariate row")
    return baseline_curve(fit, float(eta[0]))


def baseline_curve(fit: CoxFit, eta: float = 0.0) -> SurvivalCurve:
    H = np.cumsum(fit.hazard_increments)
    s = np.exp(-H * np.exp(eta))
    if len(fit.event_times) and fit.event_times[0] == 0:
        return SurvivalCurve(fit.event_times, s)
    return SurvivalCurve(np.concatenate([[0.0], fit.event_times]), np.concatenate([[1.0], s]))


def kaplan_meier(duration, event) -> SurvivalCurve:
    duration = np.asarray(duration, dtype=float)
    event = np.asarray(event, dtype=bool)
    times = np.unique(duration[event])
    at_risk = len(duration) - np.searchsorted(np.sort(duration), times, side="left")
    deaths = np.array([np.sum(event & (duration == t)) for t in times], dtype=float)
    s = np.cumprod(1.0 - deaths / at_risk)
    return SurvivalCurve(np.concatenate([[0.0], times]), np.concatenate([[1.0], s]))


def nelson_aalen(duration, event) -> tuple[np.ndarray, np.ndarray]:
    """Event times and Nelson-Aalen cumulative hazard, by direct counting."""
    duration = np.asarray(duration, dtype=float)
    event = np.asarray(event, dtype=bool)
    times = np.unique(duration[event])
    inc = np.array([np.sum(event & (duration == t)) / np.sum(duration >= t) for t in times])
    return times, np.cumsum(inc)


def rmst(curve: SurvivalCurve, tau: float = 1440.0) -> float:
    """Exact area under the step function on ``[0, tau]``."""
    if tau <= 0:
        raise DataError("tau must be positive")
    t = curve.times
    inside = t < tau
    starts = t[inside]
    ends = np.append(starts[1:], tau)
    return float(np.sum(curve.survival[inside] * (ends - starts)))


def rmst_at_eta(fit: CoxFit, eta, tau: float = 1440.0) -> np.ndarray:
    """RMST of ``S(t | eta)`` for every linear predictor in ``eta``, directly.

    Costs ``len(eta) * n_event_times``; see :func:`rmst_evaluator` for large
    batches.
    """
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    starts, widths, H = _rmst_segments(fit, tau)
    out = np.empty(eta.shape)
    flat = eta.ravel()
    res = out.ravel()
    for lo in range(0, len(flat), 2048):
        chunk = flat[lo:lo + 2048]
        res[lo:lo + 2048] = np.exp(-np.outer(np.exp(chunk), H)) @ widths
    return res.reshape(eta.shape)


def _rmst_segments(fit: CoxFit, tau):
    """Segment widths and cumulative hazard on each constant piece of S on [0, tau)."""
    t = fit.event_times[fit.event_times < tau]
    H = np.concatenate([[0.0], np.cumsum(fit.hazard_increments[: len(t)])])
    starts = np.concatenate([[0.0], t])
    widths = np.diff(np.append(starts, tau))
    keep = widths > 0
    return starts[keep], widths[keep], H[keep]


def rmst_evaluator(fit: CoxFit, eta_min: float, eta_max: float, tau: float = 1440.0, atol: float = 1e-7):
    """Interpolant of ``eta -> RMST(S(. | eta), tau)`` accurate to ``atol`` minutes.

    RMST is a smooth function of the scalar linear predictor, so a cubic
    spline on a grid refined until the midpoint error is below ``atol``
    replaces the per-row sum over event times.
    """
    lo, hi = float(eta_min), float(eta_max)
    if hi - lo < 1e-12:
        val = float(rmst_at_eta(fit, [lo], tau)[0])
        return lambda e: np.full(np.shape(e), val)
    pad = 1e-6 * (hi - lo) + 1e-9
    lo, hi = lo - pad, hi + pad
    n = 65
    while True:
        grid = np.linspace(lo, hi, n)
        spline = CubicSpline(grid, rmst_at_eta(fit, grid, tau))
        mid = 0.5 * (grid[1:] + grid[:-1])
        err = np.max(np.abs(spline(mid) - rmst_at_eta(fit, mid, tau)))
        if err <= atol or n > 40000:
            break
        n = 2 * n - 1
    return spline
