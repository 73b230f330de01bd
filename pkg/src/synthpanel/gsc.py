"""Generalized synthetic control with interactive fixed effects.

Donor outcomes follow ``Y_it = mu + a_i + x_t + l_i'f_t + e_it``. The model is
fit on donors only by alternating least squares (two-way demeaning, then a
rank-``r`` SVD of the residual). The treated unit's loadings and offset come
from its pre-period path, and the counterfactual is extended over all
periods.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import rng as rngmod
from .errors import CollinearFactors, InsufficientPrePeriods, NonConvergence, RankDeficient
from .panel import BalancedPanel

__all__ = [
    "FactorModel",
    "BootstrapConfig",
    "BootstrapResult",
    "GscFit",
    "GscInTime",
    "fit_ife",
    "select_factors",
    "project_loadings",
    "counterfactual",
    "gsc_fit",
    "bootstrap_ci",
    "gsc_in_time_placebo",
]

ALS_TOL = 1e-9
ALS_MAX_ITER = 2000


@dataclass(frozen=True)
class FactorModel:
    grand_mean: float
    unit_effects: np.ndarray
    time_effects: np.ndarray
    factors: np.ndarray  # r x T, (1/T) F F' = I
    loadings: np.ndarray  # J x r, L'L diagonal and descending
    r: int
    sigma2: float
    iterations: int = 0
    converged: bool = True

    def fitted(self) -> np.ndarray:
        return (
            self.grand_mean
            + self.unit_effects[:, None]
            + self.time_effects[None, :]
            + self.loadings @ self.factors
        )


def _two_way(W: np.ndarray):
    mu = W.mean()
    return mu, W.mean(axis=1) - mu, W.mean(axis=0) - mu


def _top_r(E: np.ndarray, r: int):
    T = E.shape[1]
    U, s, Vt = np.linalg.svd(E, full_matrices=False)
    F = math.sqrt(T) * Vt[:r]
    L = U[:, :r] * (s[:r] / math.sqrt(T))
    flip = np.where(F.sum(axis=1) < 0, -1.0, 1.0)
    return F * flip[:, None], L * flip[None, :]


def fit_ife(Y, r: int, tol: float = ALS_TOL, max_iter: int = ALS_MAX_ITER) -> FactorModel:
    """Interactive fixed effects by alternating least squares.

    Iterates until the relative drop in the sum of squared residuals is below
    ``tol``. Hitting ``max_iter`` returns the last iterate with
    ``converged=False`` and emits a :class:`~synthpanel.errors.NonConvergence`
    warning.
    """
    Y = np.asarray(Y, dtype=float)
    J, T = Y.shape
    if r < 0 or r >= min(J, T):
        raise RankDeficient(f"r={r} needs r < min(J, T) = {min(J, T)}")
    mu, a, x = _two_way(Y)
    E = Y - mu - a[:, None] - x[None, :]
    if r == 0:
        ssr = float((E * E).sum())
        return FactorModel(mu, a, x, np.zeros((0, T)), np.zeros((J, 0)), 0, ssr / (J * T), 1, True)

    floor = 1e-26 * max(float((Y * Y).sum()), 1e-300)
    F, L = _top_r(E, r)
    ssr_old = math.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu, a, x = _two_way(Y - L @ F)
        E = Y - mu - a[:, None] - x[None, :]
        F, L = _top_r(E, r)
        R = E - L @ F
        ssr = float((R * R).sum())
        if ssr <= floor or (math.isfinite(ssr_old) and ssr_old - ssr <= tol * ssr_old):
            converged = True
            break
        ssr_old = ssr
    if not converged:
        warnings.warn(f"ALS did not converge in {max_iter} iterations (r={r})", NonConvergence, stacklevel=2)
    return FactorModel(mu, a, x, F, L, r, ssr / (J * T), it, converged)


def project_loadings(model: FactorModel, treated_pre) -> tuple[np.ndarray, float]:
    """Treated loadings and unit offset from the pre-period path.

    Least squares of the treated pre-period outcome net of grand mean and time
    effects on an intercept and the pre-period factors. The intercept is the
    treated unit effect, so the pre-period gap has mean zero.
    """
    y = np.asarray(treated_pre, dtype=float)
    n = y.size
    if n <= model.r:
        raise InsufficientPrePeriods(f"{n} pre-periods cannot identify {model.r} loadings")
    resid = y - model.grand_mean - model.time_effects[:n]
    if model.r == 0:
        return np.zeros(0), float(resid.mean())
    X = np.column_stack([np.ones(n), model.factors[:, :n].T])
    coef, _, rank, sv = np.linalg.lstsq(X, resid, rcond=None)
    if rank < X.shape[1] or sv[-1] <= 1e-10 * sv[0]:
        raise CollinearFactors(f"pre-period factors are collinear (rank {rank} < {X.shape[1]})")
    return coef[1:], float(coef[0])


def counterfactual(model: FactorModel, loadings: np.ndarray, offset: float) -> np.ndarray:
    return model.grand_mean + offset + model.time_effects + loadings @ model.factors


def _predict(Y0: np.ndarray, y1: np.ndarray, n_pre: int, r: int) -> np.ndarray:
    model = fit_ife(Y0, r)
    lam, off = project_loadings(model, y1[:n_pre])
    return counterfactual(model, lam, off)


def select_factors(
    Y0, n_pre: int, r_max: int, rule: Literal["one_se", "min"] = "one_se"
) -> tuple[int, list[float]]:
    """Leave-one-donor-out cross-validation of the factor count.

    For each candidate ``r`` every donor is held out in turn, the model is fit
    on the others, the held-out donor is projected from its pre-period, and
    its post-period prediction error is scored. Returns the chosen ``r`` and
    the mean score per candidate.

    ``rule="min"`` takes the smallest mean score (exact ties go to the
    smaller ``r``). ``rule="one_se"`` takes the smallest ``r`` whose score is
    within one standard error of that minimum, treating differences the
    held-out donors cannot resolve as ties.
    """
    Y0 = np.asarray(Y0, dtype=float)
    J, T = Y0.shape
    if r_max < 0:
        raise ValueError("r_max must be nonnegative")
    if r_max >= min(J, T) - 1:
        raise RankDeficient(f"r_max={r_max} needs r_max < min(J, T) - 1 = {min(J, T) - 1}")
    if rule not in ("one_se", "min"):
        raise ValueError(f"unknown selection rule {rule!r}")
    r_max = min(r_max, n_pre - 2)
    scores, ses = [], []
    for r in range(r_max + 1):
        errs = np.full(J, math.inf)
        for u in range(J):
            others = np.delete(Y0, u, axis=0)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", NonConvergence)
                try:
                    cf = _predict(others, Y0[u], n_pre, r)
                except CollinearFactors:
                    break
            e = Y0[u, n_pre:] - cf[n_pre:]
            errs[u] = float(e @ e) / e.size
        finite = bool(np.all(np.isfinite(errs)))
        scores.append(float(errs.mean()) if finite else math.inf)
        ses.append(float(errs.std(ddof=1) / math.sqrt(J)) if finite and J > 1 else 0.0)
    best = 0
    for r, s in enumerate(scores):
        if s < scores[best] * (1 - 1e-12):
            best = r
    if rule == "one_se" and math.isfinite(scores[best]):
        bound = scores[best] + ses[best]
        best = next(r for r, s in enumerate(scores) if s <= bound)
    return best, scores


# -- bootstrap -----------------------------------------------------------


@dataclass(frozen=True)
class BootstrapConfig:
    """Bootstrap settings.

    ``scheme="pseudo_treated"`` resamples donors and, in each replicate,
    holds out one resampled donor as a stand-in for the treated unit; its
    prediction error is the draw. ``scheme="donor"`` resamples donors, keeps
    the real treated unit, and takes percentiles of the refit ATT.
    """

    replications: int = 500
    seed: int = 0
    level: float = 0.95
    scheme: Literal["pseudo_treated", "donor"] = "pseudo_treated"

    def __post_init__(self):
        if self.replications < 100:
            raise ValueError("bootstrap needs at least 100 replications")
        if not 0 < self.level < 1:
            raise ValueError("level must lie in (0, 1)")
        if self.scheme not in ("pseudo_treated", "donor"):
            raise ValueError(f"unknown bootstrap scheme {self.scheme!r}")


@dataclass(frozen=True)
class BootstrapResult:
    att_low: np.ndarray
    att_high: np.ndarray
    average_low: float
    average_high: float
    p_value: float
    draws: np.ndarray  # replications x n_post
    redraws: int


def _replicate(args):
    Y0, y1, n_pre, r, seed, b, scheme = args
    J = Y0.shape[0]
    gen = rngmod.stream(seed, "gsc.bootstrap", b)
    redraws = 0
    need = r + 2
    while True:
        idx = gen.integers(0, J, J)
        if scheme == "donor":
            if np.unique(idx).size >= need:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", NonConvergence)
                    cf = _predict(Y0[idx], y1, n_pre, r)
                return y1[n_pre:] - cf[n_pre:], redraws
        else:
            distinct = np.unique(idx)
            if distinct.size >= need + 1:
                u = distinct[gen.integers(distinct.size)]
                rest = idx[idx != u]
                if np.unique(rest).size >= need:
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", NonConvergence)
                        cf = _predict(Y0[rest], Y0[u], n_pre, r)
                    return Y0[u, n_pre:] - cf[n_pre:], redraws
        redraws += 1
        if redraws > 1000:
            raise RankDeficient(f"could not draw a resample with {need} distinct donors")


def bootstrap_ci(
    Y0, y1, n_pre: int, r: int, boot: BootstrapConfig, att: np.ndarray | None = None, jobs: int = 1
) -> BootstrapResult:
    """Per-period and average-ATT intervals plus a two-sided p-value.

    Replicate ``b`` draws from the stream ``(seed, "gsc.bootstrap", b)``, so
    results do not depend on ``jobs``. The p-value is twice the smaller tail
    share of the bootstrap average-ATT distribution on either side of zero.
    """
    Y0 = np.asarray(Y0, dtype=float)
    y1 = np.asarray(y1, dtype=float)
    if att is None:
        att = y1[n_pre:] - _predict(Y0, y1, n_pre, r)[n_pre:]
    tasks = [(Y0, y1, n_pre, r, boot.seed, b, boot.scheme) for b in range(boot.replications)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_replicate, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        results = [_replicate(t) for t in tasks]
    draws = np.vstack([d for d, _ in results])
    redraws = sum(n for _, n in results)
    lo_q, hi_q = (1 - boot.level) / 2, (1 + boot.level) / 2
    if boot.scheme == "donor":
        dist = draws
        avg = dist.mean(axis=1)
        att_low, att_high = np.quantile(dist, lo_q, axis=0), np.quantile(dist, hi_q, axis=0)
        a_low, a_high = np.quantile(avg, [lo_q, hi_q])
    else:
        # draws are prediction errors; invert them around the point estimate
        att_low = att - np.quantile(draws, hi_q, axis=0)
        att_high = att - np.quantile(draws, lo_q, axis=0)
        err = draws.mean(axis=1)
        avg = att.mean() - err
        a_low = att.mean() - np.quantile(err, hi_q)
        a_high = att.mean() - np.quantile(err, lo_q)
    # draws within rounding of zero count on both sides
    tol = 1e-10 * max(1.0, float(np.abs(y1).max()))
    p = min(1.0, 2.0 * min(float(np.mean(avg <= tol)), float(np.mean(avg >= -tol))))
    return BootstrapResult(att_low, att_high, float(a_low), float(a_high), p, draws, redraws)


# -- pipeline ------------------------------------------------------------


@dataclass(frozen=True)
class GscFit:
    outcome: str
    periods: tuple[int, ...]
    n_pre: int
    model: FactorModel
    treated_loadings: np.ndarray
    unit_offset: float
    treated_series: np.ndarray
    counterfactual_series: np.ndarray
    att_path: np.ndarray
    average_att: float
    att_low: np.ndarray | None = None
    att_high: np.ndarray | None = None
    average_low: float = math.nan
    average_high: float = math.nan
    p_value: float = math.nan
    cv_scores: list[float] | None = None
    boot: BootstrapConfig | None = None
    boot_redraws: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def r(self) -> int:
        return self.model.r

    @property
    def post_periods(self) -> tuple[int, ...]:
        return self.periods[self.n_pre :]

    def to_dict(self) -> dict:
        m = self.model
        return {
            "outcome": self.outcome,
            "r": m.r,
            "cv_scores": self.cv_scores,
            "model": {
                "grand_mean": m.grand_mean,
                "sigma2": m.sigma2,
                "iterations": m.iterations,
                "converged": m.converged,
                "loadings_norms": np.diag(m.loadings.T @ m.loadings).tolist(),
            },
            "treated_loadings": self.treated_loadings.tolist(),
            "unit_offset": self.unit_offset,
            "average_att": self.average_att,
            "average_ci": [self.average_low, self.average_high],
            "p_value": self.p_value,
            "bootstrap": None
            if self.boot is None
            else {
                "replications": self.boot.replications,
                "seed": self.boot.seed,
                "level": self.boot.level,
                "scheme": self.boot.scheme,
                "redraws": self.boot_redraws,
            },
            "att_path": {
                "period": list(self.post_periods),
                "att": self.att_path.tolist(),
                "ci_low": None if self.att_low is None else self.att_low.tolist(),
                "ci_high": None if self.att_high is None else self.att_high.tolist(),
            },
        }

    def plot_rows(self) -> list[tuple]:
        rows = []
        for i, p in enumerate(self.periods):
            j = i - self.n_pre
            post = j >= 0
            rows.append((
                p,
                float(self.treated_series[i]),
                float(self.counterfactual_series[i]),
                float(self.treated_series[i] - self.counterfactual_series[i]),
                float(self.att_low[j]) if post and self.att_low is not None else math.nan,
                float(self.att_high[j]) if post and self.att_high is not None else math.nan,
            ))
        return rows


def gsc_fit(
    panel: BalancedPanel,
    outcome: str,
    r: int | Literal["auto"] = "auto",
    boot: BootstrapConfig | None = None,
    r_max: int = 5,
    jobs: int = 1,
    rule: Literal["one_se", "min"] = "one_se",
) -> GscFit:
    Y = panel.matrix(outcome)
    Y0, y1 = Y[1:], Y[0]
    n_pre = panel.n_pre
    cv = None
    if r == "auto":
        J, T = Y0.shape
        r, cv = select_factors(Y0, n_pre, min(r_max, min(J, T) - 2, n_pre - 2), rule)
    model = fit_ife(Y0, int(r))
    lam, off = project_loadings(model, y1[:n_pre])
    cf = counterfactual(model, lam, off)
    att = y1[n_pre:] - cf[n_pre:]
    out = dict(
        outcome=outcome,
        periods=panel.periods,
        n_pre=n_pre,
        model=model,
        treated_loadings=lam,
        unit_offset=off,
        treated_series=y1.copy(),
        counterfactual_series=cf,
        att_path=att,
        average_att=float(att.mean()),
        cv_scores=cv,
        boot=boot,
    )
    if boot is not None:
        b = bootstrap_ci(Y0, y1, n_pre, int(r), boot, att=att, jobs=jobs)
        out.update(
            att_low=b.att_low,
            att_high=b.att_high,
            average_low=b.average_low,
            average_high=b.average_high,
            p_value=b.p_value,
            boot_redraws=b.redraws,
        )
    return GscFit(**out)


@dataclass(frozen=True)
class GscInTime:
    pseudo_t0: int
    average_att: float
    p_value: float
    anticipation_flag: bool
    fit: GscFit


def gsc_in_time_placebo(
    panel: BalancedPanel,
    outcome: str,
    backdate: int,
    r: int,
    boot: BootstrapConfig,
    alpha: float = 0.05,
    jobs: int = 1,
) -> GscInTime:
    """Backdate treatment by ``backdate`` periods on data truncated at the true t0.

    A pseudo-effect p-value at or below ``alpha`` flags a possible
    anticipation effect for the outcome.
    """
    if backdate < 1:
        raise ValueError("backdate must be at least 1")
    if panel.n_pre - backdate <= r + 2:
        raise InsufficientPrePeriods(
            f"{panel.n_pre} pre-periods minus backdate {backdate} must exceed r + 2 = {r + 2}"
        )
    truncated = panel.truncate(panel.t0, t0=panel.t0 - backdate)
    fit = gsc_fit(truncated, outcome, r=r, boot=boot, jobs=jobs)
    return GscInTime(truncated.t0, fit.average_att, fit.p_value, bool(fit.p_value <= alpha), fit)
