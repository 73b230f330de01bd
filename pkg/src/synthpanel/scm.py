"""Synthetic control estimator.

Weights solve ``min_w (x1 - X0 w)' V (x1 - X0 w)`` over the unit simplex for a
diagonal ``V``; ``V`` itself is chosen to minimize the pre-treatment outcome
MSPE of the resulting synthetic unit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
from scipy.optimize import minimize

from . import rng as rngmod
from .errors import (
    EmptyPeriodSet,
    EmptyPredictorSet,
    NumericalFailure,
    ZeroVarianceTreated,
)
from .panel import BalancedPanel

__all__ = [
    "PredictorEntry",
    "PredictorMatrices",
    "WeightVector",
    "VMatrix",
    "FitDiagnostics",
    "ScmFit",
    "EffectSummary",
    "build_predictors",
    "standardize_predictors",
    "solve_weights",
    "weights_objective",
    "optimize_v",
    "fit",
    "rmspe",
    "fit_diagnostics",
    "effect_summary",
]

MAX_ITER = 10_000
REL_TOL = 1e-10


@dataclass(frozen=True)
class PredictorEntry:
    """One block of predictors.

    ``outcome=None`` means the outcome being fitted. ``periods=None`` means
    every pre-treatment period. ``aggregation="each"`` yields one predictor
    per period, ``"mean"`` a single predictor averaging them.
    """

    outcome: str | None = None
    periods: tuple[int, ...] | None = None
    aggregation: Literal["each", "mean"] = "each"


@dataclass(frozen=True)
class PredictorMatrices:
    x1: np.ndarray
    x0: np.ndarray
    labels: tuple[str, ...]
    donors: tuple[str, ...]


@dataclass(frozen=True)
class WeightVector:
    weights: np.ndarray
    donors: tuple[str, ...]
    objective: float = math.nan
    iterations: int = 0

    def as_dict(self) -> dict[str, float]:
        return {d: float(w) for d, w in zip(self.donors, self.weights)}


@dataclass(frozen=True)
class VMatrix:
    diagonal: np.ndarray

    @classmethod
    def uniform(cls, k: int) -> "VMatrix":
        return cls(np.full(k, 1.0 / k))

    def __post_init__(self):
        d = np.asarray(self.diagonal, dtype=float)
        if d.ndim != 1 or d.size == 0 or np.any(d < 0) or not d.sum() > 0:
            raise ValueError("V diagonal must be a nonempty nonnegative vector with positive sum")
        object.__setattr__(self, "diagonal", d / d.sum())


@dataclass(frozen=True)
class FitDiagnostics:
    rmspe_pre: float
    avg_control_bias_pct: float
    sc_bias_pct: float
    r2_pre: float


@dataclass(frozen=True)
class EffectSummary:
    average_effect: float
    gap_sd: float
    end_of_sample_effect: float
    ci_low: float = math.nan
    ci_high: float = math.nan
    p_value: float = math.nan
    verdict: str | None = None


@dataclass(frozen=True)
class ScmFit:
    outcome: str
    periods: tuple[int, ...]
    t0: int
    weights: WeightVector
    v: VMatrix
    predictor_labels: tuple[str, ...]
    treated_series: np.ndarray
    synthetic_series: np.ndarray
    gap_series: np.ndarray
    diagnostics: FitDiagnostics
    mspe_pre: float
    treated_unit: str = ""
    n_pre: int = field(default=0)

    @property
    def pre_gaps(self) -> np.ndarray:
        return self.gap_series[: self.n_pre]

    @property
    def post_gaps(self) -> np.ndarray:
        return self.gap_series[self.n_pre :]

    def to_dict(self) -> dict:
        d = self.diagnostics
        return {
            "outcome": self.outcome,
            "treated_unit": self.treated_unit,
            "t0": self.t0,
            "weights": self.weights.as_dict(),
            "v": dict(zip(self.predictor_labels, map(float, self.v.diagonal))),
            "mspe_pre": self.mspe_pre,
            "diagnostics": {
                "rmspe_pre": d.rmspe_pre,
                "avg_control_bias_pct": d.avg_control_bias_pct,
                "sc_bias_pct": d.sc_bias_pct,
                "r2_pre": d.r2_pre,
            },
            "series": {
                "period": list(self.periods),
                "treated": self.treated_series.tolist(),
                "synthetic": self.synthetic_series.tolist(),
                "gap": self.gap_series.tolist(),
            },
        }

    def gap_rows(self) -> list[tuple[int, float, float, float]]:
        return [
            (p, float(a), float(s), float(g))
            for p, a, s, g in zip(self.periods, self.treated_series, self.synthetic_series, self.gap_series)
        ]


# -- predictors ----------------------------------------------------------


def build_predictors(
    panel: BalancedPanel, outcome: str, spec: Sequence[PredictorEntry] | None = None
) -> PredictorMatrices:
    if spec is None:
        spec = [PredictorEntry()]
    if len(spec) == 0:
        raise EmptyPredictorSet("predictor list is empty")
    pre = set(panel.pre_periods)
    rows1, rows0, labels = [], [], []
    for entry in spec:
        name = entry.outcome or outcome
        mat = panel.matrix(name)
        periods = panel.pre_periods if entry.periods is None else tuple(entry.periods)
        if not periods:
            raise EmptyPredictorSet(f"predictor block for {name!r} selects no periods")
        late = [p for p in periods if p not in pre]
        if late:
            raise EmptyPredictorSet(f"predictor periods {late} for {name!r} are not pre-treatment periods")
        idx = [panel.period_index(p) for p in periods]
        if entry.aggregation == "each":
            for p, i in zip(periods, idx):
                rows1.append(mat[0, i])
                rows0.append(mat[1:, i])
                labels.append(f"{name}@{p}" if name != outcome else str(p))
        elif entry.aggregation == "mean":
            rows1.append(mat[0, idx].mean())
            rows0.append(mat[1:, idx].mean(axis=1))
            labels.append(f"mean({name},{periods[0]}-{periods[-1]})")
        else:
            raise ValueError(f"unknown aggregation {entry.aggregation!r}")
    x1 = np.array(rows1, dtype=float)
    x0 = np.vstack(rows0).astype(float)
    if not (np.all(np.isfinite(x1)) and np.all(np.isfinite(x0))):
        raise EmptyPredictorSet("predictors contain non-finite values")
    return PredictorMatrices(x1, x0, tuple(labels), panel.donors)


def standardize_predictors(pred: PredictorMatrices) -> tuple[PredictorMatrices, np.ndarray]:
    """Divide each predictor row by its donor standard deviation (rows with none are left as is)."""
    sd = pred.x0.std(axis=1, ddof=1) if pred.x0.shape[1] > 1 else np.ones(pred.x1.size)
    sd = np.where(sd > 0, sd, 1.0)
    return PredictorMatrices(pred.x1 / sd, pred.x0 / sd[:, None], pred.labels, pred.donors), sd


# -- inner solve ---------------------------------------------------------


def weights_objective(pred: PredictorMatrices, v: VMatrix, w) -> float:
    r = pred.x1 - pred.x0 @ np.asarray(w, dtype=float)
    return float(r @ (v.diagonal * r))


def _eq_lstsq(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimize ||A z - b|| subject to sum(z) = 1 (no sign constraint)."""
    m = A.shape[1]
    if m == 1:
        return np.ones(1)
    z0 = np.full(m, 1.0 / m)
    # orthonormal basis of {z : sum z = 0}
    basis = np.linalg.qr(np.vstack([np.eye(m - 1), -np.ones((1, m - 1))]))[0]
    y = np.linalg.lstsq(A @ basis, b - A @ z0, rcond=None)[0]
    return z0 + basis @ y


def _simplex_lstsq(A: np.ndarray, b: np.ndarray, max_iter: int = MAX_ITER, rtol: float = REL_TOL):
    """Active-set solver for ``min ||A w - b||^2`` over the unit simplex.

    Returns ``(w, iterations)``. Works on row-centered data: shifting a row of
    ``A`` and ``b`` by the same constant does not change the residual when the
    weights sum to one, and centering keeps rounding noise proportional to
    the spread of the predictors rather than their level.
    """
    center = A.mean(axis=1)
    A = A - center[:, None]
    b = b - center
    k, J = A.shape
    scale = np.linalg.norm(A) * (np.linalg.norm(A) + np.linalg.norm(b))
    gtol_abs = 1e-11 * scale + 1e-300

    resid = A - b[:, None]
    j0 = int(np.argmin(np.einsum("ij,ij->j", resid, resid)))
    w = np.zeros(J)
    w[j0] = 1.0
    active = [j0]
    it = 0
    while True:
        r = A @ w - b
        g = A.T @ r
        c = float(g @ w)
        f = 0.5 * float(r @ r)
        free = np.ones(J, dtype=bool)
        free[active] = False
        if not free.any():
            break
        cand = np.nonzero(free)[0]
        j = int(cand[np.argmin(g[cand])])
        if g[j] >= c - (rtol * f + gtol_abs):
            break
        it += 1
        if it > max_iter:
            raise NumericalFailure("simplex weight solve did not converge", it, float(np.linalg.norm(g)))
        active.append(j)
        # inner Lawson-Hanson loop: re-solve on the active set, stepping back to feasibility
        while True:
            it += 1
            if it > max_iter:
                raise NumericalFailure("simplex weight solve did not converge", it, float(np.linalg.norm(g)))
            act = np.array(active)
            z = _eq_lstsq(A[:, act], b)
            if np.all(z > 0):
                w = np.zeros(J)
                w[act] = z
                break
            wa = w[act]
            neg = z <= 0
            ratios = np.full(act.size, np.inf)
            ratios[neg] = wa[neg] / (wa[neg] - z[neg])
            alpha = float(ratios.min())
            if alpha <= 0.0 and w[j] == 0.0 and j in active:
                # entering variable would leave immediately: take an exact
                # line-search step toward its vertex instead
                d = -w.copy()
                d[j] += 1.0
                Ad = A @ d
                den = float(Ad @ Ad)
                gamma = 1.0 if den <= 0 else min(1.0, max(0.0, -float((A @ w - b) @ Ad) / den))
                w = w + gamma * d
                w[w < 0] = 0.0
                active = [i for i in active if w[i] > 0]
                break
            wa = wa + alpha * (z - wa)
            wa[np.argmin(ratios)] = 0.0
            wa[wa < 0] = 0.0
            w = np.zeros(J)
            w[act] = wa
            active = [int(i) for i in act[wa > 0]]
            if not active:
                active = [j0]
                w[j0] = 1.0
                break
    w = np.clip(w, 0.0, None)
    return w / w.sum(), it


def solve_weights(pred: PredictorMatrices, v: VMatrix | None = None) -> WeightVector:
    """Simplex-constrained weights for a fixed ``V``; deterministic."""
    k = pred.x1.size
    if v is None:
        v = VMatrix.uniform(k)
    sv = np.sqrt(v.diagonal)
    keep = sv > 0
    A = (sv[:, None] * pred.x0)[keep]
    b = (sv * pred.x1)[keep]
    w, it = _simplex_lstsq(A, b)
    return WeightVector(w, pred.donors, weights_objective(pred, v, w), it)


# -- outer V search ------------------------------------------------------


def _softmax(u: np.ndarray) -> np.ndarray:
    z = np.append(u, 0.0)
    z = np.exp(z - z.max())
    return z / z.sum()


def _row_scale(panel: BalancedPanel, outcome: str, pred: PredictorMatrices) -> np.ndarray | None:
    """Per-row factors ``s`` with ``pred = raw / s`` when ``pred`` is the full pre-period path, else None."""
    mat = panel.matrix(outcome)
    n = panel.n_pre
    raw1, raw0 = mat[0, :n], mat[1:, :n].T
    if pred.x0.shape != raw0.shape:
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.einsum("ij,ij->i", raw0, raw0) / np.einsum("ij,ij->i", raw0, pred.x0)
    if not np.all(np.isfinite(s)) or np.any(s <= 0):
        return None
    ok = np.allclose(pred.x0 * s[:, None], raw0, rtol=1e-12, atol=0) and np.allclose(pred.x1 * s, raw1, rtol=1e-12, atol=0)
    return s if ok else None


def optimize_v(
    panel: BalancedPanel,
    outcome: str,
    pred: PredictorMatrices,
    seed: int = 0,
    restarts: int = 20,
    search: Literal["auto", "full"] = "auto",
) -> tuple[VMatrix, WeightVector, float]:
    """Choose diagonal ``V`` by pre-period outcome MSPE.

    ``pred`` is used as given; :func:`fit` passes standardized predictors.
    Two fixed candidates are always scored: uniform ``V`` and the ``V`` that
    undoes the standardization (uniform weight on the raw predictors).
    Nelder-Mead then runs from ``restarts`` seeded starting points on a
    softmax parameterization. With ``search="auto"``, when the predictors
    are exactly the outcome's full pre-period path (up to row scaling) the
    raw-uniform candidate is already optimal, since its inner objective is
    the MSPE itself, and the search is skipped.

    Returns ``(V, W, mspe)``.
    """
    mat = panel.matrix(outcome)
    n = panel.n_pre
    y1 = mat[0, :n]
    y0 = mat[1:, :n]
    k = pred.x1.size

    def mspe(w: np.ndarray) -> float:
        gap = y1 - w @ y0
        return float(gap @ gap) / n

    scale = _row_scale(panel, outcome, pred)
    candidates = [VMatrix.uniform(k)]
    if scale is not None:
        candidates.insert(0, VMatrix(scale**2))
    v_best, w_best, m_best = None, None, math.inf
    for v in candidates:
        w = solve_weights(pred, v)
        m = mspe(w.weights)
        if m < m_best:
            v_best, w_best, m_best = v, w, m
    if k == 1 or (search == "auto" and scale is not None):
        return v_best, w_best, m_best

    def score(u: np.ndarray) -> float:
        return mspe(solve_weights(pred, VMatrix(_softmax(u))).weights)

    gen = rngmod.stream(seed, "scm.optimize_v")
    starts = [np.zeros(k - 1)] + [gen.normal(0.0, 1.5, k - 1) for _ in range(restarts)]
    for x0 in starts:
        res = minimize(
            score,
            x0,
            method="Nelder-Mead",
            options={"xatol": 1e-6, "fatol": 1e-14, "maxfev": 200 * k, "adaptive": k > 4},
        )
        if res.fun < m_best - 1e-15 * max(1.0, m_best):
            v = VMatrix(_softmax(res.x))
            w = solve_weights(pred, v)
            m = mspe(w.weights)
            if m < m_best:
                v_best, w_best, m_best = v, w, m
    return v_best, w_best, m_best


# -- fit -----------------------------------------------------------------


def rmspe(gaps) -> float:
    g = np.asarray(gaps, dtype=float)
    if g.size == 0:
        raise EmptyPeriodSet("RMSPE over an empty period set")
    return float(np.sqrt(np.mean(g * g)))


def _pct_bias(actual: np.ndarray, other: np.ndarray) -> float:
    num = np.abs(actual - other)
    den = np.abs(actual)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(num == 0, 0.0, num / den)
    return float(100.0 * ratio.mean())


def _diagnostics(y1: np.ndarray, synth: np.ndarray, y0: np.ndarray, n_pre: int) -> FitDiagnostics:
    a = y1[:n_pre]
    s = synth[:n_pre]
    gap = a - s
    sst = float(((a - a.mean()) ** 2).sum())
    if sst == 0:
        raise ZeroVarianceTreated("treated pre-period series is constant; R-squared undefined")
    ssr = float(gap @ gap)
    return FitDiagnostics(
        rmspe_pre=rmspe(gap),
        avg_control_bias_pct=_pct_bias(a, y0[:, :n_pre].mean(axis=0)),
        sc_bias_pct=_pct_bias(a, s),
        r2_pre=1.0 - ssr / sst,
    )


def fit_diagnostics(panel: BalancedPanel, outcome: str, fit: ScmFit) -> FitDiagnostics:
    return _diagnostics(fit.treated_series, fit.synthetic_series, panel.donor_matrix(outcome), panel.n_pre)


def fit(
    panel: BalancedPanel,
    outcome: str,
    spec: Sequence[PredictorEntry] | None = None,
    seed: int = 0,
    restarts: int = 20,
    search: Literal["auto", "full"] = "auto",
) -> ScmFit:
    pred, _ = standardize_predictors(build_predictors(panel, outcome, spec))
    v, w, m = optimize_v(panel, outcome, pred, seed=seed, restarts=restarts, search=search)
    mat = panel.matrix(outcome)
    y1 = mat[0].copy()
    synth = w.weights @ mat[1:]
    return ScmFit(
        outcome=outcome,
        periods=panel.periods,
        t0=panel.t0,
        weights=w,
        v=v,
        predictor_labels=pred.labels,
        treated_series=y1,
        synthetic_series=synth,
        gap_series=y1 - synth,
        diagnostics=_diagnostics(y1, synth, mat[1:], panel.n_pre),
        mspe_pre=m,
        treated_unit=panel.treated_unit,
        n_pre=panel.n_pre,
    )


def effect_summary(fit: ScmFit) -> EffectSummary:
    post = fit.post_gaps
    return EffectSummary(
        average_effect=float(post.mean()),
        gap_sd=float(post.std(ddof=1)) if post.size > 1 else 0.0,
        end_of_sample_effect=float(post[-1]),
    )
