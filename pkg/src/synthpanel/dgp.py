"""Seeded synthetic panels and brute-force oracles for testing the estimators."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Literal, Sequence

import numpy as np

from . import rng as rngmod
from .errors import GridTooLarge
from .panel import BalancedPanel, panel_from_arrays
from .scm import PredictorMatrices, VMatrix, WeightVector, weights_objective

__all__ = [
    "DgpSpec",
    "SimulatedPanel",
    "simulate_factor_panel",
    "simulate_convex_panel",
    "simulate",
    "oracle_grid_weights",
    "simplex_grid",
    "simulate_outcomes",
]

Mode = Literal["factor_model", "two_way_fe", "convex_combination"]


@dataclass(frozen=True)
class DgpSpec:
    """Panel generator settings.

    ``n_units`` counts the treated unit, which is ``unit_00``. ``effect`` is a
    scalar applied to every post period or one value per post period.
    """

    n_units: int = 13
    n_periods: int = 29
    first_period: int = 1996
    t0: int = 2006
    n_factors: int = 2
    factor_sd: float = 1.0
    loading_sd: float = 1.0
    unit_effect_sd: float = 1.0
    time_effect_sd: float = 0.1
    noise_sd: float = 0.05
    effect: float | tuple[float, ...] = 0.0
    mode: Mode = "factor_model"
    seed: int = 0
    outcome: str = "y"
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        for name in ("factor_sd", "loading_sd", "unit_effect_sd", "time_effect_sd", "noise_sd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not self.first_period + 1 <= self.t0 < self.first_period + self.n_periods - 1:
            raise ValueError("t0 must leave at least 2 pre and 1 post period")
        if not isinstance(self.effect, (int, float)) and len(self.effect) != self.n_post:
            raise ValueError(f"effect path needs {self.n_post} values, got {len(self.effect)}")

    @property
    def n_pre(self) -> int:
        return self.t0 - self.first_period + 1

    @property
    def n_post(self) -> int:
        return self.n_periods - self.n_pre

    @property
    def periods(self) -> list[int]:
        return list(range(self.first_period, self.first_period + self.n_periods))

    @property
    def units(self) -> list[str]:
        return [f"unit_{i:02d}" for i in range(self.n_units)]

    def effect_path(self) -> np.ndarray:
        if isinstance(self.effect, (int, float)):
            return np.full(self.n_post, float(self.effect))
        return np.asarray(self.effect, dtype=float)


@dataclass(frozen=True)
class SimulatedPanel:
    panel: BalancedPanel
    att: np.ndarray
    untreated: np.ndarray
    weights: np.ndarray | None = None
    extras: dict = field(default_factory=dict)


def _factor_grid(spec: DgpSpec, gen: np.random.Generator, n_units: int, n_factors: int):
    T = spec.n_periods
    alpha = gen.normal(0.0, spec.unit_effect_sd, n_units)
    xi = np.cumsum(gen.normal(0.0, spec.time_effect_sd, T))
    F = gen.normal(0.0, spec.factor_sd, (n_factors, T))
    L = gen.normal(0.0, spec.loading_sd, (n_units, n_factors))
    eps = gen.normal(0.0, spec.noise_sd, (n_units, T)) if spec.noise_sd > 0 else np.zeros((n_units, T))
    y = alpha[:, None] + xi[None, :] + L @ F + eps
    return y, {"unit_effects": alpha, "time_effects": xi, "factors": F, "loadings": L}


def simulate_factor_panel(spec: DgpSpec) -> SimulatedPanel:
    """``Y = a_i + x_t + l_i'f_t + effect (treated, post) + noise``."""
    gen = rngmod.stream(spec.seed, "dgp.factor")
    r = 0 if spec.mode == "two_way_fe" else spec.n_factors
    y, truth = _factor_grid(spec, gen, spec.n_units, r)
    untreated = y[0].copy()
    att = spec.effect_path()
    y[0, spec.n_pre :] += att
    panel = panel_from_arrays({spec.outcome: y}, spec.units, spec.periods, spec.units[0], spec.t0)
    return SimulatedPanel(panel, att, untreated, None, truth)


def simulate_convex_panel(spec: DgpSpec) -> SimulatedPanel:
    """Donors from the factor model; treated is an exact convex combination of them."""
    gen = rngmod.stream(spec.seed, "dgp.convex")
    J = spec.n_units - 1
    donors, truth = _factor_grid(spec, gen, J, spec.n_factors)
    if spec.weights is not None:
        w = np.asarray(spec.weights, dtype=float)
        if w.size != J or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
            raise ValueError("weights must be a length-J simplex point")
    else:
        w = rngmod.stream(spec.seed, "dgp.convex.weights").dirichlet(np.ones(J))
    treated = w @ donors
    untreated = treated.copy()
    att = spec.effect_path()
    treated = treated.copy()
    treated[spec.n_pre :] += att
    y = np.vstack([treated, donors])
    panel = panel_from_arrays({spec.outcome: y}, spec.units, spec.periods, spec.units[0], spec.t0)
    return SimulatedPanel(panel, att, untreated, w, truth)


def simulate(spec: DgpSpec) -> SimulatedPanel:
    if spec.mode == "convex_combination":
        return simulate_convex_panel(spec)
    return simulate_factor_panel(spec)


def simulate_outcomes(spec: DgpSpec, outcomes: Sequence[str]) -> BalancedPanel:
    """Several independently drawn outcomes sharing units and periods."""
    values = {}
    for i, name in enumerate(outcomes):
        sim = simulate(replace(spec, seed=spec.seed * 1009 + i, outcome=name))
        values[name] = sim.panel.matrix(name)
    return panel_from_arrays(values, spec.units, spec.periods, spec.units[0], spec.t0)


# -- grid oracle ---------------------------------------------------------


@lru_cache(maxsize=8)
def _grid(J: int, n: int) -> np.ndarray:
    if J == 1:
        return np.ones((1, 1))
    axes = np.meshgrid(*([np.arange(n + 1)] * (J - 1)), indexing="ij")
    head = np.stack([a.ravel() for a in axes], axis=1)
    head = head[head.sum(axis=1) <= n]
    pts = np.column_stack([head, n - head.sum(axis=1)])
    order = np.lexsort(pts.T[::-1])
    out = pts[order] / n
    out.setflags(write=False)
    return out


def simplex_grid(J: int, n: int) -> np.ndarray:
    """All points of the simplex with coordinates in multiples of ``1/n``, in lexicographic order."""
    return _grid(J, n)


def oracle_grid_weights(pred: PredictorMatrices, v: VMatrix | None = None, step: float = 0.01) -> WeightVector:
    """Exhaustive minimizer over the simplex grid; ties go to the lexicographically smallest point."""
    J = pred.x0.shape[1]
    if J > 4:
        raise GridTooLarge(f"grid oracle supports at most 4 donors, got {J}")
    if v is None:
        v = VMatrix.uniform(pred.x1.size)
    n = int(round(1.0 / step))
    pts = simplex_grid(J, n)
    resid = pred.x1[:, None] - pred.x0 @ pts.T
    obj = np.einsum("i,ij,ij->j", v.diagonal, resid, resid)
    best = int(np.argmin(obj))
    w = pts[best]
    return WeightVector(w, pred.donors, weights_objective(pred, v, w))
