"""Outcome transforms and the first-principal-component index."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Mapping, Sequence

import numpy as np

from .errors import DegenerateCovariance, NonPositiveValue, ZeroVarianceColumn
from .panel import BalancedPanel

__all__ = [
    "TransformSpec",
    "PrincipalComponentResult",
    "apply_transform",
    "transform_panel",
    "zscore_columns",
    "first_principal_component",
    "add_principal_component",
]

Kind = Literal["identity", "log", "log_normalized", "zscore"]


@dataclass(frozen=True)
class TransformSpec:
    """How to transform one outcome series.

    ``log_normalized`` is the natural log of the level series divided by
    ``base`` (``base`` defaults to 1, i.e. a plain log of levels). ``offset``
    is added before any log and defaults to 0, so non-positive inputs are
    rejected unless the caller opts into a shift.
    """

    kind: Kind = "identity"
    base: float | None = None
    offset: float = 0.0

    def __post_init__(self):
        if self.kind not in ("identity", "log", "log_normalized", "zscore"):
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.base is not None and not self.base > 0:
            raise ValueError("normalization base must be positive")


def apply_transform(series, spec: TransformSpec, periods: Sequence[int] | None = None) -> np.ndarray:
    x = np.asarray(series, dtype=float)
    if spec.kind == "identity":
        return x.copy()
    if spec.kind == "zscore":
        sd = x.std(ddof=1) if x.size > 1 else 0.0
        if not sd > 0:
            raise ZeroVarianceColumn("series has zero variance")
        return (x - x.mean()) / sd
    shifted = x + spec.offset
    bad = np.nonzero(~(shifted > 0))[0]
    if bad.size:
        where = [periods[i] for i in bad] if periods is not None else bad.tolist()
        raise NonPositiveValue(f"{spec.kind} transform needs positive values; offending period(s): {where}")
    if spec.kind == "log_normalized" and spec.base is not None:
        shifted = shifted / spec.base
    return np.log(shifted)


def transform_panel(panel: BalancedPanel, specs: Mapping[str, TransformSpec]) -> BalancedPanel:
    """Apply per-outcome transforms to every unit's series."""
    new = {}
    for name, spec in specs.items():
        mat = panel.matrix(name)
        try:
            new[name] = np.vstack([apply_transform(row, spec, panel.periods) for row in mat])
        except NonPositiveValue as exc:
            raise NonPositiveValue(f"outcome {name!r}: {exc}") from None
    return panel.with_outcomes(new)


def zscore_columns(matrix) -> np.ndarray:
    m = np.asarray(matrix, dtype=float)
    sd = m.std(axis=0, ddof=1)
    zero = np.nonzero(~(sd > 0))[0]
    if zero.size:
        raise ZeroVarianceColumn(f"column(s) {zero.tolist()} have zero variance")
    return (m - m.mean(axis=0)) / sd


@dataclass(frozen=True)
class PrincipalComponentResult:
    scores: np.ndarray
    loadings: np.ndarray
    explained_variance_ratio: float


def _orient(v: np.ndarray) -> np.ndarray:
    s = v.sum()
    if abs(s) > 1e-12:
        return v if s > 0 else -v
    # loadings sum to zero: make the first nonzero entry positive
    nz = np.nonzero(np.abs(v) > 1e-12)[0]
    return v if v[nz[0]] > 0 else -v


def first_principal_component(indicators) -> PrincipalComponentResult:
    """Top eigenvector of the correlation matrix and the matching scores.

    Rows are observations, columns are indicators. Loadings have unit norm
    and are oriented so they sum to a nonnegative number.
    """
    x = np.asarray(indicators, dtype=float)
    n, k = x.shape
    if k < 2:
        raise ValueError("need at least two indicators")
    if n < k + 1:
        raise ValueError(f"need at least {k + 1} observations for {k} indicators, got {n}")
    z = zscore_columns(x)
    corr = z.T @ z / (n - 1)
    vals, vecs = np.linalg.eigh(corr)
    top = vals[-1]
    if not top > 1e-12:
        raise DegenerateCovariance("correlation matrix has rank 0")
    loadings = _orient(vecs[:, -1] / np.linalg.norm(vecs[:, -1]))
    ratio = float(min(1.0, top / np.trace(corr)))
    return PrincipalComponentResult(z @ loadings, loadings, ratio)


def add_principal_component(
    panel: BalancedPanel, indicators: Sequence[str], name: str
) -> tuple[BalancedPanel, PrincipalComponentResult]:
    """Pool all unit-periods, fit one loading vector, and add the scores as outcome ``name``."""
    stacked = np.column_stack([panel.matrix(o).ravel() for o in indicators])
    pc = first_principal_component(stacked)
    shape = (len(panel.units), len(panel.periods))
    return panel.with_outcomes({name: pc.scores.reshape(shape)}), pc
