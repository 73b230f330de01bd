"""Translate log gaps into proportional and level losses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import NonPositiveBaseline

__all__ = ["MagnitudeInput", "MagnitudeResult", "translate_magnitude"]


@dataclass(frozen=True)
class MagnitudeInput:
    """A log gap path (or one average gap held for ``horizon`` years) and a level baseline.

    ``baseline`` is the counterfactual level per year, either one number or
    one value per year.
    """

    gaps: float | Sequence[float]
    baseline: float | Sequence[float]
    horizon: int | None = None


@dataclass(frozen=True)
class MagnitudeResult:
    pct_loss: np.ndarray
    average_pct_loss: float
    annual_loss: np.ndarray
    cumulative_loss: float

    def to_dict(self) -> dict:
        return {
            "pct_loss": self.pct_loss.tolist(),
            "average_pct_loss": self.average_pct_loss,
            "annual_loss": self.annual_loss.tolist(),
            "cumulative_loss": self.cumulative_loss,
        }


def translate_magnitude(m: MagnitudeInput) -> MagnitudeResult:
    """Proportional shortfall ``1 - exp(gap)`` per year, its level, and the running total.

    Positive gaps give negative losses (a level gain); the sign is kept
    rather than clipped.
    """
    if np.ndim(m.gaps) == 0:
        if m.horizon is None or m.horizon < 1:
            raise ValueError("a scalar gap needs a positive horizon in years")
        gaps = np.full(int(m.horizon), float(m.gaps))
    else:
        gaps = np.asarray(m.gaps, dtype=float)
        if m.horizon is not None:
            gaps = gaps[: m.horizon]
    base = np.broadcast_to(np.asarray(m.baseline, dtype=float), gaps.shape)
    if np.any(~(base > 0)):
        raise NonPositiveBaseline("counterfactual baseline must be positive")
    pct = -np.expm1(gaps)
    annual = base * pct
    return MagnitudeResult(pct, float(pct.mean()), annual, float(annual.sum()))
