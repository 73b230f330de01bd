"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line can map failures to
the documented process exit status without string matching.
"""

from __future__ import annotations


class SynthPanelError(Exception):
    exit_code = 2


class ConfigError(SynthPanelError):
    exit_code = 1


class DataError(SynthPanelError):
    exit_code = 2


class NumericalError(SynthPanelError):
    exit_code = 3


# --- ingestion -----------------------------------------------------------

class MalformedRow(DataError):
    pass


class NonNumericValue(DataError):
    pass


class DuplicateKey(DataError):
    pass


class UnbalancedPanel(DataError):
    def __init__(self, missing):
        self.missing = list(missing)
        shown = ", ".join(f"({u}, {p}, {o})" for u, p, o in self.missing[:20])
        more = "" if len(self.missing) <= 20 else f" ... (+{len(self.missing) - 20} more)"
        super().__init__(f"{len(self.missing)} missing cell(s) (unit, period, outcome): {shown}{more}")


class TreatedUnitMissing(DataError):
    pass


class InsufficientPrePeriods(DataError):
    pass


class NoPostPeriods(DataError):
    pass


class InsufficientDonors(DataError):
    pass


class UnknownOutcome(DataError):
    pass


# --- transforms ----------------------------------------------------------

class NonPositiveValue(DataError):
    pass


class ZeroVarianceColumn(DataError):
    pass


class DegenerateCovariance(NumericalError):
    pass


# --- estimation ----------------------------------------------------------

class EmptyPredictorSet(DataError):
    pass


class NumericalFailure(NumericalError):
    def __init__(self, message, iterations=None, grad_norm=None):
        self.iterations = iterations
        self.grad_norm = grad_norm
        if iterations is not None:
            message = f"{message} (iterations={iterations}, gradient norm={grad_norm:.3e})"
        super().__init__(message)


class EmptyPeriodSet(DataError):
    pass


class ZeroVarianceTreated(NumericalError):
    pass


class DegenerateDistributionError(NumericalError):
    pass


class TooFewPlacebos(DataError):
    pass


class RankDeficient(NumericalError):
    pass


class CollinearFactors(NumericalError):
    pass


class GridTooLarge(SynthPanelError):
    pass


# --- fetching ------------------------------------------------------------

class SourceUnreachable(DataError):
    pass


class UnknownSeriesCode(DataError):
    pass


class NonPositiveBaseline(DataError):
    pass


# --- warnings ------------------------------------------------------------

class DegenerateDistribution(UserWarning):
    """All permutation statistics tie; the p-value is set to 1."""


class NonConvergence(RuntimeWarning):
    """Alternating least squares hit its iteration cap."""


class EmptyValueWarning(UserWarning):
    """Rows with an empty value cell were skipped during ingestion."""
