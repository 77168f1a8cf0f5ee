"""Exception hierarchy.

Every error raised by the library derives from :class:`CBIError`.  The two
intermediate classes tell the command-line front end which exit code to use:
:class:`ValidationError` maps to exit code 1 and :class:`NumericalError`
maps to exit code 2.
"""

from __future__ import annotations


class CBIError(Exception):
    """Base class for all library errors."""


class ValidationError(CBIError):
    """Invalid input: parameters, configuration or data."""


class NumericalError(CBIError):
    """A computation could not be carried out reliably."""


# --- model -----------------------------------------------------------------
class InvalidParameter(ValidationError):
    """A scalar or matrix parameter violates admissibility."""


class InvalidMeasureAtom(ValidationError):
    """A jump-measure atom has a zero location, a negative coordinate or a
    nonpositive weight."""


class NotDoublySymmetric(ValidationError):
    """The modified branching matrix does not have equal diagonal and equal
    off-diagonal entries."""


class NotIrreducible(ValidationError):
    """The off-diagonal entry kappa of the modified branching matrix is not
    strictly positive."""


class NonPositiveEigenvalue(ValidationError):
    """An eigenvalue argument of the parameter transform is not positive."""


class NotCritical(ValidationError):
    """A critical-case formula was requested for a non-critical model."""


# --- mechanisms ------------------------------------------------------------
class StepUnderflow(NumericalError):
    """The ODE solution left the nonnegative orthant by more than the
    clamping tolerance."""


# --- moments ---------------------------------------------------------------
class QuadratureMismatch(NumericalError):
    """Closed-form and quadrature evaluations of a moment matrix disagree."""


# --- simulate --------------------------------------------------------------
class NotPureImmigration(ValidationError):
    """The exact sampler needs c = 0 and empty branching measures."""


class InvalidStep(ValidationError):
    """A step size is outside (0, 1] or its reciprocal is not an integer."""


class DegenerateDenominator(NumericalError):
    """The denominator of the limit functional is numerically zero."""


# --- estimate --------------------------------------------------------------
class EstimatorUndefined(NumericalError):
    """The conditional least squares estimator does not exist on this sample.

    Parameters
    ----------
    which : tuple of str
        Names of the existence flags that failed (``"H"`` and/or
        ``"Htilde"``).
    """

    def __init__(self, which):
        self.which = tuple(which)
        super().__init__("existence condition(s) failed: " + ", ".join(self.which))


class NonPositiveEstimate(NumericalError):
    """An eigenvalue estimate is not positive, so it cannot be log-transformed."""


# --- cli -------------------------------------------------------------------
class ConfigError(ValidationError):
    """Base class for configuration file problems.

    Parameters
    ----------
    message : str
    key : str, optional
        The offending key.
    line : int, optional
        1-based line number in the configuration text.
    """

    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class UnknownKey(ConfigError):
    """A key that is not part of the configuration schema."""


class MissingKey(ConfigError):
    """A required key is absent."""


class ConfigTypeError(ConfigError):
    """A value cannot be parsed as the required type."""
