"""Exception types shared across the package."""


class TiltcrmError(Exception):
    """Base class for package errors."""


class TruncationUnderflow(TiltcrmError):
    """Atom weight fell below the representable floor during tail inversion.

    Callers treat the Ferguson-Klass atom series as exhausted at this point.
    """


class MeanOutOfRange(TiltcrmError):
    """Requested mean lies outside the open convex hull of the atom locations.

    Signals that g^{-1}(x'beta) is unattainable under the current measure;
    MCMC kernels treat the implicated proposal as rejected.
    """


class ConfigError(TiltcrmError):
    """Invalid run configuration."""


class DataError(TiltcrmError):
    """Malformed or out-of-support input data."""


class NumericalError(TiltcrmError):
    """Non-finite intermediate result (quadrature or root-finding failure)."""
