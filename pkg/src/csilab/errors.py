"""Exception hierarchy; the CLI maps each class to an exit code."""


class ConfigError(ValueError):
    """Invalid configuration (exit code 2)."""


class NumericalError(ArithmeticError):
    """Singular or ill-conditioned numerics (exit code 3)."""


class SingularChannelError(NumericalError):
    def __init__(self, msg, subband=None):
        super().__init__(msg)
        self.subband = subband


class DegeneratePayloadError(NumericalError):
    """All port coefficients are zero; nothing to normalize against."""


class FormatError(ValueError):
    """Malformed dataset, checkpoint or payload (exit code 4)."""
