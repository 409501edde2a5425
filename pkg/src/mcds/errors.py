class FormatError(ValueError):
    """File does not follow the expected container layout."""


class ValidationError(ValueError):
    """Inputs violate a documented precondition."""


class NumericError(FloatingPointError):
    """Non-finite values appeared during a forward pass or in a loss."""


class FingerprintMismatch(ValidationError):
    pass
