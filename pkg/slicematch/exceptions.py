# Exception types shared by the library and the command script.


class DataException(ValueError):
    """
    Raised for malformed input: unreadable files, out-of-range indices, mismatched shapes and invalid
    configuration values.
    """
    pass


class NumericalException(ArithmeticError):
    """
    Raised when a numerical routine fails: eigensolver non-convergence, singular systems, non-finite losses.
    """
    pass
