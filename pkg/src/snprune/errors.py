"""Exception hierarchy shared by all modules."""


class PruneError(Exception):
    """Base class for every error raised by snprune."""


class ShapeError(PruneError, ValueError):
    pass


class DataError(PruneError, ValueError):
    """Non-finite or otherwise unusable numeric input."""


class ContractError(PruneError, ValueError):
    """A caller violated a documented precondition."""


class NotPSDError(PruneError, ArithmeticError):
    def __init__(self, index, pivot, floor):
        self.index = index
        self.pivot = pivot
        super().__init__(
            f"matrix is not positive semi-definite: pivot {index} = {pivot:.6g} "
            f"is below -{floor:.3g}"
        )


class NumericError(PruneError, ArithmeticError):
    pass


class LoadError(PruneError):
    """Malformed or inconsistent model / cache file."""


class ParseError(PruneError):
    """Malformed dataset file; the message carries a byte offset or line number."""
