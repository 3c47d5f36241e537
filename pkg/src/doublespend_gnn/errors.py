class InvalidParametersError(ValueError):
    """Raised when caller-supplied parameters violate an operation's preconditions."""


class InvalidInputError(ValueError):
    """Raised when input data (a graph, a dataset, a file) is unusable."""


class ShapeError(ValueError):
    pass
