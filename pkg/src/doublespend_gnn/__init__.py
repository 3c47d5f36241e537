"""Double-spend detection from partial mempool observations with graph neural networks."""

from doublespend_gnn.errors import InvalidInputError, InvalidParametersError, ShapeError

__version__ = "0.1.0"

__all__ = ["InvalidInputError", "InvalidParametersError", "ShapeError", "__version__"]
