"""Desk-scale crystal-structure / language alignment toolkit.

The package trains a small query-transformer bridge between a frozen
graph encoder over periodic crystal structures and a frozen character
level language model, entirely on CPU with reproducible float64
numerics.  It also ships structural similarity tools (SOAP descriptors
with a regularized-entropy match kernel) and a retrieval-augmented
inference path over stored bridge embeddings.
"""

__version__ = "0.1.0"

from .tensor import Tensor

__all__ = ["Tensor", "__version__"]
