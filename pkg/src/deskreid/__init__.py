"""Desk-scale person re-identification baseline.

A self-contained numpy stack: reverse-mode autodiff tensors, the layer
vocabulary for a BN-neck embedding model, Adam/SGD training, and the
cross-camera CMC/mAP retrieval protocol, driven by a config-file CLI.
"""

from .tensor import Tensor

__all__ = ["Tensor"]
__version__ = "0.1.0"
