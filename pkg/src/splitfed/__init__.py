"""Split federated learning with top-K sparsified cut-layer traffic."""

__version__ = "0.1.0"
