"""Layer-wise probing and neuron attribution toolkit for dense retrievers."""

__version__ = "0.1.0"
