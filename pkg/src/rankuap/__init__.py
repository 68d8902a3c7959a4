"""Universal adversarial perturbations against embedding-based image retrieval."""

__version__ = "0.1.0"
