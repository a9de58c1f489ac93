"""Feature-map size, pooling and perturbation resistance of CNNs."""
__version__ = "0.1.0"
