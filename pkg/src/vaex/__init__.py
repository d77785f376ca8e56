"""VAEX: hierarchical conditional VAE for counterfactual auditing of image classifiers."""

__version__ = "0.1.0"
