"""Local geometry of feature extraction in feedforward networks on finite distributions."""

__version__ = "0.1.0"
