"""Learning-based drone search for clustered objects on gridded fields."""

__version__ = "0.1.0"
