"""entpick: simulation-backed target-mass picking for entangled material."""

__version__ = "0.1.0"
