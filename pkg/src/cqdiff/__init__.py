"""Physics-informed conditional diffusion for cellular RSRP/SINR series."""

__version__ = "0.1.0"
