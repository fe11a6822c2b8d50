"""Safety value functions on grids and networks, and a gated safe-RL controller."""

__version__ = "0.1.0"
