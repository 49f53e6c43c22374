"""2D magnetostatics with reduced magnetic vector potential formulations."""

__version__ = "0.1.0"
