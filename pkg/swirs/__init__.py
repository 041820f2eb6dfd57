"""Two-virus SWIRS epidemic model: simulation, stability, optimal control and networks."""

__version__ = "0.1.0"
